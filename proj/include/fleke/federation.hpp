#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fleke/data_eval.hpp"
#include "fleke/editor.hpp"

namespace fleke {

enum class Mode { fedit, edit_avg, isolated };

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& name);

struct FederationConfig {
    int n_clients = 8;
    int time_slots = 10;
    double alpha = 0.65;
    bool reedit_enabled = true;
    bool exclude_own = true;
    bool dedupe_applied = true;
    Mode mode = Mode::fedit;

    void validate() const;
};

struct ClientState {
    std::uint32_t client_id = 0;
    Model model;
    std::vector<FactRecord> local_facts;            // dataset order
    std::vector<FactRecord> holdout_facts;
    std::vector<std::vector<int>> schedule;         // per interval, indices into local_facts
    std::vector<MkvEntry> local_mkvs;               // own uploads, cumulative
    std::set<std::string> applied_case_ids;
};

// Splits the client's facts evenly across the intervals, in dataset order.
std::vector<std::vector<int>> build_schedule(int n_facts, int time_slots);

class ServerStore {
  public:
    struct Stored {
        MkvEntry entry;
        int upload_interval = 0;
    };

    void append(MkvEntry entry, int upload_interval);
    const std::vector<Stored>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    // Entries uploaded in (from_interval, to_interval], minus the excluded
    // client and case ids. Pure query.
    std::vector<MkvEntry> window(int from_interval, int to_interval,
                                 std::optional<std::uint32_t> exclude_client,
                                 const std::set<std::string>* exclude_case_ids) const;

    std::vector<std::uint8_t> serialize(int d_model, int d_ffn) const;
    static ServerStore deserialize(const std::vector<std::uint8_t>& bytes);
    void save(const std::string& path, int d_model, int d_ffn) const;
    static ServerStore load(const std::string& path);

  private:
    std::vector<Stored> entries_;
};

struct ComputationLedger {
    struct PerClient {
        std::int64_t z_computations = 0;
        std::int64_t reedits_applied = 0;
        std::int64_t entries_uploaded = 0;
        std::int64_t entries_downloaded = 0;
    };
    std::vector<PerClient> per_client;

    PerClient totals() const;
};

// Zero-vector convention: norms below 1e-12 yield similarity 0.
double cosine(const Vec& a, const Vec& b);

// Re-edit condition over the z component: a candidate is selected iff the
// number of local entries with cosine strictly above alpha reaches half the
// local count. Server order is preserved; empty locals select nothing.
std::vector<MkvEntry> select_z(const std::vector<MkvEntry>& server_entries,
                               const std::vector<MkvEntry>& local_entries, double alpha);

struct CaseEvent {
    std::uint32_t client = 0;
    int interval = 0;
};

struct CaseTraceEntry {
    std::vector<std::uint32_t> holders;
    std::vector<CaseEvent> z_events;
    std::vector<CaseEvent> reedit_events;
    std::vector<CaseEvent> skip_events;
    std::vector<CaseEvent> retrievable_events;  // present in a queried window
};

using CaseTrace = std::map<std::string, CaseTraceEntry>;

struct PrefixSpec {
    int count = 3;
    int min_len = 2;
    int max_len = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

EditRequest build_request(const FactRecord& fact, const PrefixSpec& prefixes,
                          const ModelConfig& cfg);

struct FedRunInput {
    FederationConfig fed;
    OptimizerConfig opt;
    CovarianceMap cov;
    PrefixSpec prefixes;
    std::vector<ClientState> clients;
    Model pristine;
    std::uint64_t diagnostic_seed = 0;
    int diagnostic_max_pairs = 400;
};

// FedAvg-style rule: aggregate[l] = sum_c p_c delta_c[l] with p_c the client's
// share of this interval's edits. Returns the weights alongside the aggregate.
std::pair<std::map<int, Mat>, std::vector<double>> aggregate_deltas(
    const std::vector<std::map<int, Mat>>& per_client, const std::vector<int>& edit_counts,
    const std::vector<int>& critical_layers, int d_model, int d_ffn);

struct FedRunResult {
    std::vector<ClientState> clients;
    ServerStore store;
    ComputationLedger ledger;
    CaseTrace trace;
    std::vector<Metrics> per_client;
    std::vector<Metrics> per_client_overlap;  // facts held by >= 2 clients
    Metrics weighted;
    Metrics weighted_overlap;
    bool has_overlap = false;
    std::vector<std::pair<int, std::vector<double>>> edit_avg_weights;  // interval, p_c
    double diagnostic_pearson = 0.0;
    bool diagnostic_valid = false;
};

FedRunResult run_federation(FedRunInput input);

// Correlation between prompt-embedding similarity and z similarity over
// sampled pairs of edited facts.
std::pair<double, bool> z_similarity_diagnostic(
    const Model& model, const std::vector<MkvEntry>& entries,
    const std::map<std::string, FactRecord>& facts_by_case, int max_pairs,
    std::uint64_t seed);

}  // namespace fleke
