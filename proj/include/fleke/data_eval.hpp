#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fleke/toy_lm.hpp"

namespace fleke {

struct FactRecord {
    std::string case_id;
    Tokens subject;
    int relation = 0;
    Tokens o_old;
    Tokens o_new;
    Tokens prompt;                     // templated prompt including the subject span
    std::vector<Tokens> paraphrases;   // alternative prompts sharing the subject
    bool holdout = false;

    // Index of the subject's last token inside `prompt_like` (first occurrence
    // of the subject subsequence; the generator guarantees uniqueness).
    int subject_last_in(const Tokens& prompt_like) const;
    int subject_last_pos() const { return subject_last_in(prompt); }
};

struct DatasetConfig {
    int n_facts = 120;
    int n_relations = 8;
    double overlap_fraction = 0.0;  // fraction of facts duplicated across two clients
    int paraphrases_per_fact = 2;
    int holdout_per_client = 5;
    int n_objects = 8;  // shared object token pool
    std::uint64_t seed = 0;

    void validate() const;
};

struct Metrics {
    double efficacy = 0.0;
    double generalization = 0.0;
    double specificity = 0.0;
    double score = 0.0;
    std::int64_t edit_trials = 0;
    std::int64_t gen_trials = 0;
    std::int64_t spec_trials = 0;
};

// Harmonic mean of three fractions; 0 when any input is 0.
double harmonic_score(double a, double b, double c);

// Editable facts followed by holdout facts, deterministic in cfg.seed.
// Needs the client count to size the holdout pool.
std::vector<FactRecord> generate_dataset(const DatasetConfig& cfg, int n_clients,
                                         const ModelConfig& model_cfg);

// Relation-grouped homes plus a fraction of facts additionally assigned to a
// second client. Output per client preserves dataset order.
std::vector<std::vector<FactRecord>> partition_by_relation(
    const std::vector<FactRecord>& facts, int n_clients, double mix_fraction,
    std::uint64_t seed);

// Spectral clustering on an embedding affinity; falls back to round-robin when
// the embeddings are degenerate.
std::vector<std::vector<FactRecord>> partition_by_embedding(
    const std::vector<FactRecord>& facts, int n_clients,
    const std::function<Vec(const FactRecord&)>& embedder);

// Balanced random homes with a fraction of facts duplicated to a second client.
std::vector<std::vector<FactRecord>> partition_with_overlap(
    const std::vector<FactRecord>& facts, int n_clients, double overlap_fraction,
    std::uint64_t seed);

// Mean embedding-matrix row over the prompt tokens.
Vec embed_fact(const Model& model, const FactRecord& fact);

Metrics eval_metrics(const Model& edited, const Model& pristine,
                     const std::vector<FactRecord>& edited_facts,
                     const std::vector<FactRecord>& holdout_facts);

// Weighted mean of the component fractions; score recomputed from the
// aggregate fractions.
Metrics combine_weighted(const std::vector<Metrics>& per_client,
                         const std::vector<double>& weights);

double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// Dataset file: one record per line, fixed field order, LF-terminated.
std::string serialize_dataset(const std::vector<FactRecord>& facts);
std::vector<FactRecord> parse_dataset(const std::string& text);
void save_dataset(const std::vector<FactRecord>& facts, const std::string& path);
std::vector<FactRecord> load_dataset(const std::string& path);

}  // namespace fleke
