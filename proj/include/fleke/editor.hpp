#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fleke/toy_lm.hpp"

namespace fleke {

// One edit to install: templated prompt with the subject's last token marked,
// the new object continuation, and the random prefixes used for robustness.
struct EditRequest {
    std::string case_id;
    Tokens prompt_tokens;
    int subject_last_pos = 0;
    Tokens target_tokens;
    std::vector<Tokens> prefixes;  // P >= 1, may include the empty prefix

    void validate(const ModelConfig& cfg) const;
};

struct Covariance {
    int layer = 0;
    Mat matrix;  // d_ffn x d_ffn, symmetric PSD
    double lambda = 0.0;
    std::int64_t sample_count = 0;
};

struct ZResult {
    Vec z;
    Vec h_L;  // pre-edit hidden state at the last critical layer, prefix-averaged
    double achieved_logprob = 0.0;
    int steps_used = 0;
};

struct MkvEntry {
    std::string case_id;
    Vec z;
    Vec h_L;
    std::map<int, Vec> keys;  // layer -> d_ffn key, covering the critical set
    std::uint32_t origin_client = 0;
    int created_interval = 0;
};

struct MkvBatch {
    int d_model = 0;
    int d_ffn = 0;
    std::vector<MkvEntry> entries;
};

struct OptimizerConfig {
    int max_steps = 25;
    double learning_rate = 0.5;
    double clamp_factor = 4.0;            // max ||delta|| as a multiple of ||h_L||
    double stop_logprob = -0.05129329438755058;  // log(0.95)

    void validate() const;
};

struct LedgerDelta {
    std::int64_t z_computations = 0;
    std::int64_t reedits_applied = 0;
};

using CovarianceMap = std::map<int, Covariance>;

// lambda * (1/n) sum k k^T over the given keys.
Covariance covariance_from_keys(int layer, const std::vector<Vec>& keys, double lambda);

// Harvests one key per sample at a random position of a random token sequence.
Covariance estimate_covariance(const Model& model, int layer, int n_samples, double lambda,
                               std::uint64_t seed);

// Same sampling stream for several layers at once; equals per-layer calls with
// the same seed while sharing the forward passes.
CovarianceMap estimate_covariances(const Model& model, const std::vector<int>& layers,
                                   int n_samples, double lambda, std::uint64_t seed);

ZResult compute_z(const Model& model, const EditRequest& req, const OptimizerConfig& opt);

// Mean over the prefixed prompts of the FFN key at the subject's last token.
Vec compute_keys(const Model& model, const EditRequest& req, int layer);

// Delta = R K^T (C + K K^T)^{-1} through an LDLT solve. R: d_model x n,
// K: d_ffn x n. Throws numeric_error when the system is near singular.
Mat solve_delta(const Mat& R, const Mat& K, const Covariance& C);

struct EditOutcome {
    Model model;
    MkvBatch mkvs;
    LedgerDelta ledger;
    std::map<int, Mat> layer_deltas;  // per critical layer, as solved this batch
};

EditOutcome edit(const Model& model, const std::vector<EditRequest>& requests,
                 const CovarianceMap& cov, const OptimizerConfig& opt);

struct ReeditOutcome {
    Model model;
    LedgerDelta ledger;
};

// Spread-only path over stored snapshots; no gradient descent happens here.
ReeditOutcome reedit(const Model& model, const std::vector<MkvEntry>& entries,
                     const CovarianceMap& cov);

// MKV container ("FLEKE-MKV-1"). Store files carry an extra per-entry upload
// interval; batch files do not.
std::vector<std::uint8_t> serialize_mkv_batch(const MkvBatch& batch);
MkvBatch deserialize_mkv_batch(const std::vector<std::uint8_t>& bytes);
void save_mkv_batch(const MkvBatch& batch, const std::string& path);
MkvBatch load_mkv_batch(const std::string& path);

std::vector<std::uint8_t> serialize_mkv_store(const MkvBatch& batch,
                                              const std::vector<int>& upload_intervals);
std::pair<MkvBatch, std::vector<int>> deserialize_mkv_store(
    const std::vector<std::uint8_t>& bytes);

}  // namespace fleke
