#include "fleke/editor.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Cholesky>

namespace fleke {

namespace {

constexpr char kMkvMagic[] = "FLEKE-MKV-1";
constexpr double kConditionLimit = 1e12;
constexpr double kRidgeJitter = 1e-6;

Tokens prefixed_prompt(const Tokens& prefix, const Tokens& prompt) {
    Tokens out = prefix;
    out.insert(out.end(), prompt.begin(), prompt.end());
    return out;
}

void validate_entry(const MkvEntry& e) {
    if (e.case_id.empty()) throw protocol_error("MKV entry with empty case id");
    if (e.z.size() == 0 || e.z.size() != e.h_L.size())
        throw protocol_error("MKV entry " + e.case_id + ": inconsistent z/h_L dimensions");
    if (!e.z.allFinite() || !e.h_L.allFinite())
        throw protocol_error("MKV entry " + e.case_id + ": non-finite vector");
    if (e.keys.empty()) throw protocol_error("MKV entry " + e.case_id + ": no layer keys");
    for (const auto& [layer, k] : e.keys)
        if (!k.allFinite())
            throw protocol_error("MKV entry " + e.case_id + ": non-finite key at layer " +
                                 std::to_string(layer));
}

Mat solve_with_jitter(const Mat& R, const Mat& K, const Covariance& C,
                      const std::string& context) {
    try {
        return solve_delta(R, K, C);
    } catch (const numeric_error&) {
        log_warn("singular solve at layer " + std::to_string(C.layer) + " (" + context +
                 "); retrying with ridge jitter");
        Covariance jittered = C;
        jittered.matrix += kRidgeJitter * Mat::Identity(C.matrix.rows(), C.matrix.cols());
        try {
            return solve_delta(R, K, jittered);
        } catch (const numeric_error& e) {
            throw numeric_error(std::string(e.what()) + " [" + context +
                                ", after ridge jitter retry]");
        }
    }
}

}  // namespace

void EditRequest::validate(const ModelConfig& cfg) const {
    if (case_id.empty()) throw config_error("edit request with empty case id");
    if (prompt_tokens.empty()) throw config_error(case_id + ": empty prompt");
    if (subject_last_pos < 0 || subject_last_pos >= static_cast<int>(prompt_tokens.size()))
        throw config_error(case_id + ": subject position out of range");
    if (target_tokens.empty()) throw config_error(case_id + ": empty target");
    if (prefixes.empty()) throw config_error(case_id + ": at least one prefix required");
    std::size_t longest = 0;
    for (const auto& p : prefixes) longest = std::max(longest, p.size());
    const std::size_t total = longest + prompt_tokens.size() + target_tokens.size() - 1;
    if (total > static_cast<std::size_t>(cfg.max_seq))
        throw config_error(case_id + ": prefixed prompt + target exceeds max_seq");
}

void OptimizerConfig::validate() const {
    if (max_steps < 1) throw config_error("optimizer: max_steps must be >= 1");
    if (!(learning_rate > 0.0)) throw config_error("optimizer: learning_rate must be > 0");
    if (!(clamp_factor > 0.0)) throw config_error("optimizer: clamp_factor must be > 0");
    if (!std::isfinite(stop_logprob) || stop_logprob > 0.0)
        throw config_error("optimizer: stop_logprob must be a finite log-probability");
}

Covariance covariance_from_keys(int layer, const std::vector<Vec>& keys, double lambda) {
    if (keys.empty()) throw config_error("covariance: no keys");
    if (lambda < 0.0) throw config_error("covariance: lambda must be >= 0");
    const Eigen::Index d = keys.front().size();
    Mat acc = Mat::Zero(d, d);
    for (const Vec& k : keys) {
        if (k.size() != d) throw config_error("covariance: inconsistent key dimensions");
        acc.noalias() += k * k.transpose();
    }
    Covariance c;
    c.layer = layer;
    c.lambda = lambda;
    c.sample_count = static_cast<std::int64_t>(keys.size());
    c.matrix = (lambda / static_cast<double>(keys.size())) * acc;
    // Keep the stored matrix exactly symmetric regardless of accumulation order.
    c.matrix = 0.5 * (c.matrix + c.matrix.transpose()).eval();
    return c;
}

CovarianceMap estimate_covariances(const Model& model, const std::vector<int>& layers,
                                   int n_samples, double lambda, std::uint64_t seed) {
    const ModelConfig& cfg = model.cfg;
    if (layers.empty()) throw config_error("estimate_covariance: no layers");
    for (int layer : layers)
        if (layer < 0 || layer >= cfg.n_layers)
            throw config_error("estimate_covariance: layer out of range");
    if (n_samples < 1) throw config_error("estimate_covariance: n_samples must be >= 1");
    if (lambda < 0.0) throw config_error("estimate_covariance: lambda must be >= 0");
    if (n_samples < cfg.d_ffn)
        log_warn("covariance estimate from " + std::to_string(n_samples) +
                 " samples is rank-deficient for d_ffn=" + std::to_string(cfg.d_ffn));

    auto rng = make_rng(seed);
    std::uniform_int_distribution<int> len_dist(4, std::min(cfg.max_seq, 16));
    std::uniform_int_distribution<TokenId> tok_dist(0, cfg.vocab_size - 1);

    std::map<int, std::vector<Vec>> keys;
    for (int layer : layers) keys[layer].reserve(n_samples);
    for (int s = 0; s < n_samples; ++s) {
        const int len = len_dist(rng);
        Tokens toks(len);
        for (auto& t : toks) t = tok_dist(rng);
        std::uniform_int_distribution<int> pos_dist(0, len - 1);
        const int pos = pos_dist(rng);
        Trace tr = forward(model, toks);
        for (int layer : layers) keys[layer].push_back(tr.key[layer].row(pos).transpose());
    }
    CovarianceMap out;
    for (int layer : layers) out.emplace(layer, covariance_from_keys(layer, keys[layer], lambda));
    return out;
}

Covariance estimate_covariance(const Model& model, int layer, int n_samples, double lambda,
                               std::uint64_t seed) {
    return estimate_covariances(model, {layer}, n_samples, lambda, seed).at(layer);
}

ZResult compute_z(const Model& model, const EditRequest& req, const OptimizerConfig& opt) {
    const ModelConfig& cfg = model.cfg;
    req.validate(cfg);
    opt.validate();
    const int layer_L = cfg.last_critical();
    const int P = static_cast<int>(req.prefixes.size());

    std::vector<Tokens> prompts(P);
    std::vector<int> subj_pos(P);
    for (int j = 0; j < P; ++j) {
        prompts[j] = prefixed_prompt(req.prefixes[j], req.prompt_tokens);
        subj_pos[j] = static_cast<int>(req.prefixes[j].size()) + req.subject_last_pos;
    }

    Vec h_L = Vec::Zero(cfg.d_model);
    for (int j = 0; j < P; ++j) h_L += hidden_at(model, prompts[j], layer_L, subj_pos[j]);
    h_L /= static_cast<double>(P);
    const double max_norm = opt.clamp_factor * h_L.norm();

    auto evaluate = [&](const Vec& delta) {
        InjectionResult mean;
        mean.grad = Vec::Zero(cfg.d_model);
        for (int j = 0; j < P; ++j) {
            InjectionResult r = sequence_logprob_with_injection(
                model, prompts[j], req.target_tokens, layer_L, subj_pos[j], delta);
            mean.logprob += r.logprob;
            mean.grad += r.grad;
        }
        mean.logprob /= P;
        mean.grad /= P;
        return mean;
    };

    Vec delta = Vec::Zero(cfg.d_model);
    InjectionResult cur = evaluate(delta);
    ZResult res;
    res.h_L = h_L;
    res.achieved_logprob = cur.logprob;
    res.steps_used = 0;
    Vec best_delta = delta;

    if (cur.logprob <= opt.stop_logprob) {
        for (int step = 1; step <= opt.max_steps; ++step) {
            if (!cur.grad.allFinite())
                throw numeric_error(req.case_id + ": non-finite gradient at step " +
                                    std::to_string(step));
            delta += opt.learning_rate * cur.grad;
            const double norm = delta.norm();
            if (norm > max_norm) delta *= max_norm / norm;
            cur = evaluate(delta);
            res.steps_used = step;
            if (cur.logprob > res.achieved_logprob) {
                res.achieved_logprob = cur.logprob;
                best_delta = delta;
            }
            if (cur.logprob > opt.stop_logprob) break;
        }
    }
    res.z = h_L + best_delta;
    return res;
}

Vec compute_keys(const Model& model, const EditRequest& req, int layer) {
    req.validate(model.cfg);
    const int P = static_cast<int>(req.prefixes.size());
    Vec acc = Vec::Zero(model.cfg.d_ffn);
    for (int j = 0; j < P; ++j) {
        Tokens toks = prefixed_prompt(req.prefixes[j], req.prompt_tokens);
        const int pos = static_cast<int>(req.prefixes[j].size()) + req.subject_last_pos;
        acc += key_at(model, toks, layer, pos);
    }
    return acc / static_cast<double>(P);
}

Mat solve_delta(const Mat& R, const Mat& K, const Covariance& C) {
    if (R.cols() != K.cols())
        throw config_error("solve_delta: R and K must stack the same number of edits");
    if (C.matrix.rows() != K.rows() || C.matrix.cols() != K.rows())
        throw config_error("solve_delta: covariance shape mismatch");

    Mat a = C.matrix;
    a.noalias() += K * K.transpose();
    Eigen::LDLT<Mat> ldlt(a);
    if (ldlt.info() != Eigen::Success)
        throw numeric_error("singular system at layer " + std::to_string(C.layer));
    const Vec d = ldlt.vectorD().cwiseAbs();
    const double dmax = d.maxCoeff();
    const double dmin = d.minCoeff();
    if (!(dmin > 0.0) || dmax / dmin > kConditionLimit)
        throw numeric_error("singular system at layer " + std::to_string(C.layer) +
                            " (condition estimate " +
                            std::to_string(dmin > 0.0 ? dmax / dmin : INFINITY) + ")");
    Mat x = ldlt.solve(K * R.transpose());  // d_ffn x d_model
    Mat delta = x.transpose();
    if (!delta.allFinite())
        throw numeric_error("non-finite solution at layer " + std::to_string(C.layer));
    return delta;
}

EditOutcome edit(const Model& model, const std::vector<EditRequest>& requests,
                 const CovarianceMap& cov, const OptimizerConfig& opt) {
    const ModelConfig& cfg = model.cfg;
    if (requests.empty()) throw config_error("edit: no requests");
    for (int l : cfg.critical_layers)
        if (!cov.count(l))
            throw config_error("edit: covariance missing for critical layer " +
                               std::to_string(l));

    const int n = static_cast<int>(requests.size());
    const int layer_L = cfg.last_critical();

    EditOutcome out;
    out.mkvs.d_model = cfg.d_model;
    out.mkvs.d_ffn = cfg.d_ffn;
    out.mkvs.entries.resize(n);

    std::vector<ZResult> zres(n);
    for (int i = 0; i < n; ++i) {
        try {
            zres[i] = compute_z(model, requests[i], opt);
        } catch (const numeric_error& e) {
            throw numeric_error("edit failed for case " + requests[i].case_id + ": " + e.what());
        }
        out.ledger.z_computations += 1;
        MkvEntry& entry = out.mkvs.entries[i];
        entry.case_id = requests[i].case_id;
        entry.z = zres[i].z;
        entry.h_L = zres[i].h_L;
    }

    Model cur = model;
    for (int l : cfg.critical_layers) {
        const double divisor = static_cast<double>(cfg.layers_remaining(l));
        Mat keys(cfg.d_ffn, n);
        Mat residuals(cfg.d_model, n);
        for (int i = 0; i < n; ++i) {
            const EditRequest& req = requests[i];
            // One pass per prefixed prompt harvests both the layer key and the
            // current hidden state at the last critical layer.
            const int P = static_cast<int>(req.prefixes.size());
            Vec k_acc = Vec::Zero(cfg.d_ffn);
            Vec h_acc = Vec::Zero(cfg.d_model);
            for (int j = 0; j < P; ++j) {
                Tokens toks = prefixed_prompt(req.prefixes[j], req.prompt_tokens);
                const int pos = static_cast<int>(req.prefixes[j].size()) + req.subject_last_pos;
                Trace tr = forward(cur, toks);
                k_acc += tr.key[l].row(pos).transpose();
                h_acc += tr.h[layer_L].row(pos).transpose();
            }
            keys.col(i) = k_acc / P;
            residuals.col(i) = (zres[i].z - h_acc / P) / divisor;
            out.mkvs.entries[i].keys[l] = keys.col(i);
        }
        Mat delta = solve_with_jitter(residuals, keys, cov.at(l),
                                      "edit batch starting at case " + requests[0].case_id);
        cur = apply_delta(cur, l, delta);
        out.layer_deltas[l] = std::move(delta);
    }
    out.model = std::move(cur);
    return out;
}

ReeditOutcome reedit(const Model& model, const std::vector<MkvEntry>& entries,
                     const CovarianceMap& cov) {
    const ModelConfig& cfg = model.cfg;
    if (entries.empty()) throw config_error("reedit: no entries");
    for (int l : cfg.critical_layers)
        if (!cov.count(l))
            throw config_error("reedit: covariance missing for critical layer " +
                               std::to_string(l));
    const int n = static_cast<int>(entries.size());
    for (const MkvEntry& e : entries) {
        validate_entry(e);
        if (e.z.size() != cfg.d_model)
            throw protocol_error("malformed MKV " + e.case_id + ": z dimension mismatch");
        for (int l : cfg.critical_layers)
            if (!e.keys.count(l))
                throw protocol_error("malformed MKV " + e.case_id + ": missing key for layer " +
                                     std::to_string(l));
    }

    Model cur = model;
    for (int l : cfg.critical_layers) {
        const double divisor = static_cast<double>(cfg.layers_remaining(l));
        Mat keys(cfg.d_ffn, n);
        Mat residuals(cfg.d_model, n);
        for (int i = 0; i < n; ++i) {
            const Vec& k = entries[i].keys.at(l);
            if (k.size() != cfg.d_ffn)
                throw protocol_error("malformed MKV " + entries[i].case_id +
                                     ": key dimension mismatch at layer " + std::to_string(l));
            keys.col(i) = k;
            residuals.col(i) = (entries[i].z - entries[i].h_L) / divisor;
        }
        Mat delta = solve_with_jitter(residuals, keys, cov.at(l),
                                      "reedit batch starting at case " + entries[0].case_id);
        cur = apply_delta(cur, l, delta);
    }
    ReeditOutcome out;
    out.model = std::move(cur);
    out.ledger.reedits_applied = n;
    return out;
}

namespace {

void write_entry(ByteWriter& w, const MkvEntry& e, int d_model, int d_ffn) {
    validate_entry(e);
    if (e.z.size() != d_model || e.h_L.size() != d_model)
        throw config_error("MKV entry " + e.case_id + ": vector dimension mismatch on write");
    w.str(e.case_id);
    w.u32(e.origin_client);
    w.u32(static_cast<std::uint32_t>(e.created_interval));
    for (int i = 0; i < d_model; ++i) w.f64(e.z(i));
    for (int i = 0; i < d_model; ++i) w.f64(e.h_L(i));
    w.u32(static_cast<std::uint32_t>(e.keys.size()));
    for (const auto& [layer, key] : e.keys) {
        if (key.size() != d_ffn)
            throw config_error("MKV entry " + e.case_id + ": key dimension mismatch on write");
        w.u32(static_cast<std::uint32_t>(layer));
        for (int i = 0; i < d_ffn; ++i) w.f64(key(i));
    }
}

MkvEntry read_entry(ByteReader& r, int d_model, int d_ffn) {
    MkvEntry e;
    e.case_id = r.str();
    e.origin_client = r.u32();
    e.created_interval = static_cast<int>(r.u32());
    e.z.resize(d_model);
    for (int i = 0; i < d_model; ++i) e.z(i) = r.f64();
    e.h_L.resize(d_model);
    for (int i = 0; i < d_model; ++i) e.h_L(i) = r.f64();
    const std::uint32_t n_keys = r.u32();
    for (std::uint32_t k = 0; k < n_keys; ++k) {
        const int layer = static_cast<int>(r.u32());
        Vec key(d_ffn);
        for (int i = 0; i < d_ffn; ++i) key(i) = r.f64();
        e.keys[layer] = std::move(key);
    }
    validate_entry(e);
    return e;
}

std::vector<std::uint8_t> serialize_mkv_impl(const MkvBatch& batch,
                                             const std::vector<int>* upload_intervals) {
    if (upload_intervals && upload_intervals->size() != batch.entries.size())
        throw config_error("MKV store: interval list does not match entry count");
    ByteWriter w;
    w.raw(kMkvMagic, sizeof(kMkvMagic) - 1);
    w.u8(upload_intervals ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(batch.d_model));
    w.u32(static_cast<std::uint32_t>(batch.d_ffn));
    w.u32(static_cast<std::uint32_t>(batch.entries.size()));
    for (std::size_t i = 0; i < batch.entries.size(); ++i) {
        write_entry(w, batch.entries[i], batch.d_model, batch.d_ffn);
        if (upload_intervals) w.u32(static_cast<std::uint32_t>((*upload_intervals)[i]));
    }
    return std::move(w.bytes);
}

std::pair<MkvBatch, std::vector<int>> deserialize_mkv_impl(
    const std::vector<std::uint8_t>& bytes, bool expect_store) {
    ByteReader r(bytes);
    char magic[sizeof(kMkvMagic) - 1];
    r.raw(magic, sizeof(magic));
    if (std::memcmp(magic, kMkvMagic, sizeof(magic)) != 0)
        throw protocol_error("MKV container: bad magic (expected FLEKE-MKV-1)");
    const bool is_store = r.u8() != 0;
    if (is_store != expect_store)
        throw protocol_error(expect_store ? "MKV container: expected store, found batch"
                                          : "MKV container: expected batch, found store");
    MkvBatch batch;
    batch.d_model = static_cast<int>(r.u32());
    batch.d_ffn = static_cast<int>(r.u32());
    if (batch.d_model < 1 || batch.d_ffn < 1)
        throw protocol_error("MKV container: bad dimensions");
    const std::uint32_t count = r.u32();
    std::vector<int> intervals;
    batch.entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        batch.entries.push_back(read_entry(r, batch.d_model, batch.d_ffn));
        if (is_store) intervals.push_back(static_cast<int>(r.u32()));
    }
    if (!r.at_end()) throw protocol_error("MKV container: trailing bytes");
    return {std::move(batch), std::move(intervals)};
}

}  // namespace

std::vector<std::uint8_t> serialize_mkv_batch(const MkvBatch& batch) {
    return serialize_mkv_impl(batch, nullptr);
}

MkvBatch deserialize_mkv_batch(const std::vector<std::uint8_t>& bytes) {
    return deserialize_mkv_impl(bytes, false).first;
}

void save_mkv_batch(const MkvBatch& batch, const std::string& path) {
    write_file_bytes(path, serialize_mkv_batch(batch));
}

MkvBatch load_mkv_batch(const std::string& path) {
    return deserialize_mkv_batch(read_file_bytes(path));
}

std::vector<std::uint8_t> serialize_mkv_store(const MkvBatch& batch,
                                              const std::vector<int>& upload_intervals) {
    return serialize_mkv_impl(batch, &upload_intervals);
}

std::pair<MkvBatch, std::vector<int>> deserialize_mkv_store(
    const std::vector<std::uint8_t>& bytes) {
    return deserialize_mkv_impl(bytes, true);
}

}  // namespace fleke
