#include "fleke/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fleke {

namespace {

constexpr double kLnEps = 1e-5;
constexpr char kModelMagic[] = "FLEKE-TOYLM-1";

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}

double activate(Activation act, double x) {
    return act == Activation::gelu ? gelu(x) : std::max(0.0, x);
}

double activate_grad(Activation act, double x) {
    return act == Activation::gelu ? gelu_grad(x) : (x > 0.0 ? 1.0 : 0.0);
}

struct LnStats {
    Vec mean;     // per row
    Vec inv_std;  // per row
};

// Row-wise pre-norm with scale-only affine.
Mat layer_norm_rows(const Mat& x, const Vec& gamma, LnStats* stats) {
    const Eigen::Index rows = x.rows(), cols = x.cols();
    Mat out(rows, cols);
    if (stats) {
        stats->mean.resize(rows);
        stats->inv_std.resize(rows);
    }
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().mean();
        const double s = 1.0 / std::sqrt(var + kLnEps);
        out.row(i) = ((x.row(i).array() - mu) * s) * gamma.transpose().array();
        if (stats) {
            stats->mean(i) = mu;
            stats->inv_std(i) = s;
        }
    }
    return out;
}

// d(loss)/dx for u = gamma .* (x - mu) * s, given du.
Mat layer_norm_backward_rows(const Mat& du, const Mat& x, const Vec& gamma,
                             const LnStats& stats) {
    const Eigen::Index rows = x.rows(), cols = x.cols();
    Mat dx(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double s = stats.inv_std(i);
        Eigen::ArrayXd xhat = (x.row(i).transpose().array() - stats.mean(i)) * s;
        Eigen::ArrayXd dxhat = du.row(i).transpose().array() * gamma.array();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * xhat).mean();
        dx.row(i) = (s * (dxhat - m1 - xhat * m2)).transpose();
    }
    return dx;
}

struct LayerCache {
    Mat h_prev;             // input stream
    LnStats ln;
    Mat u;                  // post-LN
    Mat q, k, v;            // seq x d_model
    std::vector<Mat> probs; // per head: seq x seq attention weights
    Mat attn_concat;        // seq x d_model, pre output-projection
    Mat ffn_pre;            // seq x d_ffn pre-activation
    Mat ffn_key;            // seq x d_ffn post-activation
    Mat attn_out;           // seq x d_model
    Mat ffn_out;            // seq x d_model
    Mat h;                  // output stream (post residual, post injection)
};

struct ForwardCache {
    Mat h_in;
    std::vector<LayerCache> layers;
    LnStats final_ln;
    Mat final_norm;  // seq x d_model
    Mat logits;      // seq x vocab
};

void check_tokens(const ModelConfig& cfg, const Tokens& tokens) {
    if (tokens.empty()) throw config_error("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq)
        throw config_error("forward: sequence length " + std::to_string(tokens.size()) +
                           " exceeds max_seq " + std::to_string(cfg.max_seq));
    for (TokenId t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw config_error("forward: token " + std::to_string(t) + " out of vocabulary");
}

// inject_layer < 0 disables injection.
ForwardCache run_forward(const Model& model, const Tokens& tokens, int inject_layer,
                         int inject_pos, const Vec* delta) {
    const ModelConfig& cfg = model.cfg;
    check_tokens(cfg, tokens);
    const int seq = static_cast<int>(tokens.size());
    const int hd = cfg.d_model / cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    ForwardCache fc;
    fc.h_in.resize(seq, cfg.d_model);
    for (int i = 0; i < seq; ++i)
        fc.h_in.row(i) = model.embedding.row(tokens[i]) + model.pos_embedding.row(i);

    Mat h = fc.h_in;
    fc.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerCache& lc = fc.layers[l];
        const LayerWeights& w = model.layers[l];
        lc.h_prev = h;
        lc.u = layer_norm_rows(h, w.ln_gamma, &lc.ln);

        lc.q.noalias() = lc.u * w.w_q.transpose();
        lc.k.noalias() = lc.u * w.w_k.transpose();
        lc.v.noalias() = lc.u * w.w_v.transpose();

        lc.attn_concat.resize(seq, cfg.d_model);
        lc.probs.resize(cfg.n_heads);
        for (int head = 0; head < cfg.n_heads; ++head) {
            auto qh = lc.q.middleCols(head * hd, hd);
            auto kh = lc.k.middleCols(head * hd, hd);
            auto vh = lc.v.middleCols(head * hd, hd);
            Mat scores = scale * (qh * kh.transpose());
            Mat& probs = lc.probs[head];
            probs.setZero(seq, seq);
            for (int i = 0; i < seq; ++i) {
                // Causal: position i attends to [0, i].
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j));
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) denom += std::exp(scores(i, j) - mx);
                for (int j = 0; j <= i; ++j) probs(i, j) = std::exp(scores(i, j) - mx) / denom;
            }
            lc.attn_concat.middleCols(head * hd, hd).noalias() = probs * vh;
        }
        lc.attn_out.noalias() = lc.attn_concat * w.w_attn_out.transpose();

        lc.ffn_pre.noalias() = lc.u * w.w_ffn_in.transpose();
        lc.ffn_key = lc.ffn_pre.unaryExpr(
            [&](double x) { return activate(cfg.activation, x); });
        lc.ffn_out.noalias() = lc.ffn_key * w.w_ffn_out.transpose();

        h = lc.h_prev + lc.attn_out + lc.ffn_out;
        if (l == inject_layer) h.row(inject_pos) += delta->transpose();
        lc.h = h;
    }

    fc.final_norm = layer_norm_rows(h, model.final_ln_gamma, &fc.final_ln);
    fc.logits.noalias() = fc.final_norm * model.embedding.transpose();
    return fc;
}

Vec softmax_row(const Eigen::RowVectorXd& logits) {
    const double mx = logits.maxCoeff();
    Vec p = (logits.array() - mx).exp().transpose();
    return p / p.sum();
}

// Gradient of a weighted sum of per-position log-softmax targets w.r.t. the
// stream at stop_layer's output. dlogits must be pre-seeded by the caller.
Mat run_backward_to_layer(const Model& model, const ForwardCache& fc, Mat dlogits,
                          int stop_layer) {
    const ModelConfig& cfg = model.cfg;
    const int seq = static_cast<int>(fc.h_in.rows());
    const int hd = cfg.d_model / cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Mat d_norm = dlogits * model.embedding;  // seq x d_model
    const Mat& h_last = fc.layers.back().h;
    Mat dh = layer_norm_backward_rows(d_norm, h_last, model.final_ln_gamma, fc.final_ln);

    for (int l = cfg.n_layers - 1; l > stop_layer; --l) {
        const LayerCache& lc = fc.layers[l];
        const LayerWeights& w = model.layers[l];

        // FFN branch.
        Mat d_key = dh * w.w_ffn_out;  // seq x d_ffn
        Mat d_pre(seq, cfg.d_ffn);
        for (Eigen::Index i = 0; i < d_pre.size(); ++i)
            d_pre(i) = d_key(i) * activate_grad(cfg.activation, lc.ffn_pre(i));
        Mat du = d_pre * w.w_ffn_in;  // seq x d_model

        // Attention branch.
        Mat d_concat = dh * w.w_attn_out;  // seq x d_model
        Mat dq(seq, cfg.d_model), dk(seq, cfg.d_model), dv(seq, cfg.d_model);
        for (int head = 0; head < cfg.n_heads; ++head) {
            auto doh = d_concat.middleCols(head * hd, hd);
            auto qh = lc.q.middleCols(head * hd, hd);
            auto kh = lc.k.middleCols(head * hd, hd);
            auto vh = lc.v.middleCols(head * hd, hd);
            const Mat& probs = lc.probs[head];
            Mat dprobs = doh * vh.transpose();            // seq x seq
            dv.middleCols(head * hd, hd).noalias() = probs.transpose() * doh;
            // Softmax backward; masked entries carry probs == 0 and drop out.
            Mat dscores(seq, seq);
            for (int i = 0; i < seq; ++i) {
                const double dot = dprobs.row(i).cwiseProduct(probs.row(i)).sum();
                dscores.row(i) =
                    (probs.row(i).array() * (dprobs.row(i).array() - dot)).matrix();
            }
            dq.middleCols(head * hd, hd).noalias() = scale * (dscores * kh);
            dk.middleCols(head * hd, hd).noalias() = scale * (dscores.transpose() * qh);
        }
        du.noalias() += dq * w.w_q;
        du.noalias() += dk * w.w_k;
        du.noalias() += dv * w.w_v;

        Mat dx = layer_norm_backward_rows(du, lc.h_prev, w.ln_gamma, lc.ln);
        dh += dx;
    }
    return dh;
}

InjectionResult scored_injection(const Model& model, const Tokens& input, int layer,
                                 int position, const Vec& delta,
                                 const std::vector<std::pair<int, TokenId>>& scores) {
    const ModelConfig& cfg = model.cfg;
    if (layer < 0 || layer >= cfg.n_layers)
        throw config_error("injection layer out of range: " + std::to_string(layer));
    if (position < 0 || position >= static_cast<int>(input.size()))
        throw config_error("injection position out of range: " + std::to_string(position));
    if (delta.size() != cfg.d_model)
        throw config_error("injection delta has dimension " + std::to_string(delta.size()) +
                           ", expected " + std::to_string(cfg.d_model));

    ForwardCache fc = run_forward(model, input, layer, position, &delta);
    const int seq = static_cast<int>(input.size());

    InjectionResult res;
    Mat dlogits = Mat::Zero(seq, cfg.vocab_size);
    for (auto [pos, target] : scores) {
        Vec p = softmax_row(fc.logits.row(pos));
        res.logprob += std::log(p(target));
        dlogits.row(pos) -= p.transpose();
        dlogits(pos, target) += 1.0;
    }
    Mat dh = run_backward_to_layer(model, fc, std::move(dlogits), layer);
    res.grad = dh.row(position).transpose();
    return res;
}

Trace trace_from_cache(ForwardCache&& fc) {
    Trace t;
    t.logits = std::move(fc.logits);
    t.h_in = std::move(fc.h_in);
    t.h.reserve(fc.layers.size());
    for (auto& lc : fc.layers) {
        t.h.push_back(std::move(lc.h));
        t.attn.push_back(std::move(lc.attn_out));
        t.ffn.push_back(std::move(lc.ffn_out));
        t.key.push_back(std::move(lc.ffn_key));
    }
    return t;
}

Mat random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw config_error("n_layers must be >= 1");
    if (d_model < 2) throw config_error("d_model must be >= 2");
    if (d_ffn < d_model) throw config_error("d_ffn must be >= d_model");
    if (n_heads < 1 || d_model % n_heads != 0)
        throw config_error("n_heads must divide d_model (" + std::to_string(n_heads) + " vs " +
                           std::to_string(d_model) + ")");
    if (vocab_size < 2) throw config_error("vocab_size must be >= 2");
    if (max_seq < 1) throw config_error("max_seq must be >= 1");
    if (critical_layers.empty()) throw config_error("critical_layers must be nonempty");
    for (std::size_t i = 0; i < critical_layers.size(); ++i) {
        if (critical_layers[i] < 0 || critical_layers[i] >= n_layers)
            throw config_error("critical layer out of range: " +
                               std::to_string(critical_layers[i]));
        if (i > 0 && critical_layers[i] <= critical_layers[i - 1])
            throw config_error("critical_layers must be strictly increasing");
    }
}

bool ModelConfig::is_critical(int layer) const {
    return std::find(critical_layers.begin(), critical_layers.end(), layer) !=
           critical_layers.end();
}

int ModelConfig::layers_remaining(int layer) const {
    int n = 0;
    for (int l : critical_layers)
        if (l >= layer) ++n;
    return n;
}

Model init_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double ffn_in_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double ffn_out_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_ffn));

    {
        auto rng = make_rng(seed_for(cfg.seed, "init/embedding"));
        m.embedding = random_matrix(rng, cfg.vocab_size, cfg.d_model, 1.0);
    }
    {
        auto rng = make_rng(seed_for(cfg.seed, "init/pos_embedding"));
        m.pos_embedding = random_matrix(rng, cfg.max_seq, cfg.d_model, 1.0);
    }
    m.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto rng = make_rng(seed_for(cfg.seed, "init/layer/" + std::to_string(l)));
        LayerWeights& w = m.layers[l];
        w.ln_gamma = Vec::Ones(cfg.d_model);
        w.w_q = random_matrix(rng, cfg.d_model, cfg.d_model, attn_std);
        w.w_k = random_matrix(rng, cfg.d_model, cfg.d_model, attn_std);
        w.w_v = random_matrix(rng, cfg.d_model, cfg.d_model, attn_std);
        w.w_attn_out = random_matrix(rng, cfg.d_model, cfg.d_model, attn_std);
        w.w_ffn_in = random_matrix(rng, cfg.d_ffn, cfg.d_model, ffn_in_std);
        w.w_ffn_out = random_matrix(rng, cfg.d_model, cfg.d_ffn, ffn_out_std);
    }
    m.final_ln_gamma = Vec::Ones(cfg.d_model);
    return m;
}

Trace forward(const Model& model, const Tokens& tokens) {
    return trace_from_cache(run_forward(model, tokens, -1, -1, nullptr));
}

Vec next_token_logits(const Model& model, const Tokens& tokens) {
    ForwardCache fc = run_forward(model, tokens, -1, -1, nullptr);
    return fc.logits.row(fc.logits.rows() - 1).transpose();
}

InjectionResult logprob_with_injection(const Model& model, const Tokens& tokens,
                                       TokenId target, int layer, int position,
                                       const Vec& delta) {
    if (target < 0 || target >= model.cfg.vocab_size)
        throw config_error("target token out of vocabulary");
    const int last = static_cast<int>(tokens.size()) - 1;
    return scored_injection(model, tokens, layer, position, delta, {{last, target}});
}

InjectionResult sequence_logprob_with_injection(const Model& model, const Tokens& tokens,
                                                const Tokens& target_tokens, int layer,
                                                int position, const Vec& delta) {
    if (target_tokens.empty()) throw config_error("empty target sequence");
    Tokens input = tokens;
    std::vector<std::pair<int, TokenId>> scores;
    int pos = static_cast<int>(tokens.size()) - 1;
    for (std::size_t i = 0; i < target_tokens.size(); ++i) {
        scores.emplace_back(pos, target_tokens[i]);
        if (i + 1 < target_tokens.size()) {
            input.push_back(target_tokens[i]);
            ++pos;
        }
    }
    return scored_injection(model, input, layer, position, delta, scores);
}

double sequence_logprob(const Model& model, const Tokens& tokens, const Tokens& target_tokens) {
    if (target_tokens.empty()) throw config_error("empty target sequence");
    Tokens input = tokens;
    for (std::size_t i = 0; i + 1 < target_tokens.size(); ++i) input.push_back(target_tokens[i]);
    ForwardCache fc = run_forward(model, input, -1, -1, nullptr);
    double lp = 0.0;
    int pos = static_cast<int>(tokens.size()) - 1;
    for (std::size_t i = 0; i < target_tokens.size(); ++i, ++pos) {
        Vec p = softmax_row(fc.logits.row(pos));
        lp += std::log(p(target_tokens[i]));
    }
    return lp;
}

Vec key_at(const Model& model, const Tokens& tokens, int layer, int position) {
    if (layer < 0 || layer >= model.cfg.n_layers)
        throw config_error("key_at: layer out of range");
    if (position < 0 || position >= static_cast<int>(tokens.size()))
        throw config_error("key_at: position out of range");
    ForwardCache fc = run_forward(model, tokens, -1, -1, nullptr);
    return fc.layers[layer].ffn_key.row(position).transpose();
}

Vec hidden_at(const Model& model, const Tokens& tokens, int layer, int position) {
    if (layer < 0 || layer >= model.cfg.n_layers)
        throw config_error("hidden_at: layer out of range");
    if (position < 0 || position >= static_cast<int>(tokens.size()))
        throw config_error("hidden_at: position out of range");
    ForwardCache fc = run_forward(model, tokens, -1, -1, nullptr);
    return fc.layers[layer].h.row(position).transpose();
}

Model apply_delta(const Model& model, int layer, const Mat& delta_w) {
    if (!model.cfg.is_critical(layer))
        throw config_error("apply_delta refused: layer " + std::to_string(layer) +
                           " is not a critical layer");
    if (delta_w.rows() != model.cfg.d_model || delta_w.cols() != model.cfg.d_ffn)
        throw config_error("apply_delta: delta shaped " + std::to_string(delta_w.rows()) + "x" +
                           std::to_string(delta_w.cols()) + ", expected d_model x d_ffn");
    if (!delta_w.allFinite()) throw numeric_error("apply_delta: non-finite delta");
    Model out = model;
    out.layers[layer].w_ffn_out += delta_w;
    return out;
}

namespace {

void put_tensor(ByteWriter& w, std::vector<std::pair<std::string, const Mat*>>& table,
                const std::string& name, const Mat& m) {
    table.emplace_back(name, &m);
    w.str(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
    const ModelConfig& cfg = model.cfg;
    ByteWriter w;
    w.raw(kModelMagic, sizeof(kModelMagic) - 1);
    w.u32(static_cast<std::uint32_t>(cfg.n_layers));
    w.u32(static_cast<std::uint32_t>(cfg.d_model));
    w.u32(static_cast<std::uint32_t>(cfg.d_ffn));
    w.u32(static_cast<std::uint32_t>(cfg.n_heads));
    w.u32(static_cast<std::uint32_t>(cfg.vocab_size));
    w.u32(static_cast<std::uint32_t>(cfg.max_seq));
    w.u32(static_cast<std::uint32_t>(cfg.activation));
    w.u32(static_cast<std::uint32_t>(cfg.critical_layers.size()));
    for (int l : cfg.critical_layers) w.u32(static_cast<std::uint32_t>(l));
    w.u64(cfg.seed);

    std::vector<Mat> vec_as_mat;  // keep gamma vectors alive as column matrices
    vec_as_mat.reserve(cfg.n_layers + 1);
    std::vector<std::pair<std::string, const Mat*>> table;
    ByteWriter tw;
    auto add_vec = [&](const std::string& name, const Vec& v) {
        vec_as_mat.emplace_back(v);
        put_tensor(tw, table, name, vec_as_mat.back());
    };
    put_tensor(tw, table, "embedding", model.embedding);
    put_tensor(tw, table, "pos_embedding", model.pos_embedding);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        const LayerWeights& lw = model.layers[l];
        add_vec(p + "ln_gamma", lw.ln_gamma);
        put_tensor(tw, table, p + "w_q", lw.w_q);
        put_tensor(tw, table, p + "w_k", lw.w_k);
        put_tensor(tw, table, p + "w_v", lw.w_v);
        put_tensor(tw, table, p + "w_attn_out", lw.w_attn_out);
        put_tensor(tw, table, p + "w_ffn_in", lw.w_ffn_in);
        put_tensor(tw, table, p + "w_ffn_out", lw.w_ffn_out);
    }
    add_vec("final_ln_gamma", model.final_ln_gamma);

    w.u32(static_cast<std::uint32_t>(table.size()));
    w.raw(tw.bytes.data(), tw.bytes.size());
    for (auto& [name, m] : table)
        for (Eigen::Index i = 0; i < m->rows(); ++i)
            for (Eigen::Index j = 0; j < m->cols(); ++j) w.f64((*m)(i, j));
    return std::move(w.bytes);
}

Model deserialize_model(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    char magic[sizeof(kModelMagic) - 1];
    r.raw(magic, sizeof(magic));
    if (std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
        throw protocol_error("model checkpoint: bad magic (expected FLEKE-TOYLM-1)");

    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(r.u32());
    cfg.d_model = static_cast<int>(r.u32());
    cfg.d_ffn = static_cast<int>(r.u32());
    cfg.n_heads = static_cast<int>(r.u32());
    cfg.vocab_size = static_cast<int>(r.u32());
    cfg.max_seq = static_cast<int>(r.u32());
    const std::uint32_t act = r.u32();
    if (act > 1) throw protocol_error("model checkpoint: unknown activation id");
    cfg.activation = static_cast<Activation>(act);
    const std::uint32_t n_crit = r.u32();
    cfg.critical_layers.clear();
    for (std::uint32_t i = 0; i < n_crit; ++i)
        cfg.critical_layers.push_back(static_cast<int>(r.u32()));
    cfg.seed = r.u64();
    cfg.validate();

    const std::uint32_t n_tensors = r.u32();
    std::vector<std::pair<std::string, std::pair<int, int>>> table(n_tensors);
    for (auto& [name, shape] : table) {
        name = r.str();
        shape.first = static_cast<int>(r.u32());
        shape.second = static_cast<int>(r.u32());
    }

    Model m;
    m.cfg = cfg;
    m.layers.resize(cfg.n_layers);
    auto read_mat = [&](const std::pair<int, int>& shape) {
        Mat out(shape.first, shape.second);
        for (int i = 0; i < shape.first; ++i)
            for (int j = 0; j < shape.second; ++j) out(i, j) = r.f64();
        if (!out.allFinite()) throw protocol_error("model checkpoint: non-finite tensor");
        return out;
    };
    for (auto& [name, shape] : table) {
        Mat t = read_mat(shape);
        if (name == "embedding") {
            m.embedding = std::move(t);
        } else if (name == "pos_embedding") {
            m.pos_embedding = std::move(t);
        } else if (name == "final_ln_gamma") {
            m.final_ln_gamma = t.col(0);
        } else if (name.rfind("layer.", 0) == 0) {
            const std::size_t dot = name.find('.', 6);
            if (dot == std::string::npos) throw protocol_error("model checkpoint: bad tensor name");
            const int l = std::stoi(name.substr(6, dot - 6));
            if (l < 0 || l >= cfg.n_layers)
                throw protocol_error("model checkpoint: tensor layer out of range");
            const std::string field = name.substr(dot + 1);
            LayerWeights& lw = m.layers[l];
            if (field == "ln_gamma") lw.ln_gamma = t.col(0);
            else if (field == "w_q") lw.w_q = std::move(t);
            else if (field == "w_k") lw.w_k = std::move(t);
            else if (field == "w_v") lw.w_v = std::move(t);
            else if (field == "w_attn_out") lw.w_attn_out = std::move(t);
            else if (field == "w_ffn_in") lw.w_ffn_in = std::move(t);
            else if (field == "w_ffn_out") lw.w_ffn_out = std::move(t);
            else throw protocol_error("model checkpoint: unknown tensor " + name);
        } else {
            throw protocol_error("model checkpoint: unknown tensor " + name);
        }
    }

    auto expect = [&](const Mat& t, int rows, int cols, const char* what) {
        if (t.rows() != rows || t.cols() != cols)
            throw protocol_error(std::string("model checkpoint: bad shape for ") + what);
    };
    expect(m.embedding, cfg.vocab_size, cfg.d_model, "embedding");
    expect(m.pos_embedding, cfg.max_seq, cfg.d_model, "pos_embedding");
    if (m.final_ln_gamma.size() != cfg.d_model)
        throw protocol_error("model checkpoint: bad shape for final_ln_gamma");
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = m.layers[l];
        if (lw.ln_gamma.size() != cfg.d_model)
            throw protocol_error("model checkpoint: bad shape for ln_gamma");
        expect(lw.w_q, cfg.d_model, cfg.d_model, "w_q");
        expect(lw.w_k, cfg.d_model, cfg.d_model, "w_k");
        expect(lw.w_v, cfg.d_model, cfg.d_model, "w_v");
        expect(lw.w_attn_out, cfg.d_model, cfg.d_model, "w_attn_out");
        expect(lw.w_ffn_in, cfg.d_ffn, cfg.d_model, "w_ffn_in");
        expect(lw.w_ffn_out, cfg.d_model, cfg.d_ffn, "w_ffn_out");
    }
    return m;
}

void save_model(const Model& model, const std::string& path) {
    write_file_bytes(path, serialize_model(model));
}

Model load_model(const std::string& path) { return deserialize_model(read_file_bytes(path)); }

std::uint64_t model_fingerprint(const Model& model) {
    auto bytes = serialize_model(model);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace fleke
