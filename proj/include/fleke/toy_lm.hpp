#pragma once

#include <string>
#include <vector>

#include "fleke/common.hpp"

namespace fleke {

enum class Activation : std::uint32_t { gelu = 0, relu = 1 };

struct ModelConfig {
    int n_layers = 8;
    int d_model = 64;
    int d_ffn = 256;
    int n_heads = 4;
    int vocab_size = 256;
    int max_seq = 32;
    std::vector<int> critical_layers = {3, 4, 5};
    std::uint64_t seed = 0;
    Activation activation = Activation::gelu;

    void validate() const;
    bool is_critical(int layer) const;
    int first_critical() const { return critical_layers.front(); }
    int last_critical() const { return critical_layers.back(); }
    // Residual spread divisor: how many critical layers remain at or above `layer`.
    int layers_remaining(int layer) const;
};

struct LayerWeights {
    Vec ln_gamma;     // d_model
    Mat w_q, w_k, w_v, w_attn_out;  // d_model x d_model, y = W x convention
    Mat w_ffn_in;     // d_ffn x d_model
    Mat w_ffn_out;    // d_model x d_ffn (the editable matrix)
};

struct Model {
    ModelConfig cfg;
    Mat embedding;      // vocab x d_model, unembedding tied
    Mat pos_embedding;  // max_seq x d_model
    std::vector<LayerWeights> layers;
    Vec final_ln_gamma;  // d_model
};

// Per-position taps from one forward pass. Rows are positions.
struct Trace {
    Mat logits;              // seq x vocab
    Mat h_in;                // seq x d_model, token + position embedding
    std::vector<Mat> h;      // per layer: seq x d_model residual stream
    std::vector<Mat> attn;   // per layer: seq x d_model attention contribution
    std::vector<Mat> ffn;    // per layer: seq x d_model FFN contribution
    std::vector<Mat> key;    // per layer: seq x d_ffn FFN inner activation
};

Model init_model(const ModelConfig& cfg);

Trace forward(const Model& model, const Tokens& tokens);

// Next-token distribution after the full sequence (softmax of the last row).
Vec next_token_logits(const Model& model, const Tokens& tokens);

struct InjectionResult {
    double logprob = 0.0;
    Vec grad;  // d(logprob)/d(delta), d_model
};

// Log-probability of `target` as the next token after `tokens`, under a run
// where `delta` is added to the residual stream at (layer, position) before
// subsequent layers execute. grad is the exact reverse-mode derivative.
InjectionResult logprob_with_injection(const Model& model, const Tokens& tokens,
                                       TokenId target, int layer, int position,
                                       const Vec& delta);

// Summed autoregressive log-probability of `target_tokens` continuing
// `tokens`, with the same injection semantics. Single forward/backward pass.
InjectionResult sequence_logprob_with_injection(const Model& model, const Tokens& tokens,
                                                const Tokens& target_tokens, int layer,
                                                int position, const Vec& delta);

// Plain (no injection) continuation log-probability.
double sequence_logprob(const Model& model, const Tokens& tokens, const Tokens& target_tokens);

Vec key_at(const Model& model, const Tokens& tokens, int layer, int position);

// Hidden state h^layer at one position (post-layer residual stream).
Vec hidden_at(const Model& model, const Tokens& tokens, int layer, int position);

Model apply_delta(const Model& model, int layer, const Mat& delta_w);

std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(const std::vector<std::uint8_t>& bytes);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

// FNV-1a over the serialized bytes; cheap identity check for tests and reports.
std::uint64_t model_fingerprint(const Model& model);

}  // namespace fleke
