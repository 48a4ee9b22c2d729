#pragma once

// Gated decoders. A selection mask M turns into two per-slot gates:
//   g1_i = M_i + (1 - M_i) eps1   scales slot keys and values
//   g2_i = M_i + (1 - M_i) eps2   enters the attention logits as log g2
// The MLP decoder instead fills inactive mixture logits with -C and
// renormalizes over the active slots.

#include "qasa/nn.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace qasa {

using ad::Matrix;
using ad::Var;

struct GateConfig {
    double epsilon1 = 1e-3;
    double epsilon2 = 1e-6;
    double neg_const = 1e4;
    bool use_g1 = true;  // off: g1 forced to 1
    bool use_g2 = true;  // off: g2 forced to 1 (log g2 = 0)

    void validate() const;
};

struct Gates {
    Eigen::VectorXd g1;
    Eigen::VectorXd g2;
};

Gates build_gates(const std::vector<std::uint8_t>& mask, const GateConfig& cfg);

struct AttentionOutput {
    Var output;   // N x d_v
    Var weights;  // N x K, rows sum to 1
};

/// softmax(Q (K . g1)^T * scale + log g2) (V . g1). Null gates means the
/// plain ungated attention.
AttentionOutput gated_cross_attention(const Var& queries, const Var& keys, const Var& values,
                                      const Gates* gates, double scale);

struct Reconstruction {
    Var y_hat;                 // N x d_y
    Matrix decoder_attention;  // N x K_max
};

struct TransformerDecoderConfig {
    int num_tokens = 64;
    int slot_dim = 64;
    int model_dim = 64;
    int output_dim = 64;
    int layers = 4;
    int heads = 4;
    int mlp_hidden = 128;
};

/// Non-autoregressive Transformer decoder over learned positional queries;
/// every cross-attention block is gated.
class GatedTransformerDecoder {
public:
    GatedTransformerDecoder() = default;
    GatedTransformerDecoder(const TransformerDecoderConfig& cfg, nn::Rng& rng);

    Reconstruction decode(const Var& slots, const Gates* gates) const;
    void collect(nn::ParamList& out, const std::string& prefix) const;
    const TransformerDecoderConfig& config() const { return cfg_; }

private:
    struct Layer {
        nn::LayerNorm norm_self;
        nn::Linear self_qkv;
        nn::Linear self_out;
        nn::LayerNorm norm_cross;
        nn::Linear cross_q;
        nn::Linear cross_k;
        nn::Linear cross_v;
        nn::Linear cross_out;
        nn::LayerNorm norm_mlp;
        nn::Mlp mlp;
    };

    Var multi_head(const Var& q, const Var& k, const Var& v, const Gates* gates, Matrix* mean_weights) const;

    TransformerDecoderConfig cfg_;
    Var queries_;
    nn::LayerNorm norm_slots_;
    nn::Linear slot_proj_;
    std::vector<Layer> layers_;
    nn::LayerNorm norm_out_;
    nn::Linear out_;
};

/// alpha = softmax over slots of (logits - (1 - M) C), with inactive rows
/// then set to exactly zero. Null mask gives the plain softmax.
Matrix masked_softmax(const Matrix& logits, const std::vector<std::uint8_t>* mask, double neg_const);

struct MixtureWeights {
    Matrix logits;  // K_max x N
    Matrix alpha;   // K_max x N, columns sum to one over active slots
};

struct MixtureOutput {
    Var y_hat;  // N x d_y
    MixtureWeights weights;
};

/// Combines per-slot predictions (row i*N + t holds [y_hat_{i,t}, logit_{i,t}])
/// into y_hat_t = sum_i alpha_{i,t} y_hat_{i,t}.
MixtureOutput slot_mixture(const Var& per_slot, int k_max, int num_tokens,
                           const std::vector<std::uint8_t>* mask, double neg_const);

struct MlpDecoderConfig {
    int num_tokens = 64;
    int slot_dim = 64;
    int hidden = 128;
    int output_dim = 64;
};

/// Spatial-broadcast MLP decoder with a gated mixture over slots.
class GatedMlpDecoder {
public:
    GatedMlpDecoder() = default;
    GatedMlpDecoder(const MlpDecoderConfig& cfg, nn::Rng& rng);

    /// Throws std::invalid_argument for an all-inactive mask.
    std::pair<Reconstruction, MixtureWeights> decode(const Var& slots, const std::vector<std::uint8_t>* mask,
                                                     double neg_const) const;
    void collect(nn::ParamList& out, const std::string& prefix) const;
    const MlpDecoderConfig& config() const { return cfg_; }

private:
    MlpDecoderConfig cfg_;
    Var pos_;  // N x hidden
    nn::Linear slot_in_;
    nn::Linear hidden1_;
    nn::Linear hidden2_;
    nn::Linear out_;
};

}  // namespace qasa
