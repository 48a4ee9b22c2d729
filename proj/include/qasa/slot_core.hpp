#pragma once

// Patch encoder, learned-Gaussian slot initialization and iterative slot
// attention (softmax over slots, weighted-mean update, GRU + residual MLP).

#include "qasa/nn.hpp"

#include <vector>

namespace qasa {

using ad::Matrix;
using ad::Var;

struct TokenGrid {
    Var features;  // N x d_y
    int grid_h = 0;
    int grid_w = 0;
    int patch_size = 0;

    int num_tokens() const { return grid_h * grid_w; }
};

/// Flattens non-overlapping patch x patch RGB blocks into rows (N x p*p*3),
/// row-major over the token grid.
Matrix patchify(const std::vector<float>& image, int height, int width, int patch);

/// Patch-local convolutional encoder: a stride-p conv (as a linear map over
/// flattened patches) followed by a 1x1 conv.
class PatchEncoder {
public:
    PatchEncoder() = default;
    PatchEncoder(int patch_size, int hidden, int out_dim, nn::Rng& rng);

    TokenGrid encode(const std::vector<float>& image, int height, int width) const;
    TokenGrid encode_patches(const Matrix& patches, int grid_h, int grid_w) const;

    void collect(nn::ParamList& out, const std::string& prefix) const;
    int patch_size() const { return patch_; }
    int out_dim() const { return static_cast<int>(proj_.out_features()); }

private:
    int patch_ = 0;
    nn::Linear embed_;
    nn::Linear proj_;
};

/// Slots drawn as mean + exp(log_sigma) * noise, shared across slots.
struct SlotInitializer {
    Var mean;       // 1 x d_u
    Var log_sigma;  // 1 x d_u

    SlotInitializer() = default;
    SlotInitializer(int slot_dim, nn::Rng& rng);

    Matrix draw_noise(int k_max, nn::Rng& rng) const;
    Var sample(const Matrix& noise) const;
    Var sample(int k_max, nn::Rng& rng) const { return sample(draw_noise(k_max, rng)); }
    void collect(nn::ParamList& out, const std::string& prefix) const;
};

struct SlotAttentionResult {
    Var slots;                        // K_max x d_u
    Var attention;                    // N x K_max, final iteration, rows sum to 1
    std::vector<Matrix> iteration_maps;
};

class SlotAttention {
public:
    SlotAttention() = default;
    SlotAttention(int input_dim, int slot_dim, int mlp_hidden, nn::Rng& rng);

    /// Throws std::runtime_error on non-finite attention.
    SlotAttentionResult operator()(const Var& inputs, const Var& slots_init, int iters) const;

    void collect(nn::ParamList& out, const std::string& prefix) const;
    int slot_dim() const { return slot_dim_; }

    static constexpr double kUpdateEpsilon = 1e-8;

private:
    int slot_dim_ = 0;
    nn::LayerNorm norm_inputs_;
    nn::LayerNorm norm_slots_;
    nn::LayerNorm norm_mlp_;
    nn::Linear to_q_;
    nn::Linear to_k_;
    nn::Linear to_v_;
    nn::GruCell gru_;
    nn::Mlp mlp_;
};

}  // namespace qasa
