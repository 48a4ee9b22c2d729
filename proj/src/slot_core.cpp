#include "qasa/slot_core.hpp"

#include <cmath>
#include <stdexcept>

namespace qasa {

Matrix patchify(const std::vector<float>& image, int height, int width, int patch) {
    if (patch <= 0 || height % patch != 0 || width % patch != 0) {
        throw std::invalid_argument("image " + std::to_string(height) + "x" + std::to_string(width) +
                                    " is not divisible by patch size " + std::to_string(patch));
    }
    if (image.size() != static_cast<std::size_t>(height) * width * 3) {
        throw std::invalid_argument("patchify: image buffer has wrong size");
    }
    const int gh = height / patch;
    const int gw = width / patch;
    Matrix out(gh * gw, patch * patch * 3);
    for (int ty = 0; ty < gh; ++ty) {
        for (int tx = 0; tx < gw; ++tx) {
            const int row = ty * gw + tx;
            int col = 0;
            for (int py = 0; py < patch; ++py) {
                for (int px = 0; px < patch; ++px) {
                    const std::size_t base = (static_cast<std::size_t>(ty * patch + py) * width + tx * patch + px) * 3;
                    for (int c = 0; c < 3; ++c) out(row, col++) = image[base + c];
                }
            }
        }
    }
    return out;
}

PatchEncoder::PatchEncoder(int patch_size, int hidden, int out_dim, nn::Rng& rng)
    : patch_(patch_size), embed_(patch_size * patch_size * 3, hidden, rng), proj_(hidden, out_dim, rng) {}

TokenGrid PatchEncoder::encode(const std::vector<float>& image, int height, int width) const {
    return encode_patches(patchify(image, height, width, patch_), height / patch_, width / patch_);
}

TokenGrid PatchEncoder::encode_patches(const Matrix& patches, int grid_h, int grid_w) const {
    if (patches.rows() != static_cast<ad::Index>(grid_h) * grid_w || patches.cols() != embed_.in_features()) {
        throw std::invalid_argument("encode_patches: dimension mismatch");
    }
    TokenGrid g;
    g.features = proj_(ad::relu(embed_(ad::constant(patches))));
    g.grid_h = grid_h;
    g.grid_w = grid_w;
    g.patch_size = patch_;
    return g;
}

void PatchEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
    embed_.collect(out, prefix + ".embed");
    proj_.collect(out, prefix + ".proj");
}

SlotInitializer::SlotInitializer(int slot_dim, nn::Rng& rng)
    : mean(ad::parameter(nn::xavier_uniform(1, slot_dim, rng))),
      log_sigma(ad::parameter(Matrix::Zero(1, slot_dim))) {}

Matrix SlotInitializer::draw_noise(int k_max, nn::Rng& rng) const {
    return nn::normal_matrix(k_max, mean.cols(), 1.0, rng);
}

Var SlotInitializer::sample(const Matrix& noise) const {
    return ad::add_row(ad::mul_row(ad::constant(noise), ad::exp(log_sigma)), mean);
}

void SlotInitializer::collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".mean", mean});
    out.push_back({prefix + ".log_sigma", log_sigma});
}

SlotAttention::SlotAttention(int input_dim, int slot_dim, int mlp_hidden, nn::Rng& rng)
    : slot_dim_(slot_dim),
      norm_inputs_(input_dim),
      norm_slots_(slot_dim),
      norm_mlp_(slot_dim),
      to_q_(slot_dim, slot_dim, rng, false),
      to_k_(input_dim, slot_dim, rng, false),
      to_v_(input_dim, slot_dim, rng, false),
      gru_(slot_dim, slot_dim, rng),
      mlp_(slot_dim, mlp_hidden, slot_dim, rng) {}

SlotAttentionResult SlotAttention::operator()(const Var& inputs, const Var& slots_init, int iters) const {
    if (iters < 1) throw std::invalid_argument("slot attention needs at least one iteration");
    if (slots_init.cols() != slot_dim_) throw std::invalid_argument("slot width mismatch");

    Var x = norm_inputs_(inputs);
    Var keys = to_k_(x);
    Var values = to_v_(x);
    const double scale = 1.0 / std::sqrt(static_cast<double>(slot_dim_));

    SlotAttentionResult r;
    Var slots = slots_init;
    for (int it = 0; it < iters; ++it) {
        Var prev = slots;
        Var q = to_q_(norm_slots_(slots));
        Var logits = ad::scale(ad::matmul_nt(keys, q), scale);  // N x K
        Var attn = ad::softmax_rows(logits);
        if (!attn.value().allFinite()) {
            throw std::runtime_error("slot attention: non-finite attention at iteration " + std::to_string(it));
        }
        Var weights = ad::normalize_cols(attn, kUpdateEpsilon);
        Var updates = ad::matmul_tn(weights, values);  // K x d_u
        slots = gru_(updates, prev);
        slots = slots + mlp_(norm_mlp_(slots));
        r.iteration_maps.push_back(attn.value());
        r.attention = attn;
    }
    if (!slots.value().allFinite()) throw std::runtime_error("slot attention: non-finite slots");
    r.slots = slots;
    return r;
}

void SlotAttention::collect(nn::ParamList& out, const std::string& prefix) const {
    norm_inputs_.collect(out, prefix + ".norm_inputs");
    norm_slots_.collect(out, prefix + ".norm_slots");
    norm_mlp_.collect(out, prefix + ".norm_mlp");
    to_q_.collect(out, prefix + ".to_q");
    to_k_.collect(out, prefix + ".to_k");
    to_v_.collect(out, prefix + ".to_v");
    gru_.collect(out, prefix + ".gru");
    mlp_.collect(out, prefix + ".mlp");
}

}  // namespace qasa
