#pragma once

// Encoder -> slot attention -> gated decoder, plus checkpoint I/O.

#include "qasa/decoders.hpp"
#include "qasa/kv.hpp"
#include "qasa/scene.hpp"
#include "qasa/selection.hpp"
#include "qasa/slot_core.hpp"

#include <optional>
#include <string>

namespace qasa {

enum class DecoderKind { Transformer, Mlp };
enum class TargetMode { FrozenFeatures, Pixels };
/// learned: free per-token table; coords: linear map of (x, y, 1-x, 1-y).
enum class PositionEmbedding { Learned, Coords };

std::string to_string(DecoderKind k);
std::string to_string(TargetMode m);
std::string to_string(PositionEmbedding p);
DecoderKind decoder_kind_from_string(const std::string& s);
TargetMode target_mode_from_string(const std::string& s);
PositionEmbedding position_embedding_from_string(const std::string& s);

struct ModelConfig {
    int image_size = 64;
    int patch_size = 8;
    int feature_dim = 64;     // d_y
    int slot_dim = 64;        // d_u
    int k_max = 8;
    int slot_iters = 3;
    int encoder_hidden = 64;
    int slot_mlp_hidden = 128;
    DecoderKind decoder = DecoderKind::Transformer;
    int dec_layers = 4;
    int dec_heads = 4;
    int dec_dim = 64;
    int dec_hidden = 128;
    TargetMode target_mode = TargetMode::FrozenFeatures;
    PositionEmbedding position = PositionEmbedding::Learned;

    int grid_side() const { return image_size / patch_size; }
    int num_tokens() const { return grid_side() * grid_side(); }
    int target_dim() const { return target_mode == TargetMode::Pixels ? patch_size * patch_size * 3 : feature_dim; }
    void validate() const;
};

/// How the decoder sees the selection.
struct DecodeGating {
    bool enabled = false;  // false: ungated decoder, mask ignored
    std::vector<std::uint8_t> mask;
    GateConfig gate;
};

struct GroupingOutput {
    TokenGrid tokens;
    Var slots;
    Var attention;  // A^slot, N x K_max
    Matrix target;  // reconstruction target, N x target_dim
};

class SlotModel {
public:
    SlotModel() = default;
    SlotModel(const ModelConfig& cfg, std::uint64_t init_seed);

    /// Encoder + slot attention; `noise` is the K_max x d_u slot-init draw.
    GroupingOutput group(const std::vector<float>& image, const Matrix& noise) const;
    Reconstruction decode(const Var& slots, const DecodeGating& gating, MixtureWeights* mixture = nullptr) const;

    Matrix draw_slot_noise(nn::Rng& rng) const { return init_.draw_noise(cfg_.k_max, rng); }

    /// Trainable parameters, in a stable order.
    nn::ParamList parameters() const;
    /// Frozen target-encoder parameters (empty in pixel mode).
    const nn::ParamList& frozen_parameters() const { return frozen_; }

    const ModelConfig& config() const { return cfg_; }
    const PatchEncoder& encoder() const { return encoder_; }
    const SlotAttention& slot_attention() const { return slot_attn_; }
    const SlotInitializer& slot_init() const { return init_; }

private:
    Matrix frozen_features(const Matrix& patches) const;

    ModelConfig cfg_;
    PatchEncoder encoder_;
    nn::ParamList frozen_;
    Var pos_;  // learned table, or the 4 x d_y coordinate map
    Var pos_bias_;
    Matrix coords_;
    nn::LayerNorm norm_tokens_;
    nn::Mlp token_mlp_;
    SlotInitializer init_;
    SlotAttention slot_attn_;
    std::optional<GatedTransformerDecoder> transformer_;
    std::optional<GatedMlpDecoder> mlp_;
};

KvSection model_config_to_kv(const ModelConfig& cfg);
ModelConfig model_config_from_kv(const KvSection& kv);  // ignores unknown keys

/// Named tensors plus free-form metadata, stored as a text header followed
/// by raw little-endian float64 blocks.
struct Checkpoint {
    KvSection meta;
    std::vector<std::pair<std::string, Matrix>> tensors;

    const Matrix* find(const std::string& name) const;
    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

void store_parameters(Checkpoint& ckpt, const nn::ParamList& params, const std::string& prefix = "");
/// Copies values by name; throws if a parameter is missing or mis-shaped.
void restore_parameters(const Checkpoint& ckpt, nn::ParamList& params, const std::string& prefix = "");

}  // namespace qasa
