#include "qasa/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qasa {

std::string to_string(DecoderKind k) {
    return k == DecoderKind::Transformer ? "transformer" : "mlp";
}

std::string to_string(TargetMode m) {
    return m == TargetMode::FrozenFeatures ? "frozen-features" : "pixels";
}

std::string to_string(PositionEmbedding p) {
    return p == PositionEmbedding::Learned ? "learned" : "coords";
}

PositionEmbedding position_embedding_from_string(const std::string& s) {
    if (s == "learned") return PositionEmbedding::Learned;
    if (s == "coords") return PositionEmbedding::Coords;
    throw std::invalid_argument("position must be learned or coords, got '" + s + "'");
}

DecoderKind decoder_kind_from_string(const std::string& s) {
    if (s == "transformer") return DecoderKind::Transformer;
    if (s == "mlp") return DecoderKind::Mlp;
    throw std::invalid_argument("decoder must be transformer or mlp, got '" + s + "'");
}

TargetMode target_mode_from_string(const std::string& s) {
    if (s == "frozen-features") return TargetMode::FrozenFeatures;
    if (s == "pixels") return TargetMode::Pixels;
    throw std::invalid_argument("target_mode must be frozen-features or pixels, got '" + s + "'");
}

void ModelConfig::validate() const {
    if (patch_size <= 0 || image_size % patch_size != 0) {
        throw std::invalid_argument("image_size must be divisible by patch_size");
    }
    if (k_max < 2) throw std::invalid_argument("k_max must be at least 2");
    if (slot_iters < 1) throw std::invalid_argument("slot_iters must be at least 1");
    if (feature_dim < 1 || slot_dim < 1 || encoder_hidden < 1 || slot_mlp_hidden < 1) {
        throw std::invalid_argument("layer widths must be positive");
    }
    if (dec_heads < 1 || dec_dim % dec_heads != 0) throw std::invalid_argument("dec_dim must be divisible by dec_heads");
    if (dec_layers < 1) throw std::invalid_argument("dec_layers must be positive");
}

SlotModel::SlotModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    nn::Rng rng(init_seed);
    encoder_ = PatchEncoder(cfg.patch_size, cfg.encoder_hidden, cfg.feature_dim, rng);
    if (cfg.target_mode == TargetMode::FrozenFeatures) {
        nn::ParamList enc;
        encoder_.collect(enc, "encoder");
        frozen_ = nn::clone(enc, false);
        for (auto& p : frozen_) p.name = "target_" + p.name;
    }
    if (cfg.position == PositionEmbedding::Learned) {
        pos_ = ad::parameter(nn::normal_matrix(cfg.num_tokens(), cfg.feature_dim, 0.02, rng));
    } else {
        const int side = cfg.grid_side();
        coords_.resize(cfg.num_tokens(), 4);
        for (int r = 0; r < side; ++r) {
            for (int c = 0; c < side; ++c) {
                const double y = side > 1 ? static_cast<double>(r) / (side - 1) : 0.0;
                const double x = side > 1 ? static_cast<double>(c) / (side - 1) : 0.0;
                coords_.row(r * side + c) << x, y, 1.0 - x, 1.0 - y;
            }
        }
        nn::Linear proj(4, cfg.feature_dim, rng);
        pos_ = proj.weight;
        pos_bias_ = proj.bias;
    }
    norm_tokens_ = nn::LayerNorm(cfg.feature_dim);
    token_mlp_ = nn::Mlp(cfg.feature_dim, cfg.feature_dim, cfg.feature_dim, rng);
    init_ = SlotInitializer(cfg.slot_dim, rng);
    slot_attn_ = SlotAttention(cfg.feature_dim, cfg.slot_dim, cfg.slot_mlp_hidden, rng);
    if (cfg.decoder == DecoderKind::Transformer) {
        TransformerDecoderConfig dc;
        dc.num_tokens = cfg.num_tokens();
        dc.slot_dim = cfg.slot_dim;
        dc.model_dim = cfg.dec_dim;
        dc.output_dim = cfg.target_dim();
        dc.layers = cfg.dec_layers;
        dc.heads = cfg.dec_heads;
        dc.mlp_hidden = cfg.dec_hidden;
        transformer_.emplace(dc, rng);
    } else {
        MlpDecoderConfig dc;
        dc.num_tokens = cfg.num_tokens();
        dc.slot_dim = cfg.slot_dim;
        dc.hidden = cfg.dec_hidden;
        dc.output_dim = cfg.target_dim();
        mlp_.emplace(dc, rng);
    }
}

Matrix SlotModel::frozen_features(const Matrix& patches) const {
    // frozen_ mirrors PatchEncoder: embed.weight, embed.bias, proj.weight, proj.bias
    const Matrix& w1 = frozen_[0].var.value();
    const Matrix& b1 = frozen_[1].var.value();
    const Matrix& w2 = frozen_[2].var.value();
    const Matrix& b2 = frozen_[3].var.value();
    Matrix h = ((patches * w1).rowwise() + b1.row(0)).cwiseMax(0.0);
    return (h * w2).rowwise() + b2.row(0);
}

GroupingOutput SlotModel::group(const std::vector<float>& image, const Matrix& noise) const {
    const int side = cfg_.image_size;
    Matrix patches = patchify(image, side, side, cfg_.patch_size);
    GroupingOutput out;
    out.tokens = encoder_.encode_patches(patches, cfg_.grid_side(), cfg_.grid_side());
    out.target = cfg_.target_mode == TargetMode::Pixels ? patches : frozen_features(patches);

    Var pos = cfg_.position == PositionEmbedding::Learned ? pos_
                                                          : ad::add_row(ad::matmul(ad::constant(coords_), pos_), pos_bias_);
    Var x = token_mlp_(ad::add(norm_tokens_(out.tokens.features), pos));
    auto sa = slot_attn_(x, init_.sample(noise), cfg_.slot_iters);
    out.slots = sa.slots;
    out.attention = sa.attention;
    return out;
}

Reconstruction SlotModel::decode(const Var& slots, const DecodeGating& gating, MixtureWeights* mixture) const {
    if (gating.enabled && gating.mask.size() != static_cast<std::size_t>(cfg_.k_max)) {
        throw std::invalid_argument("selection mask length != k_max");
    }
    if (transformer_) {
        if (!gating.enabled) return transformer_->decode(slots, nullptr);
        Gates g = build_gates(gating.mask, gating.gate);
        return transformer_->decode(slots, &g);
    }
    auto [rec, weights] = mlp_->decode(slots, gating.enabled ? &gating.mask : nullptr, gating.gate.neg_const);
    if (mixture) *mixture = std::move(weights);
    return rec;
}

nn::ParamList SlotModel::parameters() const {
    nn::ParamList p;
    encoder_.collect(p, "encoder");
    p.push_back({"pos", pos_});
    if (cfg_.position == PositionEmbedding::Coords) p.push_back({"pos_bias", pos_bias_});
    norm_tokens_.collect(p, "norm_tokens");
    token_mlp_.collect(p, "token_mlp");
    init_.collect(p, "slot_init");
    slot_attn_.collect(p, "slot_attention");
    if (transformer_) transformer_->collect(p, "decoder");
    if (mlp_) mlp_->collect(p, "decoder");
    return p;
}

KvSection model_config_to_kv(const ModelConfig& c) {
    KvSection kv;
    kv.set("image_size", std::to_string(c.image_size));
    kv.set("patch_size", std::to_string(c.patch_size));
    kv.set("feature_dim", std::to_string(c.feature_dim));
    kv.set("slot_dim", std::to_string(c.slot_dim));
    kv.set("k_max", std::to_string(c.k_max));
    kv.set("slot_iters", std::to_string(c.slot_iters));
    kv.set("encoder_hidden", std::to_string(c.encoder_hidden));
    kv.set("slot_mlp_hidden", std::to_string(c.slot_mlp_hidden));
    kv.set("decoder", to_string(c.decoder));
    kv.set("dec_layers", std::to_string(c.dec_layers));
    kv.set("dec_heads", std::to_string(c.dec_heads));
    kv.set("dec_dim", std::to_string(c.dec_dim));
    kv.set("dec_hidden", std::to_string(c.dec_hidden));
    kv.set("target_mode", to_string(c.target_mode));
    kv.set("position", to_string(c.position));
    return kv;
}

ModelConfig model_config_from_kv(const KvSection& kv) {
    ModelConfig c;
    auto int_of = [&](const char* key, int& field) {
        if (auto v = kv.find(key)) field = static_cast<int>(parse_int(key, *v));
    };
    int_of("image_size", c.image_size);
    int_of("patch_size", c.patch_size);
    int_of("feature_dim", c.feature_dim);
    int_of("slot_dim", c.slot_dim);
    int_of("k_max", c.k_max);
    int_of("slot_iters", c.slot_iters);
    int_of("encoder_hidden", c.encoder_hidden);
    int_of("slot_mlp_hidden", c.slot_mlp_hidden);
    int_of("dec_layers", c.dec_layers);
    int_of("dec_heads", c.dec_heads);
    int_of("dec_dim", c.dec_dim);
    int_of("dec_hidden", c.dec_hidden);
    if (auto v = kv.find("decoder")) c.decoder = decoder_kind_from_string(*v);
    if (auto v = kv.find("target_mode")) c.target_mode = target_mode_from_string(*v);
    if (auto v = kv.find("position")) c.position = position_embedding_from_string(*v);
    return c;
}

// ---------------------------------------------------------------------------
// Checkpoint container:
//   QASA-CHECKPOINT 1\n
//   <key=value lines>\n
//   tensors=<count>\n
//   per tensor: "tensor <name> <rows> <cols>\n" + rows*cols float64 LE

namespace {
constexpr const char* kCheckpointMagic = "QASA-CHECKPOINT 1";
}

const Matrix* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) return &m;
    }
    return nullptr;
}

void Checkpoint::save(const std::string& path) const {
    std::string blob = std::string(kCheckpointMagic) + "\n";
    blob += format_kv(meta);
    blob += "tensors=" + std::to_string(tensors.size()) + "\n";
    for (const auto& [name, m] : tensors) {
        if (name.find_first_of(" \n") != std::string::npos) throw std::invalid_argument("bad tensor name '" + name + "'");
        blob += "tensor " + name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(m.data()[i]);
            for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
        }
    }
    write_text_file_atomic(path, blob);
}

Checkpoint Checkpoint::load(const std::string& path) {
    const std::string blob = read_text_file(path);
    std::size_t pos = 0;
    auto next_line = [&]() {
        auto end = blob.find('\n', pos);
        if (end == std::string::npos) throw std::runtime_error("truncated checkpoint '" + path + "'");
        std::string line = blob.substr(pos, end - pos);
        pos = end + 1;
        return line;
    };
    if (next_line() != kCheckpointMagic) throw std::runtime_error("not a checkpoint: '" + path + "'");
    Checkpoint ck;
    std::size_t count = 0;
    for (;;) {
        std::string line = next_line();
        if (line.rfind("tensors=", 0) == 0) {
            count = static_cast<std::size_t>(parse_int("tensors", line.substr(8)));
            break;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("bad checkpoint header line: " + line);
        ck.meta.entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    for (std::size_t t = 0; t < count; ++t) {
        std::istringstream hdr(next_line());
        std::string tag, name;
        Eigen::Index rows = 0, cols = 0;
        hdr >> tag >> name >> rows >> cols;
        if (tag != "tensor" || rows < 0 || cols < 0) throw std::runtime_error("bad tensor header in checkpoint");
        const std::size_t bytes = static_cast<std::size_t>(rows * cols) * 8;
        if (pos + bytes > blob.size()) throw std::runtime_error("truncated tensor '" + name + "'");
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) {
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[pos + static_cast<std::size_t>(i) * 8 + b])) << (8 * b);
            }
            m.data()[i] = std::bit_cast<double>(bits);
        }
        pos += bytes;
        ck.tensors.emplace_back(std::move(name), std::move(m));
    }
    return ck;
}

void store_parameters(Checkpoint& ckpt, const nn::ParamList& params, const std::string& prefix) {
    for (const auto& p : params) ckpt.tensors.emplace_back(prefix + p.name, p.var.value());
}

void restore_parameters(const Checkpoint& ckpt, nn::ParamList& params, const std::string& prefix) {
    for (auto& p : params) {
        const Matrix* m = ckpt.find(prefix + p.name);
        if (!m) throw std::runtime_error("checkpoint is missing tensor '" + prefix + p.name + "'");
        if (m->rows() != p.var.rows() || m->cols() != p.var.cols()) {
            throw std::runtime_error("checkpoint tensor '" + prefix + p.name + "' has the wrong shape");
        }
        p.var.mutable_value() = *m;
    }
}

}  // namespace qasa
