#include "qasa/decoders.hpp"

#include <cmath>
#include <stdexcept>

namespace qasa {

void GateConfig::validate() const {
    if (!(epsilon1 > 0.0 && epsilon1 < 1.0)) throw std::invalid_argument("epsilon1 must lie in (0,1)");
    if (!(epsilon2 > 0.0 && epsilon2 < 1.0)) throw std::invalid_argument("epsilon2 must lie in (0,1)");
    if (!(neg_const > 0.0)) throw std::invalid_argument("neg_const must be positive");
}

Gates build_gates(const std::vector<std::uint8_t>& mask, const GateConfig& cfg) {
    const auto k = static_cast<Eigen::Index>(mask.size());
    Gates g{Eigen::VectorXd::Ones(k), Eigen::VectorXd::Ones(k)};
    for (Eigen::Index i = 0; i < k; ++i) {
        const double m = mask[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        if (cfg.use_g1) g.g1(i) = m + (1.0 - m) * cfg.epsilon1;
        if (cfg.use_g2) g.g2(i) = m + (1.0 - m) * cfg.epsilon2;
    }
    return g;
}

AttentionOutput gated_cross_attention(const Var& queries, const Var& keys, const Var& values,
                                      const Gates* gates, double scale) {
    if (queries.cols() != keys.cols() || keys.rows() != values.rows()) {
        throw std::invalid_argument("gated_cross_attention: shape mismatch");
    }
    Var k = keys;
    Var v = values;
    Var logits;
    if (gates) {
        if (gates->g1.size() != keys.rows() || gates->g2.size() != keys.rows()) {
            throw std::invalid_argument("gated_cross_attention: gate length != slot count");
        }
        Var g1 = ad::constant(gates->g1);
        k = ad::mul_col(k, g1);
        v = ad::mul_col(v, g1);
        logits = ad::scale(ad::matmul_nt(queries, k), scale);
        logits = ad::add_row(logits, ad::constant(gates->g2.array().log().matrix().transpose()));
    } else {
        logits = ad::scale(ad::matmul_nt(queries, k), scale);
    }
    if (!logits.value().allFinite()) throw std::runtime_error("gated_cross_attention: non-finite logits");
    Var w = ad::softmax_rows(logits);
    return {ad::matmul(w, v), w};
}

GatedTransformerDecoder::GatedTransformerDecoder(const TransformerDecoderConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
    if (cfg.model_dim % cfg.heads != 0) throw std::invalid_argument("model_dim must be divisible by heads");
    queries_ = ad::parameter(nn::normal_matrix(cfg.num_tokens, cfg.model_dim, 0.02, rng));
    norm_slots_ = nn::LayerNorm(cfg.slot_dim);
    slot_proj_ = nn::Linear(cfg.slot_dim, cfg.model_dim, rng);
    for (int l = 0; l < cfg.layers; ++l) {
        Layer layer;
        layer.norm_self = nn::LayerNorm(cfg.model_dim);
        layer.self_qkv = nn::Linear(cfg.model_dim, 3 * cfg.model_dim, rng);
        layer.self_out = nn::Linear(cfg.model_dim, cfg.model_dim, rng);
        layer.norm_cross = nn::LayerNorm(cfg.model_dim);
        layer.cross_q = nn::Linear(cfg.model_dim, cfg.model_dim, rng);
        layer.cross_k = nn::Linear(cfg.model_dim, cfg.model_dim, rng);
        layer.cross_v = nn::Linear(cfg.model_dim, cfg.model_dim, rng);
        layer.cross_out = nn::Linear(cfg.model_dim, cfg.model_dim, rng);
        layer.norm_mlp = nn::LayerNorm(cfg.model_dim);
        layer.mlp = nn::Mlp(cfg.model_dim, cfg.mlp_hidden, cfg.model_dim, rng);
        layers_.push_back(std::move(layer));
    }
    norm_out_ = nn::LayerNorm(cfg.model_dim);
    out_ = nn::Linear(cfg.model_dim, cfg.output_dim, rng);
}

Var GatedTransformerDecoder::multi_head(const Var& q, const Var& k, const Var& v, const Gates* gates,
                                        Matrix* mean_weights) const {
    const int dh = cfg_.model_dim / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg_.heads));
    for (int h = 0; h < cfg_.heads; ++h) {
        auto out = gated_cross_attention(ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh),
                                         ad::slice_cols(v, h * dh, dh), gates, scale);
        if (mean_weights) {
            if (h == 0) *mean_weights = Matrix::Zero(out.weights.rows(), out.weights.cols());
            *mean_weights += out.weights.value() / cfg_.heads;
        }
        heads.push_back(out.output);
    }
    return heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
}

Reconstruction GatedTransformerDecoder::decode(const Var& slots, const Gates* gates) const {
    if (slots.cols() != cfg_.slot_dim) throw std::invalid_argument("transformer decoder: slot width mismatch");
    const int d = cfg_.model_dim;
    Var memory = slot_proj_(norm_slots_(slots));
    Var x = queries_;
    Reconstruction r;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& layer = layers_[l];
        Var qkv = layer.self_qkv(layer.norm_self(x));
        Var self = multi_head(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, d), ad::slice_cols(qkv, 2 * d, d),
                              nullptr, nullptr);
        x = x + layer.self_out(self);

        Var cq = layer.cross_q(layer.norm_cross(x));
        Var ck = layer.cross_k(memory);
        Var cv = layer.cross_v(memory);
        const bool last = l + 1 == layers_.size();
        Var cross = multi_head(cq, ck, cv, gates, last ? &r.decoder_attention : nullptr);
        x = x + layer.cross_out(cross);

        x = x + layer.mlp(layer.norm_mlp(x));
    }
    r.y_hat = out_(norm_out_(x));
    return r;
}

void GatedTransformerDecoder::collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".queries", queries_});
    norm_slots_.collect(out, prefix + ".norm_slots");
    slot_proj_.collect(out, prefix + ".slot_proj");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string p = prefix + ".layer" + std::to_string(l);
        const Layer& layer = layers_[l];
        layer.norm_self.collect(out, p + ".norm_self");
        layer.self_qkv.collect(out, p + ".self_qkv");
        layer.self_out.collect(out, p + ".self_out");
        layer.norm_cross.collect(out, p + ".norm_cross");
        layer.cross_q.collect(out, p + ".cross_q");
        layer.cross_k.collect(out, p + ".cross_k");
        layer.cross_v.collect(out, p + ".cross_v");
        layer.cross_out.collect(out, p + ".cross_out");
        layer.norm_mlp.collect(out, p + ".norm_mlp");
        layer.mlp.collect(out, p + ".mlp");
    }
    norm_out_.collect(out, prefix + ".norm_out");
    out_.collect(out, prefix + ".out");
}

Matrix masked_softmax(const Matrix& logits, const std::vector<std::uint8_t>* mask, double neg_const) {
    const auto k = logits.rows();
    if (mask && static_cast<Eigen::Index>(mask->size()) != k) throw std::invalid_argument("mask length != slot count");
    Matrix filled = logits;
    if (mask) {
        for (Eigen::Index i = 0; i < k; ++i) {
            if (!(*mask)[static_cast<std::size_t>(i)]) filled.row(i).array() -= neg_const;
        }
    }
    Matrix alpha(k, logits.cols());
    for (Eigen::Index t = 0; t < logits.cols(); ++t) {
        const double m = filled.col(t).maxCoeff();
        alpha.col(t) = (filled.col(t).array() - m).exp().matrix();
        alpha.col(t) /= alpha.col(t).sum();
    }
    if (mask) {
        for (Eigen::Index i = 0; i < k; ++i) {
            if (!(*mask)[static_cast<std::size_t>(i)]) alpha.row(i).setZero();
        }
    }
    return alpha;
}

MixtureOutput slot_mixture(const Var& per_slot, int k_max, int num_tokens, const std::vector<std::uint8_t>* mask,
                           double neg_const) {
    const Eigen::Index n = num_tokens;
    const Eigen::Index dy = per_slot.cols() - 1;
    if (per_slot.rows() != static_cast<Eigen::Index>(k_max) * n || dy < 1) {
        throw std::invalid_argument("slot_mixture: expected (K*N) x (d_y+1) input");
    }
    if (mask) {
        bool any = false;
        for (auto m : *mask) any = any || m;
        if (!any) throw std::invalid_argument("slot_mixture: selection mask has no active slot");
    }
    const Matrix& in = per_slot.value();
    MixtureOutput out;
    out.weights.logits.resize(k_max, n);
    for (int i = 0; i < k_max; ++i) out.weights.logits.row(i) = in.block(i * n, dy, n, 1).transpose();
    out.weights.alpha = masked_softmax(out.weights.logits, mask, neg_const);

    const Matrix alpha = out.weights.alpha;
    Matrix y = Matrix::Zero(n, dy);
    for (int i = 0; i < k_max; ++i) {
        y.array() += in.block(i * n, 0, n, dy).array().colwise() * alpha.row(i).transpose().array();
    }
    out.y_hat = ad::make_op(std::move(y), {per_slot}, [alpha, k_max, n, dy](ad::Node& node) {
        const Matrix& x = node.inputs[0]->value;
        Matrix& gx = node.inputs[0]->grad_ref();
        // d alpha_{i,t} = <g_t, y_{i,t}>
        Matrix dalpha(k_max, n);
        for (int i = 0; i < k_max; ++i) {
            dalpha.row(i) = node.grad.cwiseProduct(x.block(i * n, 0, n, dy)).rowwise().sum().transpose();
            gx.block(i * n, 0, n, dy).array() += node.grad.array().colwise() * alpha.row(i).transpose().array();
        }
        Eigen::RowVectorXd inner = alpha.cwiseProduct(dalpha).colwise().sum();
        Matrix dlogit = alpha.array() * (dalpha.rowwise() - inner).array();
        for (int i = 0; i < k_max; ++i) gx.block(i * n, dy, n, 1) += dlogit.row(i).transpose();
    });
    return out;
}

GatedMlpDecoder::GatedMlpDecoder(const MlpDecoderConfig& cfg, nn::Rng& rng)
    : cfg_(cfg),
      pos_(ad::parameter(nn::normal_matrix(cfg.num_tokens, cfg.hidden, 0.02, rng))),
      slot_in_(cfg.slot_dim, cfg.hidden, rng),
      hidden1_(cfg.hidden, cfg.hidden, rng),
      hidden2_(cfg.hidden, cfg.hidden, rng),
      out_(cfg.hidden, cfg.output_dim + 1, rng) {}

std::pair<Reconstruction, MixtureWeights> GatedMlpDecoder::decode(const Var& slots,
                                                                  const std::vector<std::uint8_t>* mask,
                                                                  double neg_const) const {
    if (slots.cols() != cfg_.slot_dim) throw std::invalid_argument("mlp decoder: slot width mismatch");
    const int k = static_cast<int>(slots.rows());
    Var z = ad::relu(ad::broadcast_sum(slot_in_(slots), pos_));
    z = ad::relu(hidden1_(z));
    z = ad::relu(hidden2_(z));
    Var per_slot = out_(z);
    MixtureOutput mix = slot_mixture(per_slot, k, cfg_.num_tokens, mask, neg_const);
    Reconstruction r;
    r.y_hat = mix.y_hat;
    r.decoder_attention = mix.weights.alpha.transpose();
    return {std::move(r), std::move(mix.weights)};
}

void GatedMlpDecoder::collect(nn::ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".pos", pos_});
    slot_in_.collect(out, prefix + ".slot_in");
    hidden1_.collect(out, prefix + ".hidden1");
    hidden2_.collect(out, prefix + ".hidden2");
    out_.collect(out, prefix + ".out");
}

}  // namespace qasa
