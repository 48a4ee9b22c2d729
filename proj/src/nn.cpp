#include "qasa/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace qasa::nn {

Matrix xavier_uniform(ad::Index fan_in, ad::Index fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(fan_in, fan_out);
    for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

Matrix normal_matrix(ad::Index rows, ad::Index cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

Linear::Linear(ad::Index in, ad::Index out, Rng& rng, bool with_bias)
    : weight(ad::parameter(xavier_uniform(in, out, rng))) {
    if (with_bias) bias = ad::parameter(Matrix::Zero(1, out));
}

Var Linear::operator()(const Var& x) const {
    Var y = ad::matmul(x, weight);
    return bias.defined() ? ad::add_row(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(ad::Index width)
    : gain(ad::parameter(Matrix::Ones(1, width))), shift(ad::parameter(Matrix::Zero(1, width))) {}

Var LayerNorm::operator()(const Var& x) const {
    return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), gain), shift);
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".shift", shift});
}

Mlp::Mlp(ad::Index in, ad::Index hidden, ad::Index out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

Var Mlp::operator()(const Var& x) const {
    return fc2(ad::relu(fc1(x)));
}

void Mlp::collect(ParamList& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
}

GruCell::GruCell(ad::Index in, ad::Index hidden, Rng& rng)
    : input_gates(in, 3 * hidden, rng), hidden_gates(hidden, 3 * hidden, rng) {}

Var GruCell::operator()(const Var& x, const Var& h) const {
    const ad::Index d = h.cols();
    Var gi = input_gates(x);
    Var gh = hidden_gates(h);
    Var reset = ad::sigmoid(ad::slice_cols(gi, 0, d) + ad::slice_cols(gh, 0, d));
    Var update = ad::sigmoid(ad::slice_cols(gi, d, d) + ad::slice_cols(gh, d, d));
    Var candidate = ad::tanh(ad::slice_cols(gi, 2 * d, d) + ad::mul(reset, ad::slice_cols(gh, 2 * d, d)));
    // h' = (1 - z) * n + z * h = n + z * (h - n)
    return candidate + ad::mul(update, h - candidate);
}

void GruCell::collect(ParamList& out, const std::string& prefix) const {
    input_gates.collect(out, prefix + ".input");
    hidden_gates.collect(out, prefix + ".hidden");
}

ParamList clone(const ParamList& params, bool trainable) {
    ParamList out;
    out.reserve(params.size());
    for (const auto& p : params) {
        out.push_back({p.name, trainable ? ad::parameter(p.var.value()) : ad::constant(p.var.value())});
    }
    return out;
}

double global_grad_norm(const ParamList& params) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (p.var.grad().size() > 0) sq += p.var.grad().squaredNorm();
    }
    return std::sqrt(sq);
}

void clip_grad_norm(ParamList& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& p : params) {
            if (p.var.grad().size() > 0) p.var.grad_ref() *= s;
        }
    }
}

void zero_grad(ParamList& params) {
    for (auto& p : params) p.var.zero_grad();
}

double warmup_cosine(double peak, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (warmup_steps > 0 && step < warmup_steps) {
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const std::int64_t decay = std::max<std::int64_t>(1, total_steps - warmup_steps);
    const double progress =
        std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay));
    return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
        v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    }
}

void Adam::step(double learning_rate) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].var;
        if (p.grad().size() == 0) continue;
        const Matrix& g = p.grad();
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
        p.mutable_value().array() -=
            learning_rate * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.epsilon);
    }
}

}  // namespace qasa::nn
