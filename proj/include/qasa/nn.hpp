#pragma once

// Small building blocks on top of the autodiff core: parameter registry,
// linear / layer-norm / MLP / GRU layers, and the Adam optimizer.

#include "qasa/autodiff.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace qasa::nn {

using ad::Matrix;
using ad::Var;
using Rng = std::mt19937_64;

struct NamedParam {
    std::string name;
    Var var;
};

using ParamList = std::vector<NamedParam>;

Matrix xavier_uniform(ad::Index fan_in, ad::Index fan_out, Rng& rng);
Matrix normal_matrix(ad::Index rows, ad::Index cols, double stddev, Rng& rng);

struct Linear {
    Var weight;  // in x out
    Var bias;    // 1 x out

    Linear() = default;
    Linear(ad::Index in, ad::Index out, Rng& rng, bool with_bias = true);

    Var operator()(const Var& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
    ad::Index in_features() const { return weight.rows(); }
    ad::Index out_features() const { return weight.cols(); }
};

struct LayerNorm {
    Var gain;
    Var shift;

    LayerNorm() = default;
    explicit LayerNorm(ad::Index width);

    Var operator()(const Var& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

/// Two-layer perceptron with ReLU: in -> hidden -> out.
struct Mlp {
    Linear fc1;
    Linear fc2;

    Mlp() = default;
    Mlp(ad::Index in, ad::Index hidden, ad::Index out, Rng& rng);

    Var operator()(const Var& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

/// Rows of x are independent GRU inputs; rows of h their hidden states.
struct GruCell {
    Linear input_gates;   // in -> 3*hidden (reset, update, candidate)
    Linear hidden_gates;  // hidden -> 3*hidden

    GruCell() = default;
    GruCell(ad::Index in, ad::Index hidden, Rng& rng);

    Var operator()(const Var& x, const Var& h) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

/// Deep copy of parameter values into fresh leaves (no shared storage).
ParamList clone(const ParamList& params, bool trainable);

double global_grad_norm(const ParamList& params);
void clip_grad_norm(ParamList& params, double max_norm);
void zero_grad(ParamList& params);

struct AdamConfig {
    double learning_rate = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Linear warm-up to the peak rate followed by cosine decay to zero.
double warmup_cosine(double peak, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps);

class Adam {
public:
    Adam(ParamList params, AdamConfig cfg);

    void step(double learning_rate);
    std::int64_t steps_taken() const { return t_; }
    const ParamList& params() const { return params_; }

    // Moment buffers, exposed for checkpointing.
    std::vector<Matrix>& first_moments() { return m_; }
    std::vector<Matrix>& second_moments() { return v_; }
    void set_steps_taken(std::int64_t t) { t_ = t; }

private:
    ParamList params_;
    AdamConfig cfg_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    std::int64_t t_ = 0;
};

}  // namespace qasa::nn
