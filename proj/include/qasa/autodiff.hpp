#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D matrix; scalars are 1x1.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace qasa::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    /// Gradient buffer, zero-initialized on first touch.
    Matrix& grad_ref();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    Matrix& grad_ref() { return node_->grad_ref(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    double scalar() const { return node_->value(0, 0); }
    bool defined() const { return static_cast<bool>(node_); }
    void zero_grad() { node_->grad.resize(0, 0); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

Var constant(Matrix value);
Var parameter(Matrix value);

/// Creates an op node. `backward` receives the finished node and must push
/// gradients into those inputs that require them.
Var make_op(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Seeds d(out)/d(out) = 1 (out must be 1x1) and propagates to every leaf.
void backward(const Var& out);

Var detach(const Var& a);

// Linear algebra
Var matmul(const Var& a, const Var& b);     // a * b
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var matmul_tn(const Var& a, const Var& b);  // a^T * b

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);

// Broadcasting: row is 1 x cols, col is rows x 1.
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);
Var mul_col(const Var& a, const Var& col);

// Reductions and normalizations
Var sum(const Var& a);
Var mean(const Var& a);
Var softmax_rows(const Var& a);
/// (a + eps) / colsum(a + eps): weighted-mean normalization over rows.
Var normalize_cols(const Var& a, double eps);
/// Per-row standardization without affine parameters.
Var layer_norm_rows(const Var& a, double eps = 1e-5);
Var mse(const Var& a, const Var& target);

// Shape
Var slice_cols(const Var& a, Index start, Index count);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Index start, Index count);
/// out[i*P + t] = rows_a[i] + rows_b[t]; shape (A*B) x d.
Var broadcast_sum(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

}  // namespace qasa::ad
