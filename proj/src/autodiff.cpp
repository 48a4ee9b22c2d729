#include "qasa/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace qasa::ad {

Matrix& Node::grad_ref() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
        grad = Matrix::Zero(value.rows(), value.cols());
    }
    return grad;
}

Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var parameter(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

Var make_op(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& in : inputs) {
        if (in.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        n->inputs.reserve(inputs.size());
        for (auto& in : inputs) n->inputs.push_back(in.node());
        n->backward_fn = std::move(backward);
    }
    return Var(std::move(n));
}

void backward(const Var& out) {
    if (out.rows() != 1 || out.cols() != 1) {
        throw std::invalid_argument("backward: output must be a 1x1 scalar");
    }
    if (!out.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(out.node().get(), 0);
    seen.insert(out.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    out.node()->grad_ref()(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() > 0) n->backward_fn(*n);
    }
    // Interior gradients are not needed after propagation.
    for (Node* n : order) {
        if (n->backward_fn) n->grad.resize(0, 0);
    }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                                    "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                    "x" + std::to_string(b.cols()) + ")");
    }
}

inline bool wants(const Node& n, std::size_t i) {
    return n.inputs[i]->requires_grad;
}

}  // namespace

Var detach(const Var& a) {
    return constant(a.value());
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix v = a.value() * b.value();
    return make_op(std::move(v), {a, b}, [](Node& n) {
        const Matrix& A = n.inputs[0]->value;
        const Matrix& B = n.inputs[1]->value;
        if (wants(n, 0)) n.inputs[0]->grad_ref().noalias() += n.grad * B.transpose();
        if (wants(n, 1)) n.inputs[1]->grad_ref().noalias() += A.transpose() * n.grad;
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    Matrix v = a.value() * b.value().transpose();
    return make_op(std::move(v), {a, b}, [](Node& n) {
        const Matrix& A = n.inputs[0]->value;
        const Matrix& B = n.inputs[1]->value;
        if (wants(n, 0)) n.inputs[0]->grad_ref().noalias() += n.grad * B;
        if (wants(n, 1)) n.inputs[1]->grad_ref().noalias() += n.grad.transpose() * A;
    });
}

Var matmul_tn(const Var& a, const Var& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: inner dimension mismatch");
    Matrix v = a.value().transpose() * b.value();
    return make_op(std::move(v), {a, b}, [](Node& n) {
        const Matrix& A = n.inputs[0]->value;
        const Matrix& B = n.inputs[1]->value;
        if (wants(n, 0)) n.inputs[0]->grad_ref().noalias() += B * n.grad.transpose();
        if (wants(n, 1)) n.inputs[1]->grad_ref().noalias() += A * n.grad;
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
        if (wants(n, 0)) n.inputs[0]->grad_ref() += n.grad;
        if (wants(n, 1)) n.inputs[1]->grad_ref() += n.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
        if (wants(n, 0)) n.inputs[0]->grad_ref() += n.grad;
        if (wants(n, 1)) n.inputs[1]->grad_ref() -= n.grad;
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
        if (wants(n, 0)) n.inputs[0]->grad_ref() += n.grad.cwiseProduct(n.inputs[1]->value);
        if (wants(n, 1)) n.inputs[1]->grad_ref() += n.grad.cwiseProduct(n.inputs[0]->value);
    });
}

Var scale(const Var& a, double s) {
    return make_op(a.value() * s, {a}, [s](Node& n) { n.inputs[0]->grad_ref() += n.grad * s; });
}

Var add_scalar(const Var& a, double c) {
    Matrix v = a.value().array() + c;
    return make_op(std::move(v), {a}, [](Node& n) { n.inputs[0]->grad_ref() += n.grad; });
}

Var relu(const Var& a) {
    Matrix v = a.value().cwiseMax(0.0);
    return make_op(std::move(v), {a}, [](Node& n) {
        n.inputs[0]->grad_ref().array() += (n.inputs[0]->value.array() > 0.0).cast<double>() * n.grad.array();
    });
}

Var sigmoid(const Var& a) {
    Matrix v = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    return make_op(std::move(v), {a}, [](Node& n) {
        n.inputs[0]->grad_ref().array() += n.grad.array() * n.value.array() * (1.0 - n.value.array());
    });
}

Var tanh(const Var& a) {
    Matrix v = a.value().array().tanh().matrix();
    return make_op(std::move(v), {a}, [](Node& n) {
        n.inputs[0]->grad_ref().array() += n.grad.array() * (1.0 - n.value.array().square());
    });
}

Var exp(const Var& a) {
    Matrix v = a.value().array().exp().matrix();
    return make_op(std::move(v), {a}, [](Node& n) {
        n.inputs[0]->grad_ref().array() += n.grad.array() * n.value.array();
    });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bad row shape");
    Matrix v = a.value().rowwise() + row.value().row(0);
    return make_op(std::move(v), {a, row}, [](Node& n) {
        if (wants(n, 0)) n.inputs[0]->grad_ref() += n.grad;
        if (wants(n, 1)) n.inputs[1]->grad_ref() += n.grad.colwise().sum();
    });
}

Var mul_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("mul_row: bad row shape");
    Matrix v = a.value().array().rowwise() * row.value().row(0).array();
    return make_op(std::move(v), {a, row}, [](Node& n) {
        const auto& r = n.inputs[1]->value;
        if (wants(n, 0)) n.inputs[0]->grad_ref().array() += n.grad.array().rowwise() * r.row(0).array();
        if (wants(n, 1)) {
            n.inputs[1]->grad_ref() += n.grad.cwiseProduct(n.inputs[0]->value).colwise().sum();
        }
    });
}

Var mul_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_col: bad column shape");
    Matrix v = a.value().array().colwise() * col.value().col(0).array();
    return make_op(std::move(v), {a, col}, [](Node& n) {
        const auto& c = n.inputs[1]->value;
        if (wants(n, 0)) n.inputs[0]->grad_ref().array() += n.grad.array().colwise() * c.col(0).array();
        if (wants(n, 1)) {
            n.inputs[1]->grad_ref() += n.grad.cwiseProduct(n.inputs[0]->value).rowwise().sum();
        }
    });
}

Var sum(const Var& a) {
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    return make_op(std::move(v), {a}, [](Node& n) { n.inputs[0]->grad_ref().array() += n.grad(0, 0); });
}

Var mean(const Var& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var softmax_rows(const Var& a) {
    Matrix v = a.value();
    for (Index r = 0; r < v.rows(); ++r) {
        double m = v.row(r).maxCoeff();
        v.row(r) = (v.row(r).array() - m).exp().matrix();
        v.row(r) /= v.row(r).sum();
    }
    return make_op(std::move(v), {a}, [](Node& n) {
        // dx = y * (g - <g, y>)
        Eigen::VectorXd dot = n.grad.cwiseProduct(n.value).rowwise().sum();
        n.inputs[0]->grad_ref().array() += n.value.array() * (n.grad.colwise() - dot).array();
    });
}

Var normalize_cols(const Var& a, double eps) {
    Matrix shifted = a.value().array() + eps;
    Eigen::RowVectorXd colsum = shifted.colwise().sum();
    Matrix v = shifted.array().rowwise() / colsum.array();
    return make_op(std::move(v), {a}, [colsum](Node& n) {
        // y = x / s, s = sum_rows x; dx = (g - <g, y>_col) / s
        Eigen::RowVectorXd dot = n.grad.cwiseProduct(n.value).colwise().sum();
        n.inputs[0]->grad_ref().array() +=
            (n.grad.rowwise() - dot).array().rowwise() / colsum.array();
    });
}

Var layer_norm_rows(const Var& a, double eps) {
    const Index d = a.cols();
    Matrix v(a.rows(), d);
    Eigen::VectorXd inv_std(a.rows());
    for (Index r = 0; r < a.rows(); ++r) {
        double mu = a.value().row(r).mean();
        auto centered = (a.value().row(r).array() - mu);
        double var = centered.square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        v.row(r) = (centered * inv_std(r)).matrix();
    }
    return make_op(std::move(v), {a}, [inv_std, d](Node& n) {
        // dx = inv_std * (g - mean(g) - y * mean(g * y))
        Matrix& gx = n.inputs[0]->grad_ref();
        for (Index r = 0; r < n.value.rows(); ++r) {
            double gm = n.grad.row(r).mean();
            double gym = n.grad.row(r).dot(n.value.row(r)) / static_cast<double>(d);
            gx.row(r).array() += inv_std(r) * (n.grad.row(r).array() - gm - n.value.row(r).array() * gym);
        }
    });
}

Var mse(const Var& a, const Var& target) {
    require_same_shape(a, target, "mse");
    const double count = static_cast<double>(a.value().size());
    Matrix v(1, 1);
    v(0, 0) = (a.value() - target.value()).squaredNorm() / count;
    return make_op(std::move(v), {a, target}, [count](Node& n) {
        Matrix diff = n.inputs[0]->value - n.inputs[1]->value;
        double g = n.grad(0, 0) * 2.0 / count;
        if (wants(n, 0)) n.inputs[0]->grad_ref() += g * diff;
        if (wants(n, 1)) n.inputs[1]->grad_ref() -= g * diff;
    });
}

Var slice_cols(const Var& a, Index start, Index count) {
    if (start < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
    Matrix v = a.value().middleCols(start, count);
    return make_op(std::move(v), {a}, [start, count](Node& n) {
        n.inputs[0]->grad_ref().middleCols(start, count) += n.grad;
    });
}

Var slice_rows(const Var& a, Index start, Index count) {
    if (start < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
    Matrix v = a.value().middleRows(start, count);
    return make_op(std::move(v), {a}, [start, count](Node& n) {
        n.inputs[0]->grad_ref().middleRows(start, count) += n.grad;
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const Index rows = parts.front().rows();
    Index total = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        total += p.cols();
    }
    Matrix v(rows, total);
    Index off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return make_op(std::move(v), parts, [](Node& n) {
        Index o = 0;
        for (auto& in : n.inputs) {
            const Index c = in->value.cols();
            if (in->requires_grad) in->grad_ref() += n.grad.middleCols(o, c);
            o += c;
        }
    });
}

Var broadcast_sum(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("broadcast_sum: width mismatch");
    const Index na = a.rows();
    const Index nb = b.rows();
    Matrix v(na * nb, a.cols());
    for (Index i = 0; i < na; ++i) {
        v.middleRows(i * nb, nb) = b.value().rowwise() + a.value().row(i);
    }
    return make_op(std::move(v), {a, b}, [na, nb](Node& n) {
        if (wants(n, 0)) {
            Matrix& ga = n.inputs[0]->grad_ref();
            for (Index i = 0; i < na; ++i) ga.row(i) += n.grad.middleRows(i * nb, nb).colwise().sum();
        }
        if (wants(n, 1)) {
            Matrix& gb = n.inputs[1]->grad_ref();
            for (Index i = 0; i < na; ++i) gb += n.grad.middleRows(i * nb, nb);
        }
    });
}

}  // namespace qasa::ad
