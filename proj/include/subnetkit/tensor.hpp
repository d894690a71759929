#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "subnetkit/common.hpp"

namespace subnetkit {

// Dense row-major tensor with eager reverse-mode autodiff, templated on the
// storage scalar. The pipeline runs float storage (checkpoints are f32);
// gradient-oracle tests instantiate double. Reductions (mean, softmax and
// layer-norm statistics) accumulate in 64-bit regardless of storage scalar.
//
// Tensors are cheap shared handles onto graph nodes. A completed tensor is
// treated as an immutable value; only optimizer steps mutate leaf storage,
// between graph builds.

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class Scalar>
class Tensor {
public:
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<MatrixRM>;
    using CMapM = Eigen::Map<const MatrixRM>;

    struct Node {
        std::vector<long> shape;
        Array value;
        Array grad;  // empty until first accumulation
        bool requires_grad = false;
        std::vector<Tensor> parents;
        std::function<void(Node&)> backward_fn;
        const char* op = "leaf";

        long numel() const { return value.size(); }
        void ensure_grad() {
            if (grad.size() != value.size()) grad = Array::Zero(value.size());
        }
    };

    Tensor() = default;

    static Tensor zeros(std::vector<long> shape) { return filled(std::move(shape), Scalar(0)); }

    static Tensor filled(std::vector<long> shape, Scalar v) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = Array::Constant(count(t.node_->shape), v);
        return t;
    }

    static Tensor from_array(std::vector<long> shape, Array data) {
        if (count(shape) != data.size())
            throw DimensionError(cat("tensor: shape ", shape_str(shape), " does not match data length ", data.size()));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor from_values(std::vector<long> shape, const std::vector<double>& vals) {
        Array a(static_cast<long>(vals.size()));
        for (long i = 0; i < a.size(); ++i) a[i] = static_cast<Scalar>(vals[static_cast<size_t>(i)]);
        return from_array(std::move(shape), std::move(a));
    }

    static Tensor scalar(double v) { return from_values({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const std::vector<long>& shape() const { return node_->shape; }
    long rank() const { return static_cast<long>(node_->shape.size()); }
    long numel() const { return node_->value.size(); }
    long dim(long i) const { return node_->shape[static_cast<size_t>(i)]; }

    const Array& value() const { return node_->value; }
    Array& mutable_value() { return node_->value; }
    Scalar operator[](long i) const { return node_->value[i]; }

    double item() const {
        if (numel() != 1) throw ContractError(cat("item() on tensor of ", numel(), " elements"));
        return static_cast<double>(node_->value[0]);
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    // Gradient read; zero until a backward pass reaches this tensor.
    Array grad() const {
        if (node_->grad.size() == node_->value.size()) return node_->grad;
        return Array::Zero(node_->value.size());
    }

    void zero_grad() {
        if (node_->grad.size() > 0) node_->grad.setZero();
    }

    // Fresh leaf sharing nothing with this graph.
    Tensor detach() const { return from_array(node_->shape, node_->value); }

    const char* op() const { return node_->op; }
    Node* node() const { return node_.get(); }

    // Reverse-mode sweep from a scalar output. Visits each node exactly once
    // in reverse topological order. By default gradients reachable from this
    // output are reset first; pass reset=false to accumulate across calls.
    void backward(bool reset = true) const {
        if (numel() != 1) throw ContractError(cat("backward() requires a scalar output, got shape ", shape_str(shape())));
        std::vector<Node*> topo = topo_order(node_.get());
        // Interior gradients are transient per sweep; only leaf gradients
        // persist for accumulation when reset is off.
        for (Node* n : topo) {
            bool is_leaf = n->parents.empty();
            if ((reset || !is_leaf) && n->grad.size() > 0) n->grad.setZero();
        }
        node_->ensure_grad();
        node_->grad[0] += Scalar(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn && n->requires_grad) {
                n->ensure_grad();
                n->backward_fn(*n);
            }
        }
    }

    static long count(const std::vector<long>& shape) {
        long c = 1;
        for (long d : shape) {
            if (d <= 0) throw DimensionError(cat("tensor: nonpositive dimension in ", shape_str(shape)));
            c *= d;
        }
        return c;
    }

    static Tensor make_op(const char* op, std::vector<long> shape, Array value, std::vector<Tensor> parents,
                          std::function<void(Node&)> bw) {
        Tensor t = from_array(std::move(shape), std::move(value));
        t.node_->op = op;
        bool track = grad_enabled();
        bool any = false;
        for (const Tensor& p : parents) any = any || p.requires_grad();
        if (track && any) {
            t.node_->requires_grad = true;
            t.node_->parents = std::move(parents);
            t.node_->backward_fn = std::move(bw);
        }
        return t;
    }

    static void accumulate(const Tensor& dst, const Array& g) {
        if (!dst.requires_grad()) return;
        dst.node_->ensure_grad();
        dst.node_->grad += g;
    }

private:
    std::shared_ptr<Node> node_;

    static std::vector<Node*> topo_order(Node* root) {
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        // Iterative post-order DFS; parents first in `order`.
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(root, 0);
        seen.insert(root);
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx].node();
                ++idx;
                if (p && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }
};

namespace detail {

template <class Scalar>
void check_same_shape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.shape() != b.shape())
        throw DimensionError(cat(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
}

inline long last_dim(const std::vector<long>& s) { return s.empty() ? 1 : s.back(); }

inline long lead_rows(const std::vector<long>& s) {
    long r = 1;
    for (size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
    return r;
}

}  // namespace detail

enum class Broadcast { Auto, Same, One, Last, Lead };

namespace detail {

template <class Scalar>
Broadcast resolve_broadcast(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b, Broadcast req) {
    auto fits_same = [&] { return a.shape() == b.shape(); };
    auto fits_one = [&] { return b.numel() == 1; };
    auto fits_last = [&] { return b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back(); };
    auto fits_lead = [&] { return b.rank() == 1 && a.rank() >= 2 && b.dim(0) == a.dim(0); };
    switch (req) {
        case Broadcast::Same:
            if (fits_same()) return req;
            break;
        case Broadcast::One:
            if (fits_one()) return req;
            break;
        case Broadcast::Last:
            if (fits_last()) return req;
            break;
        case Broadcast::Lead:
            if (fits_lead()) return req;
            break;
        case Broadcast::Auto:
            if (fits_same()) return Broadcast::Same;
            if (fits_one()) return Broadcast::One;
            if (fits_last()) return Broadcast::Last;
            if (fits_lead()) return Broadcast::Lead;
            break;
    }
    throw DimensionError(cat(op, ": incompatible shapes ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
}

// Expand b onto a's index space under the given mode.
template <class Scalar>
typename Tensor<Scalar>::Array broadcast_values(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Broadcast mode) {
    using Array = typename Tensor<Scalar>::Array;
    const Array& bv = b.value();
    switch (mode) {
        case Broadcast::Same:
            return bv;
        case Broadcast::One:
            return Array::Constant(a.numel(), bv[0]);
        case Broadcast::Last: {
            Array out(a.numel());
            long cols = a.shape().back();
            long rows = a.numel() / cols;
            for (long r = 0; r < rows; ++r) out.segment(r * cols, cols) = bv;
            return out;
        }
        case Broadcast::Lead: {
            Array out(a.numel());
            long lead = a.dim(0);
            long block = a.numel() / lead;
            for (long r = 0; r < lead; ++r) out.segment(r * block, block).setConstant(bv[r]);
            return out;
        }
        default:
            throw ContractError("broadcast_values: unresolved mode");
    }
}

// Reduce a gradient on a's index space back to b's under the given mode.
template <class Scalar>
typename Tensor<Scalar>::Array reduce_to(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                                         const typename Tensor<Scalar>::Array& g, Broadcast mode) {
    using Array = typename Tensor<Scalar>::Array;
    switch (mode) {
        case Broadcast::Same:
            return g;
        case Broadcast::One: {
            double s = g.template cast<double>().sum();
            Array out(1);
            out[0] = static_cast<Scalar>(s);
            return out;
        }
        case Broadcast::Last: {
            long cols = a.shape().back();
            long rows = a.numel() / cols;
            Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(cols);
            for (long r = 0; r < rows; ++r) acc += g.segment(r * cols, cols).template cast<double>();
            return acc.cast<Scalar>();
        }
        case Broadcast::Lead: {
            long lead = a.dim(0);
            long block = a.numel() / lead;
            Array out(lead);
            for (long r = 0; r < lead; ++r)
                out[r] = static_cast<Scalar>(g.segment(r * block, block).template cast<double>().sum());
            return out;
        }
        default:
            throw ContractError("reduce_to: unresolved mode");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Broadcast mode = Broadcast::Auto) {
    using T = Tensor<Scalar>;
    Broadcast m = detail::resolve_broadcast("add", a, b, mode);
    typename T::Array out = a.value() + detail::broadcast_values(a, b, m);
    return T::make_op("add", a.shape(), std::move(out), {a, b}, [a, b, m](typename T::Node& self) {
        T::accumulate(a, self.grad);
        if (b.requires_grad()) T::accumulate(b, detail::reduce_to(a, b, self.grad, m));
    });
}

template <class Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Broadcast mode = Broadcast::Auto) {
    using T = Tensor<Scalar>;
    Broadcast m = detail::resolve_broadcast("sub", a, b, mode);
    typename T::Array out = a.value() - detail::broadcast_values(a, b, m);
    return T::make_op("sub", a.shape(), std::move(out), {a, b}, [a, b, m](typename T::Node& self) {
        T::accumulate(a, self.grad);
        if (b.requires_grad()) T::accumulate(b, detail::reduce_to(a, b, -self.grad, m));
    });
}

template <class Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Broadcast mode = Broadcast::Auto) {
    using T = Tensor<Scalar>;
    Broadcast m = detail::resolve_broadcast("mul", a, b, mode);
    typename T::Array bb = detail::broadcast_values(a, b, m);
    typename T::Array out = a.value() * bb;
    return T::make_op("mul", a.shape(), std::move(out), {a, b}, [a, b, m, bb](typename T::Node& self) {
        if (a.requires_grad()) T::accumulate(a, typename T::Array(self.grad * bb));
        if (b.requires_grad())
            T::accumulate(b, detail::reduce_to(a, b, typename T::Array(self.grad * a.value()), m));
    });
}

template <class Scalar>
Tensor<Scalar> scalar_mul(const Tensor<Scalar>& a, double c) {
    using T = Tensor<Scalar>;
    typename T::Array out = a.value() * static_cast<Scalar>(c);
    return T::make_op("scalar-mul", a.shape(), std::move(out), {a}, [a, c](typename T::Node& self) {
        T::accumulate(a, typename T::Array(self.grad * static_cast<Scalar>(c)));
    });
}

// ---------------------------------------------------------------------------
// Matrix product. Supports [.., m, k] x [k, n], and batched [B, m, k] x [B, k, n];
// transpose_b interprets the second operand as transposed on its last two dims.

template <class Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b = false) {
    using T = Tensor<Scalar>;
    using MatrixRM = typename T::MatrixRM;
    using CMapM = typename T::CMapM;
    if (a.rank() < 2 || b.rank() < 2)
        throw DimensionError(cat("matmul: operands must have rank >= 2, got ", shape_str(a.shape()), " and ",
                                 shape_str(b.shape())));

    const long k_a = a.shape().back();

    if (b.rank() == 2) {
        const long b0 = b.dim(0), b1 = b.dim(1);
        const long k_b = transpose_b ? b1 : b0;
        const long n = transpose_b ? b0 : b1;
        if (k_a != k_b)
            throw DimensionError(cat("matmul: inner dimensions differ, ", shape_str(a.shape()), " vs ",
                                     shape_str(b.shape()), transpose_b ? " (transposed)" : ""));
        const long rows = a.numel() / k_a;
        CMapM A(a.value().data(), rows, k_a);
        CMapM B(b.value().data(), b0, b1);
        MatrixRM C = transpose_b ? MatrixRM(A * B.transpose()) : MatrixRM(A * B);
        std::vector<long> out_shape(a.shape().begin(), a.shape().end() - 1);
        out_shape.push_back(n);
        typename T::Array out = Eigen::Map<const typename T::Array>(C.data(), C.size());
        return T::make_op("matmul", std::move(out_shape), std::move(out), {a, b},
                          [a, b, transpose_b, rows, k_a, n, b0, b1](typename T::Node& self) {
                              CMapM A(a.value().data(), rows, k_a);
                              CMapM B(b.value().data(), b0, b1);
                              CMapM G(self.grad.data(), rows, n);
                              if (a.requires_grad()) {
                                  MatrixRM dA = transpose_b ? MatrixRM(G * B) : MatrixRM(G * B.transpose());
                                  T::accumulate(a, Eigen::Map<const typename T::Array>(dA.data(), dA.size()));
                              }
                              if (b.requires_grad()) {
                                  MatrixRM dB = transpose_b ? MatrixRM(G.transpose() * A) : MatrixRM(A.transpose() * G);
                                  T::accumulate(b, Eigen::Map<const typename T::Array>(dB.data(), dB.size()));
                              }
                          });
    }

    if (a.rank() == 3 && b.rank() == 3) {
        const long batch = a.dim(0), m = a.dim(1);
        const long bb = b.dim(0), b1 = b.dim(1), b2 = b.dim(2);
        const long k_b = transpose_b ? b2 : b1;
        const long n = transpose_b ? b1 : b2;
        if (batch != bb || k_a != k_b)
            throw DimensionError(cat("matmul: batched shapes incompatible, ", shape_str(a.shape()), " vs ",
                                     shape_str(b.shape()), transpose_b ? " (transposed)" : ""));
        typename T::Array out(batch * m * n);
        for (long i = 0; i < batch; ++i) {
            CMapM A(a.value().data() + i * m * k_a, m, k_a);
            CMapM B(b.value().data() + i * b1 * b2, b1, b2);
            typename T::MapM C(out.data() + i * m * n, m, n);
            if (transpose_b)
                C.noalias() = A * B.transpose();
            else
                C.noalias() = A * B;
        }
        return T::make_op("matmul", {batch, m, n}, std::move(out), {a, b},
                          [a, b, transpose_b, batch, m, n, k_a, b1, b2](typename T::Node& self) {
                              for (long i = 0; i < batch; ++i) {
                                  CMapM A(a.value().data() + i * m * k_a, m, k_a);
                                  CMapM B(b.value().data() + i * b1 * b2, b1, b2);
                                  CMapM G(self.grad.data() + i * m * n, m, n);
                                  if (a.requires_grad()) {
                                      MatrixRM dA = transpose_b ? MatrixRM(G * B) : MatrixRM(G * B.transpose());
                                      a.node()->ensure_grad();
                                      Eigen::Map<typename T::Array>(a.node()->grad.data() + i * m * k_a, m * k_a) +=
                                          Eigen::Map<const typename T::Array>(dA.data(), dA.size());
                                  }
                                  if (b.requires_grad()) {
                                      MatrixRM dB =
                                          transpose_b ? MatrixRM(G.transpose() * A) : MatrixRM(A.transpose() * G);
                                      b.node()->ensure_grad();
                                      Eigen::Map<typename T::Array>(b.node()->grad.data() + i * b1 * b2, b1 * b2) +=
                                          Eigen::Map<const typename T::Array>(dB.data(), dB.size());
                                  }
                              }
                          });
    }

    throw DimensionError(cat("matmul: unsupported ranks ", shape_str(a.shape()), " x ", shape_str(b.shape())));
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <class Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
    using T = Tensor<Scalar>;
    typename T::Array out(a.numel());
    for (long i = 0; i < a.numel(); ++i) {
        double x = static_cast<double>(a.value()[i]);
        double y = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        out[i] = static_cast<Scalar>(y);
    }
    return T::make_op("sigmoid", a.shape(), std::move(out), {a}, [a](typename T::Node& self) {
        typename T::Array d = self.value * (Scalar(1) - self.value) * self.grad;
        T::accumulate(a, d);
    });
}

// tanh-approximation GeLU; constants from the standard approximation.
template <class Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
    using T = Tensor<Scalar>;
    constexpr double c0 = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c1 = 0.044715;
    typename T::Array out(a.numel());
    for (long i = 0; i < a.numel(); ++i) {
        double x = static_cast<double>(a.value()[i]);
        out[i] = static_cast<Scalar>(0.5 * x * (1.0 + std::tanh(c0 * (x + c1 * x * x * x))));
    }
    return T::make_op("gelu", a.shape(), std::move(out), {a}, [a](typename T::Node& self) {
        typename T::Array d(self.grad.size());
        for (long i = 0; i < self.grad.size(); ++i) {
            double x = static_cast<double>(a.value()[i]);
            double u = c0 * (x + c1 * x * x * x);
            double t = std::tanh(u);
            double du = c0 * (1.0 + 3.0 * c1 * x * x);
            double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            d[i] = static_cast<Scalar>(dy * static_cast<double>(self.grad[i]));
        }
        T::accumulate(a, d);
    });
}

template <class Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
    using T = Tensor<Scalar>;
    typename T::Array out = a.value().log();
    return T::make_op("log", a.shape(), std::move(out), {a}, [a](typename T::Node& self) {
        T::accumulate(a, typename T::Array(self.grad / a.value()));
    });
}

template <class Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
    using T = Tensor<Scalar>;
    typename T::Array out = a.value().exp();
    return T::make_op("exp", a.shape(), std::move(out), {a}, [a](typename T::Node& self) {
        T::accumulate(a, typename T::Array(self.grad * self.value));
    });
}

// Zero subgradient outside and at exact boundary points.
template <class Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& a, double lo, double hi) {
    using T = Tensor<Scalar>;
    if (lo > hi) throw ArgumentError(cat("clamp: lo ", num_str(lo), " > hi ", num_str(hi)));
    typename T::Array out = a.value().max(static_cast<Scalar>(lo)).min(static_cast<Scalar>(hi));
    return T::make_op("clamp", a.shape(), std::move(out), {a}, [a, lo, hi](typename T::Node& self) {
        typename T::Array d(self.grad.size());
        for (long i = 0; i < self.grad.size(); ++i) {
            double x = static_cast<double>(a.value()[i]);
            d[i] = (x > lo && x < hi) ? self.grad[i] : Scalar(0);
        }
        T::accumulate(a, d);
    });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations (64-bit accumulation)

template <class Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
    using T = Tensor<Scalar>;
    double s = a.value().template cast<double>().sum();
    typename T::Array out(1);
    out[0] = static_cast<Scalar>(s / static_cast<double>(a.numel()));
    return T::make_op("mean", {1}, std::move(out), {a}, [a](typename T::Node& self) {
        Scalar g = static_cast<Scalar>(static_cast<double>(self.grad[0]) / static_cast<double>(a.numel()));
        typename T::Array full(a.numel());
        full.setConstant(g);
        T::accumulate(a, full);
    });
}

template <class Scalar>
Tensor<Scalar> softmax_lastdim(const Tensor<Scalar>& a) {
    using T = Tensor<Scalar>;
    const long cols = detail::last_dim(a.shape());
    const long rows = a.numel() / cols;
    typename T::Array out(a.numel());
    for (long r = 0; r < rows; ++r) {
        const Scalar* x = a.value().data() + r * cols;
        double mx = static_cast<double>(x[0]);
        for (long j = 1; j < cols; ++j) mx = std::max(mx, static_cast<double>(x[j]));
        double denom = 0;
        for (long j = 0; j < cols; ++j) denom += std::exp(static_cast<double>(x[j]) - mx);
        for (long j = 0; j < cols; ++j)
            out[r * cols + j] = static_cast<Scalar>(std::exp(static_cast<double>(x[j]) - mx) / denom);
    }
    return T::make_op("softmax-lastdim", a.shape(), std::move(out), {a}, [a, rows, cols](typename T::Node& self) {
        typename T::Array d(self.grad.size());
        for (long r = 0; r < rows; ++r) {
            double dot = 0;
            for (long j = 0; j < cols; ++j)
                dot += static_cast<double>(self.grad[r * cols + j]) * static_cast<double>(self.value[r * cols + j]);
            for (long j = 0; j < cols; ++j) {
                double y = static_cast<double>(self.value[r * cols + j]);
                d[r * cols + j] = static_cast<Scalar>(y * (static_cast<double>(self.grad[r * cols + j]) - dot));
            }
        }
        T::accumulate(a, d);
    });
}

template <class Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          double eps = 1e-5) {
    using T = Tensor<Scalar>;
    const long cols = detail::last_dim(x.shape());
    const long rows = x.numel() / cols;
    if (gamma.rank() != 1 || gamma.dim(0) != cols || beta.rank() != 1 || beta.dim(0) != cols)
        throw DimensionError(cat("layer-norm: parameter shapes ", shape_str(gamma.shape()), "/",
                                 shape_str(beta.shape()), " do not match feature dim ", cols));
    typename T::Array out(x.numel());
    Eigen::ArrayXd xhat(x.numel());
    Eigen::ArrayXd inv_std(rows);
    for (long r = 0; r < rows; ++r) {
        const Scalar* p = x.value().data() + r * cols;
        double mu = 0;
        for (long j = 0; j < cols; ++j) mu += static_cast<double>(p[j]);
        mu /= cols;
        double var = 0;
        for (long j = 0; j < cols; ++j) {
            double d = static_cast<double>(p[j]) - mu;
            var += d * d;
        }
        var /= cols;
        double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (long j = 0; j < cols; ++j) {
            double xh = (static_cast<double>(p[j]) - mu) * inv;
            xhat[r * cols + j] = xh;
            out[r * cols + j] =
                static_cast<Scalar>(xh * static_cast<double>(gamma.value()[j]) + static_cast<double>(beta.value()[j]));
        }
    }
    return T::make_op(
        "layer-norm", x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](typename T::Node& self) {
            Eigen::ArrayXd dgamma = Eigen::ArrayXd::Zero(cols);
            Eigen::ArrayXd dbeta = Eigen::ArrayXd::Zero(cols);
            typename T::Array dx(x.numel());
            for (long r = 0; r < rows; ++r) {
                double m1 = 0, m2 = 0;
                for (long j = 0; j < cols; ++j) {
                    double g = static_cast<double>(self.grad[r * cols + j]);
                    double dyh = g * static_cast<double>(gamma.value()[j]);
                    m1 += dyh;
                    m2 += dyh * xhat[r * cols + j];
                    dgamma[j] += g * xhat[r * cols + j];
                    dbeta[j] += g;
                }
                m1 /= cols;
                m2 /= cols;
                for (long j = 0; j < cols; ++j) {
                    double g = static_cast<double>(self.grad[r * cols + j]);
                    double dyh = g * static_cast<double>(gamma.value()[j]);
                    dx[r * cols + j] = static_cast<Scalar>((dyh - m1 - xhat[r * cols + j] * m2) * inv_std[r]);
                }
            }
            T::accumulate(x, dx);
            if (gamma.requires_grad()) T::accumulate(gamma, typename T::Array(dgamma.cast<Scalar>()));
            if (beta.requires_grad()) T::accumulate(beta, typename T::Array(dbeta.cast<Scalar>()));
        });
}

// ---------------------------------------------------------------------------
// Structure ops

// Gathers rows of `table` ([V, d]) by id; output shape is id_shape + [d].
template <class Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, std::vector<long> ids, std::vector<long> id_shape) {
    using T = Tensor<Scalar>;
    if (table.rank() != 2) throw DimensionError(cat("embedding-lookup: table must be rank 2, got ", shape_str(table.shape())));
    long expect = 1;
    for (long d : id_shape) expect *= d;
    if (expect != static_cast<long>(ids.size()))
        throw DimensionError(cat("embedding-lookup: id shape ", shape_str(id_shape), " does not match ", ids.size(), " ids"));
    const long V = table.dim(0), d = table.dim(1);
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || ids[i] >= V)
            throw ArgumentError(cat("embedding-lookup: id ", ids[i], " out of range [0,", V, ") at position ", i));
    typename T::Array out(static_cast<long>(ids.size()) * d);
    for (size_t i = 0; i < ids.size(); ++i)
        out.segment(static_cast<long>(i) * d, d) = table.value().segment(ids[i] * d, d);
    std::vector<long> out_shape = std::move(id_shape);
    out_shape.push_back(d);
    auto ids_shared = std::make_shared<std::vector<long>>(std::move(ids));
    return T::make_op("embedding-lookup", std::move(out_shape), std::move(out), {table},
                      [table, ids_shared, d](typename T::Node& self) {
                          table.node()->ensure_grad();
                          auto& tg = table.node()->grad;
                          for (size_t i = 0; i < ids_shared->size(); ++i)
                              tg.segment((*ids_shared)[i] * d, d) += self.grad.segment(static_cast<long>(i) * d, d);
                      });
}

namespace detail {

inline void axis_extents(const std::vector<long>& shape, long axis, long& outer, long& alen, long& inner) {
    if (axis < 0 || axis >= static_cast<long>(shape.size()))
        throw ArgumentError(cat("axis ", axis, " out of range for shape ", shape_str(shape)));
    outer = 1;
    inner = 1;
    for (long i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    alen = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

template <class Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, long axis) {
    using T = Tensor<Scalar>;
    if (parts.empty()) throw ArgumentError("concat: no inputs");
    const auto& s0 = parts[0].shape();
    long total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank())
            throw DimensionError(cat("concat: rank mismatch ", shape_str(p.shape()), " vs ", shape_str(s0)));
        for (long i = 0; i < p.rank(); ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw DimensionError(cat("concat: shape mismatch on axis ", i, ": ", shape_str(p.shape()), " vs ",
                                         shape_str(s0)));
        long o, a, in;
        detail::axis_extents(p.shape(), axis, o, a, in);
        total_axis += a;
    }
    std::vector<long> out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = total_axis;
    long outer, alen_out, inner;
    detail::axis_extents(out_shape, axis, outer, alen_out, inner);
    typename T::Array out(outer * alen_out * inner);
    long offset = 0;
    for (const auto& p : parts) {
        long o, a, in;
        detail::axis_extents(p.shape(), axis, o, a, in);
        for (long r = 0; r < outer; ++r)
            out.segment((r * alen_out + offset) * inner, a * inner) = p.value().segment(r * a * inner, a * inner);
        offset += a;
    }
    std::vector<Tensor<Scalar>> parents = parts;
    return T::make_op("concat", std::move(out_shape), std::move(out), std::move(parents),
                      [parts, axis, outer, alen_out, inner](typename T::Node& self) {
                          long offset = 0;
                          for (const auto& p : parts) {
                              long o, a, in;
                              detail::axis_extents(p.shape(), axis, o, a, in);
                              if (p.requires_grad()) {
                                  p.node()->ensure_grad();
                                  for (long r = 0; r < outer; ++r)
                                      p.node()->grad.segment(r * a * inner, a * inner) +=
                                          self.grad.segment((r * alen_out + offset) * inner, a * inner);
                              }
                              offset += a;
                          }
                      });
}

template <class Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, long axis, long start, long len) {
    using T = Tensor<Scalar>;
    long outer, alen, inner;
    detail::axis_extents(a.shape(), axis, outer, alen, inner);
    if (start < 0 || len <= 0 || start + len > alen)
        throw ArgumentError(cat("slice: range [", start, ",", start + len, ") out of bounds for axis length ", alen));
    std::vector<long> out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    typename T::Array out(outer * len * inner);
    for (long r = 0; r < outer; ++r)
        out.segment(r * len * inner, len * inner) = a.value().segment((r * alen + start) * inner, len * inner);
    return T::make_op("slice", std::move(out_shape), std::move(out), {a},
                      [a, outer, alen, inner, start, len](typename T::Node& self) {
                          a.node()->ensure_grad();
                          for (long r = 0; r < outer; ++r)
                              a.node()->grad.segment((r * alen + start) * inner, len * inner) +=
                                  self.grad.segment(r * len * inner, len * inner);
                      });
}

template <class Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, std::vector<long> new_shape) {
    using T = Tensor<Scalar>;
    if (T::count(new_shape) != a.numel())
        throw DimensionError(cat("reshape: ", shape_str(a.shape()), " to ", shape_str(new_shape), " changes element count"));
    typename T::Array out = a.value();
    return T::make_op("reshape", std::move(new_shape), std::move(out), {a},
                      [a](typename T::Node& self) { T::accumulate(a, self.grad); });
}

// ---------------------------------------------------------------------------
// Adam

template <class Scalar>
struct AdamState {
    using Array = typename Tensor<Scalar>::Array;
    Array m;
    Array v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr = 1e-3;

    static AdamState fresh(long numel, double lr_, double beta1_ = 0.9, double beta2_ = 0.999, double eps_ = 1e-8) {
        AdamState s;
        s.m = Array::Zero(numel);
        s.v = Array::Zero(numel);
        s.lr = lr_;
        s.beta1 = beta1_;
        s.beta2 = beta2_;
        s.eps = eps_;
        return s;
    }
};

// Bias-corrected Adam update, elementwise in double, stored back in Scalar.
template <class Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params, std::vector<AdamState<Scalar>>& states,
               const std::vector<std::string>* names = nullptr) {
    if (params.size() != states.size())
        throw ArgumentError(cat("adam_step: ", params.size(), " params vs ", states.size(), " states"));
    for (size_t i = 0; i < params.size(); ++i) {
        auto g = params[i].grad();
        for (long j = 0; j < g.size(); ++j)
            if (!std::isfinite(static_cast<double>(g[j]))) {
                std::string name = names ? (*names)[i] : cat("param[", i, "]");
                throw NumericError(cat("adam_step: non-finite gradient in '", name, "' at element ", j));
            }
        AdamState<Scalar>& st = states[i];
        if (st.m.size() != params[i].numel())
            throw ArgumentError(cat("adam_step: state/param size mismatch at index ", i));
        st.step += 1;
        const double b1 = st.beta1, b2 = st.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
        auto& value = params[i].mutable_value();
        for (long j = 0; j < g.size(); ++j) {
            double gj = static_cast<double>(g[j]);
            double mj = b1 * static_cast<double>(st.m[j]) + (1.0 - b1) * gj;
            double vj = b2 * static_cast<double>(st.v[j]) + (1.0 - b2) * gj * gj;
            st.m[j] = static_cast<Scalar>(mj);
            st.v[j] = static_cast<Scalar>(vj);
            double update = st.lr * (mj / bc1) / (std::sqrt(vj / bc2) + st.eps);
            value[j] = static_cast<Scalar>(static_cast<double>(value[j]) - update);
        }
    }
}

}  // namespace subnetkit
