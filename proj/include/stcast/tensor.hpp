#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stcast/common.hpp"
#include "stcast/rng.hpp"

namespace stcast {

using EMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMatrix>;
using ECMap = Eigen::Map<const EMatrix>;

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}
}  // namespace detail

// Disables graph construction for the enclosing scope (eval paths).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor with reverse-mode autodiff. A Tensor is a handle to
// a shared node; ops record backward closures when grad mode is on and any
// input requires grad. Gradients accumulate (+=) into grad buffers; callers
// zero them explicitly between optimizer steps.
class Tensor {
public:
    struct Node {
        std::vector<int> shape;
        std::vector<Real> data;
        std::vector<Real> grad;  // same size as data iff requires_grad
        bool requires_grad = false;
        std::function<void()> backward_fn;
        std::vector<std::shared_ptr<Node>> parents;
    };

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data.assign(t.check_numel(), Real(0));
        return t;
    }

    static Tensor full(std::vector<int> shape, Real v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.n_->data.begin(), t.n_->data.end(), v);
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<Real> data) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        if (t.n_->data.size() != t.check_numel())
            throw ShapeError("tensor data length " + std::to_string(t.n_->data.size()) +
                             " does not match shape " + detail::shape_str(t.n_->shape));
        return t;
    }

    static Tensor scalar(Real v) { return from({1}, {v}); }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return n_->data.size(); }

    std::vector<Real>& data() { return n_->data; }
    const std::vector<Real>& data() const { return n_->data; }
    Real& operator[](std::size_t i) { return n_->data[i]; }
    Real operator[](std::size_t i) const { return n_->data[i]; }

    Real value() const {
        if (numel() != 1) throw ShapeError("value() requires a scalar tensor, got " + detail::shape_str(shape()));
        return n_->data[0];
    }

    bool requires_grad() const { return n_ && n_->requires_grad; }

    Tensor& set_requires_grad(bool flag = true) {
        n_->requires_grad = flag;
        if (flag)
            n_->grad.assign(n_->data.size(), Real(0));
        else
            n_->grad.clear();
        return *this;
    }

    std::vector<Real>& grad() { return n_->grad; }
    const std::vector<Real>& grad() const { return n_->grad; }

    void zero_grad() {
        if (n_->requires_grad) std::fill(n_->grad.begin(), n_->grad.end(), Real(0));
    }

    // Reverse pass from a scalar output. Seeds d(out)/d(out) = 1 and walks the
    // graph in reverse topological order.
    void backward() {
        if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got " + detail::shape_str(shape()));
        if (!n_->requires_grad) return;

        std::vector<Node*> topo;
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        visited.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next_child] = stack.back();
            if (next_child < node->parents.size()) {
                Node* child = node->parents[next_child++].get();
                if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }
        n_->grad[0] += Real(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn();
    }

    // Same data, fresh node with no history; used to pass activations across
    // a gradient boundary (e.g. head-only fine-tuning).
    Tensor detach() const {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = n_->shape;
        t.n_->data = n_->data;
        return t;
    }

    std::shared_ptr<Node> node() const { return n_; }

    // Internal: wires a result node into the graph. `backward` receives the
    // result node so closures can read its accumulated gradient.
    static Tensor make_op(std::vector<int> shape, std::vector<Real> data,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
        Tensor out = from(std::move(shape), std::move(data));
        bool track = detail::grad_mode() &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (track) {
            out.set_requires_grad(true);
            for (const Tensor& t : inputs) out.n_->parents.push_back(t.n_);
            Node* raw = out.n_.get();
            out.n_->backward_fn = [raw, fn = std::move(backward)]() { fn(*raw); };
        }
        return out;
    }

private:
    std::size_t check_numel() const {
        std::size_t n = 1;
        for (int d : n_->shape) {
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + detail::shape_str(n_->shape));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::shared_ptr<Node> n_;
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Rows/cols when a tensor of shape [..., k] is viewed as a 2-D matrix with
// the last axis as columns.
inline std::pair<int, int> as_2d(const Tensor& t) {
    int cols = t.dim(t.rank() - 1);
    int rows = static_cast<int>(t.numel()) / cols;
    return {rows, cols};
}

inline void accumulate(std::vector<Real>& grad, const std::vector<Real>& delta) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += delta[i];
}

// Numerically stabilized row softmax on a raw buffer.
inline void softmax_rows_inplace(Real* x, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        Real* row = x + static_cast<std::size_t>(r) * cols;
        Real mx = row[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        Real sum = 0;
        for (int c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (int c = 0; c < cols; ++c) row[c] /= sum;
    }
}

// dX for softmax: dx = a .* (dy - rowsum(dy .* a))
inline void softmax_backward_rows(const Real* a, const Real* dy, Real* dx, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const Real* ar = a + static_cast<std::size_t>(r) * cols;
        const Real* dyr = dy + static_cast<std::size_t>(r) * cols;
        Real* dxr = dx + static_cast<std::size_t>(r) * cols;
        Real dot = 0;
        for (int c = 0; c < cols; ++c) dot += ar[c] * dyr[c];
        for (int c = 0; c < cols; ++c) dxr[c] = ar[c] * (dyr[c] - dot);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor::make_op(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& o) {
        if (an->requires_grad) detail::accumulate(an->grad, o.grad);
        if (bn->requires_grad) detail::accumulate(bn->grad, o.grad);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor::make_op(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& o) {
        if (an->requires_grad) detail::accumulate(an->grad, o.grad);
        if (bn->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor::make_op(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& o) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->data[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->data[i];
    });
}

inline Tensor scale(const Tensor& a, Real s) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    auto an = a.node();
    return Tensor::make_op(a.shape(), std::move(out), {a}, [an, s](Tensor::Node& o) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * s;
    });
}

inline Tensor swish(const Tensor& a) {
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        Real s = Real(1) / (Real(1) + std::exp(-a[i]));
        out[i] = a[i] * s;
    }
    auto an = a.node();
    return Tensor::make_op(a.shape(), std::move(out), {a}, [an](Tensor::Node& o) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            Real s = Real(1) / (Real(1) + std::exp(-an->data[i]));
            an->grad[i] += o.grad[i] * s * (Real(1) + an->data[i] * (Real(1) - s));
        }
    });
}

inline Tensor sum(const Tensor& a) {
    Real total = std::accumulate(a.data().begin(), a.data().end(), Real(0));
    auto an = a.node();
    return Tensor::make_op({1}, {total}, {a}, [an](Tensor::Node& o) {
        if (!an->requires_grad) return;
        for (Real& g : an->grad) g += o.grad[0];
    });
}

// ---------------------------------------------------------------------------
// matmul: a[..., k] x b[k, n] -> [..., n]; leading axes of `a` are folded.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2)
        throw ShapeError("matmul: rhs must be 2-D, got " + detail::shape_str(b.shape()));
    auto [m, k] = detail::as_2d(a);
    if (k != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree, " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
    int n = b.dim(1);

    std::vector<Real> out(static_cast<std::size_t>(m) * n);
    ECMap A(a.data().data(), m, k);
    ECMap B(b.data().data(), k, n);
    EMap(out.data(), m, n).noalias() = A * B;

    std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);

    auto an = a.node();
    auto bn = b.node();
    return Tensor::make_op(std::move(out_shape), std::move(out), {a, b}, [an, bn, m, k, n](Tensor::Node& o) {
        ECMap dC(o.grad.data(), m, n);
        if (an->requires_grad) {
            ECMap B(bn->data.data(), k, n);
            EMap(an->grad.data(), m, k).noalias() += dC * B.transpose();
        }
        if (bn->requires_grad) {
            ECMap A(an->data.data(), m, k);
            EMap(bn->grad.data(), k, n).noalias() += A.transpose() * dC;
        }
    });
}

// ---------------------------------------------------------------------------
// broadcast adds

// x[..., n] + bias[n]
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    auto [rows, n] = detail::as_2d(x);
    if (bias.rank() != 1 || bias.dim(0) != n)
        throw ShapeError("add_bias: bias " + detail::shape_str(bias.shape()) + " does not match last dim of " +
                         detail::shape_str(x.shape()));
    std::vector<Real> out(x.numel());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < n; ++c) {
            std::size_t i = static_cast<std::size_t>(r) * n + c;
            out[i] = x[i] + bias[static_cast<std::size_t>(c)];
        }
    auto xn = x.node();
    auto bn = bias.node();
    return Tensor::make_op(x.shape(), std::move(out), {x, bias}, [xn, bn, rows, n](Tensor::Node& o) {
        if (xn->requires_grad) detail::accumulate(xn->grad, o.grad);
        if (bn->requires_grad)
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < n; ++c) bn->grad[static_cast<std::size_t>(c)] += o.grad[static_cast<std::size_t>(r) * n + c];
    });
}

// tokens[N, d] broadcast over regions plus context[R, d] broadcast over
// tokens: out[r, t, :] = tokens[t, :] + context[r, :]
inline Tensor context_sum(const Tensor& tokens, const Tensor& context) {
    if (tokens.rank() != 2 || context.rank() != 2 || tokens.dim(1) != context.dim(1))
        throw ShapeError("context_sum: incompatible shapes " + detail::shape_str(tokens.shape()) + " and " +
                         detail::shape_str(context.shape()));
    int N = tokens.dim(0), d = tokens.dim(1), R = context.dim(0);
    std::vector<Real> out(static_cast<std::size_t>(R) * N * d);
    for (int r = 0; r < R; ++r)
        for (int t = 0; t < N; ++t)
            for (int c = 0; c < d; ++c)
                out[(static_cast<std::size_t>(r) * N + t) * d + c] =
                    tokens[static_cast<std::size_t>(t) * d + c] + context[static_cast<std::size_t>(r) * d + c];
    auto tn = tokens.node();
    auto cn = context.node();
    return Tensor::make_op({R, N, d}, std::move(out), {tokens, context}, [tn, cn, R, N, d](Tensor::Node& o) {
        for (int r = 0; r < R; ++r)
            for (int t = 0; t < N; ++t)
                for (int c = 0; c < d; ++c) {
                    Real g = o.grad[(static_cast<std::size_t>(r) * N + t) * d + c];
                    if (tn->requires_grad) tn->grad[static_cast<std::size_t>(t) * d + c] += g;
                    if (cn->requires_grad) cn->grad[static_cast<std::size_t>(r) * d + c] += g;
                }
    });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
    std::size_t n = 1;
    for (int d : new_shape) n *= static_cast<std::size_t>(std::max(d, 0));
    if (n != x.numel())
        throw ShapeError("reshape: cannot view " + detail::shape_str(x.shape()) + " as " +
                         detail::shape_str(new_shape));
    auto xn = x.node();
    return Tensor::make_op(std::move(new_shape), std::vector<Real>(x.data()), {x}, [xn](Tensor::Node& o) {
        if (xn->requires_grad) detail::accumulate(xn->grad, o.grad);
    });
}

// concat along the last axis
inline Tensor concat_last(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank()) throw ShapeError("concat_last: rank mismatch");
    for (int i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) throw ShapeError("concat_last: leading dims disagree");
    auto [rows, ca] = detail::as_2d(a);
    int cb = b.dim(b.rank() - 1);
    std::vector<Real> out(static_cast<std::size_t>(rows) * (ca + cb));
    for (int r = 0; r < rows; ++r) {
        std::copy_n(a.data().data() + static_cast<std::size_t>(r) * ca, ca,
                    out.data() + static_cast<std::size_t>(r) * (ca + cb));
        std::copy_n(b.data().data() + static_cast<std::size_t>(r) * cb, cb,
                    out.data() + static_cast<std::size_t>(r) * (ca + cb) + ca);
    }
    std::vector<int> shape = a.shape();
    shape.back() = ca + cb;
    auto an = a.node();
    auto bn = b.node();
    return Tensor::make_op(std::move(shape), std::move(out), {a, b}, [an, bn, rows, ca, cb](Tensor::Node& o) {
        for (int r = 0; r < rows; ++r) {
            const Real* g = o.grad.data() + static_cast<std::size_t>(r) * (ca + cb);
            if (an->requires_grad)
                for (int c = 0; c < ca; ++c) an->grad[static_cast<std::size_t>(r) * ca + c] += g[c];
            if (bn->requires_grad)
                for (int c = 0; c < cb; ++c) bn->grad[static_cast<std::size_t>(r) * cb + c] += g[ca + c];
        }
    });
}

// table[V, e] gathered by row indices; backward scatter-adds. Equivalent to
// one-hot x table.
inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& indices) {
    if (table.rank() != 2) throw ShapeError("embedding_rows: table must be 2-D");
    int V = table.dim(0), e = table.dim(1);
    for (int idx : indices)
        if (idx < 0 || idx >= V)
            throw std::out_of_range("embedding_rows: index " + std::to_string(idx) + " outside table of " +
                                    std::to_string(V) + " rows");
    int n = static_cast<int>(indices.size());
    std::vector<Real> out(static_cast<std::size_t>(n) * e);
    for (int i = 0; i < n; ++i)
        std::copy_n(table.data().data() + static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]) * e, e,
                    out.data() + static_cast<std::size_t>(i) * e);
    auto tn = table.node();
    auto idx = indices;
    return Tensor::make_op({n, e}, std::move(out), {table}, [tn, idx = std::move(idx), e](Tensor::Node& o) {
        if (!tn->requires_grad) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int c = 0; c < e; ++c)
                tn->grad[static_cast<std::size_t>(idx[i]) * e + c] += o.grad[i * static_cast<std::size_t>(e) + c];
    });
}

// ---------------------------------------------------------------------------
// normalization and regularization

// Row softmax over the last axis. Finite inputs in, rows summing to one out.
inline Tensor softmax_rows(const Tensor& x) {
    auto [rows, cols] = detail::as_2d(x);
    std::vector<Real> out(x.data());
    detail::softmax_rows_inplace(out.data(), rows, cols);
    auto xn = x.node();
    auto saved = out;
    return Tensor::make_op(x.shape(), std::move(out), {x},
                           [xn, saved = std::move(saved), rows, cols](Tensor::Node& o) {
                               if (!xn->requires_grad) return;
                               std::vector<Real> dx(saved.size());
                               detail::softmax_backward_rows(saved.data(), o.grad.data(), dx.data(), rows, cols);
                               detail::accumulate(xn->grad, dx);
                           });
}

// RMSNorm over the last axis with a learned gain:
// y = gain .* x / sqrt(mean(x^2) + eps)
inline Tensor rmsnorm(const Tensor& x, const Tensor& gain, Real eps = Real(1e-8)) {
    auto [rows, d] = detail::as_2d(x);
    if (gain.rank() != 1 || gain.dim(0) != d)
        throw ShapeError("rmsnorm: gain " + detail::shape_str(gain.shape()) + " does not match last dim of " +
                         detail::shape_str(x.shape()));
    std::vector<Real> out(x.numel());
    std::vector<Real> inv_rms(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const Real* xr = x.data().data() + static_cast<std::size_t>(r) * d;
        Real ms = 0;
        for (int c = 0; c < d; ++c) ms += xr[c] * xr[c];
        ms = ms / d + eps;
        Real ir = Real(1) / std::sqrt(ms);
        inv_rms[static_cast<std::size_t>(r)] = ir;
        for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(r) * d + c] = gain[static_cast<std::size_t>(c)] * xr[c] * ir;
    }
    auto xn = x.node();
    auto gn = gain.node();
    return Tensor::make_op(x.shape(), std::move(out), {x, gain},
                           [xn, gn, inv_rms = std::move(inv_rms), rows, d](Tensor::Node& o) {
                               for (int r = 0; r < rows; ++r) {
                                   const Real* xr = xn->data.data() + static_cast<std::size_t>(r) * d;
                                   const Real* dyr = o.grad.data() + static_cast<std::size_t>(r) * d;
                                   Real ir = inv_rms[static_cast<std::size_t>(r)];
                                   if (gn->requires_grad)
                                       for (int c = 0; c < d; ++c) gn->grad[static_cast<std::size_t>(c)] += dyr[c] * xr[c] * ir;
                                   if (xn->requires_grad) {
                                       Real dot = 0;
                                       for (int c = 0; c < d; ++c) dot += dyr[c] * gn->data[static_cast<std::size_t>(c)] * xr[c];
                                       Real k = dot * ir * ir * ir / d;
                                       for (int c = 0; c < d; ++c)
                                           xn->grad[static_cast<std::size_t>(r) * d + c] +=
                                               dyr[c] * gn->data[static_cast<std::size_t>(c)] * ir - k * xr[c];
                                   }
                               }
                           });
}

// Inverted dropout: zero with probability `rate`, scale survivors by
// 1/(1-rate) so eval mode is the identity.
inline Tensor dropout(const Tensor& x, Real rate, bool training, Rng& rng) {
    if (!(rate >= Real(0) && rate < Real(1)))
        throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    if (!training || rate == Real(0)) {
        auto xn = x.node();
        return Tensor::make_op(x.shape(), std::vector<Real>(x.data()), {x}, [xn](Tensor::Node& o) {
            if (xn->requires_grad) detail::accumulate(xn->grad, o.grad);
        });
    }
    Real keep_scale = Real(1) / (Real(1) - rate);
    std::vector<Real> mask(x.numel());
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = (rng.uniform() < rate) ? Real(0) : keep_scale;
        out[i] = x[i] * mask[i];
    }
    auto xn = x.node();
    return Tensor::make_op(x.shape(), std::move(out), {x}, [xn, mask = std::move(mask)](Tensor::Node& o) {
        if (!xn->requires_grad) return;
        for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// losses

// Mean absolute error; subgradient at exact ties is 0.
inline Tensor mae(const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "mae");
    std::size_t n = pred.numel();
    Real total = 0;
    for (std::size_t i = 0; i < n; ++i) total += std::abs(pred[i] - target[i]);
    auto pn = pred.node();
    auto tn = target.node();
    return Tensor::make_op({1}, {total / static_cast<Real>(n)}, {pred, target}, [pn, tn, n](Tensor::Node& o) {
        Real g = o.grad[0] / static_cast<Real>(n);
        for (std::size_t i = 0; i < n; ++i) {
            Real diff = pn->data[i] - tn->data[i];
            Real s = (diff > 0) ? g : (diff < 0 ? -g : Real(0));
            if (pn->requires_grad) pn->grad[i] += s;
            if (tn->requires_grad) tn->grad[i] -= s;
        }
    });
}

// ---------------------------------------------------------------------------
// fused model ops

// Multi-head attention mixing per Eq-style scaled dot product with dropout on
// the raw pre-softmax logits: softmax(dropout(Q Kt) / sqrt(d_h)) V, applied
// independently per region and head. q: [R, Tq, d], k/v: [R, Tk, d].
// `attn_out`, when given, receives the R*heads post-softmax weight matrices.
inline Tensor multihead_mix(const Tensor& q, const Tensor& k, const Tensor& v, int heads, Real drop_rate,
                            bool training, Rng* rng, std::vector<EMatrix>* attn_out = nullptr) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw ShapeError("multihead_mix: q/k/v must be rank-3");
    int R = q.dim(0), Tq = q.dim(1), d = q.dim(2);
    int Tk = k.dim(1);
    if (k.dim(0) != R || v.dim(0) != R || k.dim(2) != d || v.dim(2) != d || v.dim(1) != Tk)
        throw ShapeError("multihead_mix: inconsistent shapes q" + detail::shape_str(q.shape()) + " k" +
                         detail::shape_str(k.shape()) + " v" + detail::shape_str(v.shape()));
    if (heads <= 0 || d % heads != 0)
        throw ConfigError("multihead_mix: head count " + std::to_string(heads) + " must divide width " +
                          std::to_string(d));
    bool use_dropout = training && drop_rate > Real(0);
    if (use_dropout && rng == nullptr) throw ConfigError("multihead_mix: dropout in training mode needs an rng");

    int dh = d / heads;
    Real att_scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    Real keep_scale = use_dropout ? Real(1) / (Real(1) - drop_rate) : Real(1);

    bool track = detail::grad_mode() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    std::vector<Real> out(static_cast<std::size_t>(R) * Tq * d, Real(0));
    // saved per (region, head): attention weights, and dropout masks in training
    std::vector<Real> saved_attn;
    std::vector<Real> saved_mask;
    if (track) saved_attn.resize(static_cast<std::size_t>(R) * heads * Tq * Tk);
    if (track && use_dropout) saved_mask.resize(saved_attn.size());
    if (attn_out) attn_out->clear();

    using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
    auto head_block = [&](const std::vector<Real>& buf, int r, int h, int T) {
        return Eigen::Map<const EMatrix, 0, StrideT>(buf.data() + (static_cast<std::size_t>(r) * T) * d + h * dh, T,
                                                     dh, StrideT(d, 1));
    };

    EMatrix scores(Tq, Tk);
    for (int r = 0; r < R; ++r) {
        for (int h = 0; h < heads; ++h) {
            auto Q = head_block(q.data(), r, h, Tq);
            auto K = head_block(k.data(), r, h, Tk);
            auto V = head_block(v.data(), r, h, Tk);
            scores.noalias() = Q * K.transpose();
            std::size_t base = (static_cast<std::size_t>(r) * heads + h) * Tq * Tk;
            if (use_dropout) {
                for (int i = 0; i < Tq * Tk; ++i) {
                    Real m = (rng->uniform() < drop_rate) ? Real(0) : keep_scale;
                    if (track) saved_mask[base + static_cast<std::size_t>(i)] = m;
                    scores.data()[i] *= m;
                }
            }
            scores *= att_scale;
            detail::softmax_rows_inplace(scores.data(), Tq, Tk);
            if (track) std::copy_n(scores.data(), Tq * Tk, saved_attn.data() + base);
            if (attn_out) attn_out->push_back(scores);
            Eigen::Map<EMatrix, 0, StrideT> O(out.data() + (static_cast<std::size_t>(r) * Tq) * d + h * dh, Tq, dh,
                                              StrideT(d, 1));
            O.noalias() = scores * V;
        }
    }

    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    return Tensor::make_op(
        {R, Tq, d}, std::move(out), {q, k, v},
        [qn, kn, vn, saved_attn = std::move(saved_attn), saved_mask = std::move(saved_mask), R, Tq, Tk, d, dh, heads,
         att_scale, keep_scale, use_dropout](Tensor::Node& o) {
            using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
            auto block = [&](const std::vector<Real>& buf, int r, int h, int T) {
                return Eigen::Map<const EMatrix, 0, StrideT>(buf.data() + (static_cast<std::size_t>(r) * T) * d + h * dh,
                                                             T, dh, StrideT(d, 1));
            };
            auto grad_block = [&](std::vector<Real>& buf, int r, int h, int T) {
                return Eigen::Map<EMatrix, 0, StrideT>(buf.data() + (static_cast<std::size_t>(r) * T) * d + h * dh, T,
                                                       dh, StrideT(d, 1));
            };
            EMatrix dA(Tq, Tk), dS(Tq, Tk);
            for (int r = 0; r < R; ++r) {
                for (int h = 0; h < heads; ++h) {
                    std::size_t base = (static_cast<std::size_t>(r) * heads + h) * Tq * Tk;
                    ECMap A(saved_attn.data() + base, Tq, Tk);
                    auto dO = block(o.grad, r, h, Tq);
                    auto V = block(vn->data, r, h, Tk);
                    dA.noalias() = dO * V.transpose();
                    if (vn->requires_grad) grad_block(vn->grad, r, h, Tk).noalias() += A.transpose() * dO;
                    detail::softmax_backward_rows(A.data(), dA.data(), dS.data(), Tq, Tk);
                    dS *= att_scale;
                    if (use_dropout) {
                        const Real* m = saved_mask.data() + base;
                        for (int i = 0; i < Tq * Tk; ++i) dS.data()[i] *= m[i];
                    }
                    if (qn->requires_grad) grad_block(qn->grad, r, h, Tq).noalias() += dS * block(kn->data, r, h, Tk);
                    if (kn->requires_grad)
                        grad_block(kn->grad, r, h, Tk).noalias() += dS.transpose() * block(qn->data, r, h, Tq);
                }
            }
            (void)keep_scale;
        });
}

// Per-token graph mixing: out[:, t, :] = A * h[:, t, :] with A held constant
// (the normalized adjacency is data, not a parameter).
inline Tensor adjacency_mix(const Tensor& h, const Tensor& adj) {
    if (h.rank() != 3 || adj.rank() != 2) throw ShapeError("adjacency_mix: expected h rank-3 and adj rank-2");
    int R = h.dim(0), N = h.dim(1), d = h.dim(2);
    if (adj.dim(0) != R || adj.dim(1) != R)
        throw ShapeError("adjacency_mix: adjacency " + detail::shape_str(adj.shape()) + " does not match " +
                         std::to_string(R) + " regions");
    if (adj.requires_grad()) throw ConfigError("adjacency_mix: adjacency must not require grad");

    using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
    std::vector<Real> out(h.numel());
    ECMap A(adj.data().data(), R, R);
    for (int t = 0; t < N; ++t) {
        Eigen::Map<const EMatrix, 0, StrideT> Ht(h.data().data() + static_cast<std::size_t>(t) * d, R, d,
                                                 StrideT(static_cast<Eigen::Index>(N) * d, 1));
        Eigen::Map<EMatrix, 0, StrideT> Ot(out.data() + static_cast<std::size_t>(t) * d, R, d,
                                           StrideT(static_cast<Eigen::Index>(N) * d, 1));
        Ot.noalias() = A * Ht;
    }
    auto hn = h.node();
    auto an = adj.node();
    return Tensor::make_op({R, N, d}, std::move(out), {h, adj}, [hn, an, R, N, d](Tensor::Node& o) {
        if (!hn->requires_grad) return;
        using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
        ECMap A(an->data.data(), R, R);
        for (int t = 0; t < N; ++t) {
            Eigen::Map<const EMatrix, 0, StrideT> dOt(o.grad.data() + static_cast<std::size_t>(t) * d, R, d,
                                                      StrideT(static_cast<Eigen::Index>(N) * d, 1));
            Eigen::Map<EMatrix, 0, StrideT> dHt(hn->grad.data() + static_cast<std::size_t>(t) * d, R, d,
                                                StrideT(static_cast<Eigen::Index>(N) * d, 1));
            dHt.noalias() += A.transpose() * dOt;
        }
    });
}

}  // namespace stcast
