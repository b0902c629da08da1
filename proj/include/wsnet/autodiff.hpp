#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "wsnet/common.hpp"
#include "wsnet/kernels.hpp"

// Reverse-mode automatic differentiation over dense double tensors. Dynamic graph:
// each op allocates a node holding its value, parent links and a backward closure.
// Accumulation order is fixed by creation order, so runs with one seed are
// bitwise reproducible.

namespace wsnet::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    std::vector<size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized on demand during backward
    bool requires_grad = false;
    bool needs_grad = false;  // this node or some ancestor requires grad
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;  // scatters this->grad into parents
    const char* op = "leaf";
    std::uint64_t id = 0;

    size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

namespace detail {
inline std::uint64_t& node_counter() {
    thread_local std::uint64_t c = 0;
    return c;
}
inline bool& grad_enabled() {
    thread_local bool e = true;
    return e;
}
}  // namespace detail

// Disables graph recording in scope; forward values still computed.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled()) { detail::grad_enabled() = false; }
    ~NoGradGuard() { detail::grad_enabled() = prev; }
};

inline size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor leaf(std::vector<size_t> shape, std::vector<double> data,
                       bool requires_grad = false) {
        require(data.size() == shape_numel(shape), "Tensor: data length != product of shape");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->needs_grad = requires_grad;
        n->id = detail::node_counter()++;
        return Tensor(n);
    }

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
        size_t n = shape_numel(shape);
        return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return leaf({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<size_t>& shape() const { return n_->shape; }
    size_t numel() const { return n_->numel(); }
    std::vector<double>& value() { return n_->value; }
    const std::vector<double>& value() const { return n_->value; }
    std::vector<double>& grad() { return n_->grad; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    double item() const {
        require(n_->numel() == 1, "Tensor::item: not a scalar");
        return n_->value[0];
    }
    NodePtr node() const { return n_; }
    Node* raw() const { return n_.get(); }

private:
    NodePtr n_;
};

// Builds a derived node; records parents/backward only while grad mode is on and
// some parent needs gradients.
inline Tensor make_op(const char* op, std::vector<size_t> shape, std::vector<double> value,
                      std::vector<Tensor> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    n->id = detail::node_counter()++;
    bool track = false;
    if (detail::grad_enabled()) {
        for (const auto& p : parents)
            if (p.raw()->needs_grad) track = true;
    }
    if (track) {
        n->needs_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// broadcasting helpers

namespace detail {

inline std::vector<size_t> broadcast_shape(const std::vector<size_t>& a,
                                           const std::vector<size_t>& b) {
    const size_t rank = std::max(a.size(), b.size());
    std::vector<size_t> out(rank);
    for (size_t i = 0; i < rank; ++i) {
        const size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        require(da == db || da == 1 || db == 1, "broadcast: incompatible shapes");
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `shape` expanded to `target` rank, 0 on broadcast axes
inline std::vector<size_t> broadcast_strides(const std::vector<size_t>& shape,
                                             const std::vector<size_t>& target) {
    std::vector<size_t> strides(target.size(), 0);
    size_t s = 1;
    const size_t off = target.size() - shape.size();
    for (size_t i = shape.size(); i-- > 0;) {
        strides[off + i] = (shape[i] == 1 && target[off + i] != 1) ? 0 : s;
        s *= shape[i];
    }
    return strides;
}

template <class F>
inline void broadcast_walk(const std::vector<size_t>& out_shape,
                           const std::vector<size_t>& sa, const std::vector<size_t>& sb, F&& f) {
    const size_t rank = out_shape.size();
    const size_t total = shape_numel(out_shape);
    std::vector<size_t> idx(rank, 0);
    size_t ia = 0, ib = 0;
    for (size_t lin = 0; lin < total; ++lin) {
        f(lin, ia, ib);
        for (size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out_shape[d]) break;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

// Sum `full` (of shape `from`) down to `to` (broadcast-reduced); adds into out.
inline void reduce_to(const std::vector<double>& full, const std::vector<size_t>& from,
                      std::vector<double>& out, const std::vector<size_t>& to) {
    if (from == to) {
        for (size_t i = 0; i < full.size(); ++i) out[i] += full[i];
        return;
    }
    auto st = broadcast_strides(to, from);
    const size_t rank = from.size();
    std::vector<size_t> idx(rank, 0);
    size_t it = 0;
    for (size_t lin = 0; lin < full.size(); ++lin) {
        out[it] += full[lin];
        for (size_t d = rank; d-- > 0;) {
            ++idx[d];
            it += st[d];
            if (idx[d] < from[d]) break;
            it -= st[d] * from[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (with broadcasting over size-1 axes)

namespace detail {

template <class FwdF, class BwdF>
inline Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdF fwd, BwdF bwd) {
    if (a.shape() == b.shape()) {
        std::vector<double> v(a.numel());
        const auto& av = a.value();
        const auto& bv = b.value();
        for (size_t i = 0; i < v.size(); ++i) v[i] = fwd(av[i], bv[i]);
        return make_op(name, a.shape(), std::move(v), {a, b},
                       [pa = a.node(), pb = b.node(), bwd](Node& n) {
                           const size_t total = n.numel();
                           if (pa->needs_grad) {
                               pa->ensure_grad();
                               for (size_t i = 0; i < total; ++i) {
                                   double da, db;
                                   bwd(pa->value[i], pb->value[i], n.grad[i], da, db);
                                   pa->grad[i] += da;
                               }
                           }
                           if (pb->needs_grad) {
                               pb->ensure_grad();
                               for (size_t i = 0; i < total; ++i) {
                                   double da, db;
                                   bwd(pa->value[i], pb->value[i], n.grad[i], da, db);
                                   pb->grad[i] += db;
                               }
                           }
                       });
    }
    auto out_shape = broadcast_shape(a.shape(), b.shape());
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<double> v(shape_numel(out_shape));
    const auto& av = a.value();
    const auto& bv = b.value();
    broadcast_walk(out_shape, sa, sb,
                   [&](size_t lin, size_t ia, size_t ib) { v[lin] = fwd(av[ia], bv[ib]); });
    return make_op(name, out_shape, std::move(v), {a, b},
                   [pa = a.node(), pb = b.node(), out_shape, sa, sb, bwd](Node& n) {
                       if (pa->needs_grad) pa->ensure_grad();
                       if (pb->needs_grad) pb->ensure_grad();
                       broadcast_walk(out_shape, sa, sb, [&](size_t lin, size_t ia, size_t ib) {
                           double da, db;
                           bwd(pa->value[ia], pb->value[ib], n.grad[lin], da, db);
                           if (pa->needs_grad) pa->grad[ia] += da;
                           if (pb->needs_grad) pb->grad[ib] += db;
                       });
                   });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

// ---------------------------------------------------------------------------
// elementwise unary ops

namespace detail {

template <class FwdF, class BwdF>
inline Tensor unary_op(const char* name, const Tensor& a, FwdF fwd, BwdF bwd) {
    std::vector<double> v(a.numel());
    const auto& av = a.value();
    for (size_t i = 0; i < v.size(); ++i) v[i] = fwd(av[i]);
    return make_op(name, a.shape(), std::move(v), {a}, [pa = a.node(), bwd](Node& n) {
        if (!pa->needs_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.numel(); ++i)
            pa->grad[i] += bwd(pa->value[i], n.value[i], n.grad[i]);
    });
}

}  // namespace detail

inline Tensor scale(const Tensor& a, double c) {
    return detail::unary_op(
        "scale", a, [c](double x) { return c * x; },
        [c](double, double, double g) { return c * g; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary_op(
        "add_scalar", a, [c](double x) { return x + c; },
        [](double, double, double g) { return g; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); },
        [](double, double y, double g) { return g * y; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y, double g) { return g * y * (1.0 - y); });
}

// ln(x + eps)
inline Tensor log_eps(const Tensor& a, double eps = 1e-8) {
    return detail::unary_op(
        "log_eps", a, [eps](double x) { return std::log(x + eps); },
        [eps](double x, double, double g) { return g / (x + eps); });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y, double g) { return 0.5 * g / y; });
}

inline Tensor clamp_min(const Tensor& a, double lo) {
    return detail::unary_op(
        "clamp_min", a, [lo](double x) { return x > lo ? x : lo; },
        [lo](double x, double, double g) { return x > lo ? g : 0.0; });
}

// arccos that never produces NaN for inputs within 1e-9 of [-1, 1]. The value uses
// the argument clamped to the domain; the derivative uses the argument clamped to
// [-1+delta, 1-delta] so it stays bounded where acos' diverges.
inline Tensor arccos_safe(const Tensor& a, double delta = 1e-7) {
    return detail::unary_op(
        "arccos_safe", a,
        [](double x) { return std::acos(std::min(1.0, std::max(-1.0, x))); },
        [delta](double x, double, double g) {
            const double xc = std::min(1.0 - delta, std::max(-1.0 + delta, x));
            return -g / std::sqrt(1.0 - xc * xc);
        });
}

// x * sigmoid(x); the network nonlinearity
inline Tensor silu(const Tensor& a) {
    return detail::unary_op(
        "silu", a,
        [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double, double g) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return g * (s + x * s * (1.0 - s));
        });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, std::vector<size_t> shape) {
    require(shape_numel(shape) == a.numel(), "reshape: element count mismatch");
    return make_op("reshape", std::move(shape), a.value(), {a}, [pa = a.node()](Node& n) {
        if (!pa->needs_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.numel(); ++i) pa->grad[i] += n.grad[i];
    });
}

inline Tensor transpose2d(const Tensor& a) {
    require(a.shape().size() == 2, "transpose2d: rank-2 tensor required");
    const size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> v(a.numel());
    const auto& av = a.value();
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) v[j * r + i] = av[i * c + j];
    return make_op("transpose2d", {c, r}, std::move(v), {a}, [pa = a.node(), r, c](Node& n) {
        if (!pa->needs_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) pa->grad[i * c + j] += n.grad[j * r + i];
    });
}

inline Tensor concat(const std::vector<Tensor>& xs, size_t axis) {
    require(!xs.empty(), "concat: no inputs");
    const auto& s0 = xs[0].shape();
    require(axis < s0.size(), "concat: axis out of range");
    size_t axis_total = 0;
    for (const auto& x : xs) {
        require(x.shape().size() == s0.size(), "concat: rank mismatch");
        for (size_t d = 0; d < s0.size(); ++d)
            if (d != axis) require(x.shape()[d] == s0[d], "concat: shape mismatch");
        axis_total += x.shape()[axis];
    }
    std::vector<size_t> out_shape = s0;
    out_shape[axis] = axis_total;

    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    std::vector<double> v(shape_numel(out_shape));
    size_t offset = 0;
    for (const auto& x : xs) {
        const size_t ax = x.shape()[axis];
        const auto& xv = x.value();
        for (size_t o = 0; o < outer; ++o)
            std::copy(xv.begin() + o * ax * inner, xv.begin() + (o + 1) * ax * inner,
                      v.begin() + (o * axis_total + offset) * inner);
        offset += ax;
    }
    std::vector<Tensor> parents = xs;
    return make_op("concat", out_shape, std::move(v), parents,
                   [xs, outer, inner, axis_total, axis](Node& n) {
                       size_t off = 0;
                       for (const auto& x : xs) {
                           auto p = x.node();
                           const size_t ax = x.shape()[axis];
                           if (p->needs_grad) {
                               p->ensure_grad();
                               for (size_t o = 0; o < outer; ++o) {
                                   const double* g = n.grad.data() + (o * axis_total + off) * inner;
                                   double* pg = p->grad.data() + o * ax * inner;
                                   for (size_t i = 0; i < ax * inner; ++i) pg[i] += g[i];
                               }
                           }
                           off += ax;
                       }
                   });
}

inline Tensor slice(const Tensor& a, size_t axis, size_t start, size_t stop, size_t step = 1) {
    const auto& s = a.shape();
    require(axis < s.size(), "slice: axis out of range");
    require(step >= 1 && start <= stop && stop <= s[axis], "slice: bad range");
    const size_t len = (stop - start + step - 1) / step;
    std::vector<size_t> out_shape = s;
    out_shape[axis] = len;

    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const size_t ax = s[axis];

    std::vector<double> v(shape_numel(out_shape));
    const auto& av = a.value();
    for (size_t o = 0; o < outer; ++o)
        for (size_t k = 0; k < len; ++k)
            std::copy(av.begin() + (o * ax + start + k * step) * inner,
                      av.begin() + (o * ax + start + k * step + 1) * inner,
                      v.begin() + (o * len + k) * inner);
    return make_op("slice", out_shape, std::move(v), {a},
                   [pa = a.node(), outer, inner, ax, len, start, step](Node& n) {
                       if (!pa->needs_grad) return;
                       pa->ensure_grad();
                       for (size_t o = 0; o < outer; ++o)
                           for (size_t k = 0; k < len; ++k) {
                               const double* g = n.grad.data() + (o * len + k) * inner;
                               double* pg = pa->grad.data() + (o * ax + start + k * step) * inner;
                               for (size_t i = 0; i < inner; ++i) pg[i] += g[i];
                           }
                   });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a, size_t axis) {
    const auto& s = a.shape();
    require(axis < s.size(), "sum: axis out of range");
    std::vector<size_t> out_shape;
    for (size_t d = 0; d < s.size(); ++d)
        if (d != axis) out_shape.push_back(s[d]);
    if (out_shape.empty()) out_shape = {1};

    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const size_t ax = s[axis];

    std::vector<double> v(outer * inner, 0.0);
    const auto& av = a.value();
    for (size_t o = 0; o < outer; ++o)
        for (size_t k = 0; k < ax; ++k) {
            const double* src = av.data() + (o * ax + k) * inner;
            double* dst = v.data() + o * inner;
            for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    return make_op("sum", out_shape, std::move(v), {a},
                   [pa = a.node(), outer, inner, ax](Node& n) {
                       if (!pa->needs_grad) return;
                       pa->ensure_grad();
                       for (size_t o = 0; o < outer; ++o)
                           for (size_t k = 0; k < ax; ++k) {
                               const double* g = n.grad.data() + o * inner;
                               double* pg = pa->grad.data() + (o * ax + k) * inner;
                               for (size_t i = 0; i < inner; ++i) pg[i] += g[i];
                           }
                   });
}

inline Tensor mean(const Tensor& a, size_t axis) {
    return scale(sum(a, axis), 1.0 / static_cast<double>(a.shape()[axis]));
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.value()) s += x;
    return make_op("sum_all", {1}, {s}, {a}, [pa = a.node()](Node& n) {
        if (!pa->needs_grad) return;
        pa->ensure_grad();
        const double g = n.grad[0];
        for (double& x : pa->grad) x += g;
    });
}

inline Tensor mean_all(const Tensor& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// softmax

inline Tensor softmax(const Tensor& a, size_t axis) {
    const auto& s = a.shape();
    require(axis < s.size(), "softmax: axis out of range");
    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const size_t ax = s[axis];

    std::vector<double> v(a.numel());
    const auto& av = a.value();
    for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (size_t k = 0; k < ax; ++k) mx = std::max(mx, av[(o * ax + k) * inner + i]);
            double total = 0.0;
            for (size_t k = 0; k < ax; ++k) {
                const double e = std::exp(av[(o * ax + k) * inner + i] - mx);
                v[(o * ax + k) * inner + i] = e;
                total += e;
            }
            const double invt = 1.0 / total;
            for (size_t k = 0; k < ax; ++k) v[(o * ax + k) * inner + i] *= invt;
        }
    return make_op("softmax", s, std::move(v), {a}, [pa = a.node(), outer, inner, ax](Node& n) {
        if (!pa->needs_grad) return;
        pa->ensure_grad();
        for (size_t o = 0; o < outer; ++o)
            for (size_t i = 0; i < inner; ++i) {
                double dotgy = 0.0;
                for (size_t k = 0; k < ax; ++k) {
                    const size_t idx = (o * ax + k) * inner + i;
                    dotgy += n.grad[idx] * n.value[idx];
                }
                for (size_t k = 0; k < ax; ++k) {
                    const size_t idx = (o * ax + k) * inner + i;
                    pa->grad[idx] += n.value[idx] * (n.grad[idx] - dotgy);
                }
            }
    });
}

// ---------------------------------------------------------------------------
// matmul

// y = opA(a) * opB(b) for rank-2 tensors; transposition handled without copies.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                     bool trans_b = false) {
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: rank-2 tensors required");
    require(!(trans_a && trans_b), "matmul: double transpose unsupported");
    const size_t m = trans_a ? a.shape()[1] : a.shape()[0];
    const size_t k = trans_a ? a.shape()[0] : a.shape()[1];
    const size_t kb = trans_b ? b.shape()[1] : b.shape()[0];
    const size_t n = trans_b ? b.shape()[0] : b.shape()[1];
    require(k == kb, "matmul: inner dimension mismatch");

    std::vector<double> v(m * n, 0.0);
    const double* ap = a.value().data();
    const double* bp = b.value().data();
    if (!trans_a && !trans_b)
        kernels::mm_nn(v.data(), ap, bp, m, k, n);
    else if (!trans_a && trans_b)
        kernels::mm_nt(v.data(), ap, bp, m, k, n);
    else
        kernels::mm_tn(v.data(), ap, bp, m, k, n);

    return make_op("matmul", {m, n}, std::move(v), {a, b},
                   [pa = a.node(), pb = b.node(), m, k, n, trans_a, trans_b](Node& nd) {
                       const double* g = nd.grad.data();
                       if (pa->needs_grad) {
                           pa->ensure_grad();
                           if (!trans_a) {
                               // dA(m,k) += g(m,n) * opB(b)(k,n)^T
                               if (!trans_b)
                                   kernels::mm_nt(pa->grad.data(), g, pb->value.data(), m, n, k);
                               else
                                   kernels::mm_nn(pa->grad.data(), g, pb->value.data(), m, n, k);
                           } else {
                               // a is (k,m): dA += opB(b)(k,n) * g(m,n)^T
                               if (!trans_b)
                                   kernels::mm_nt(pa->grad.data(), pb->value.data(), g, k, n, m);
                               else
                                   kernels::mm_nn(pa->grad.data(), pb->value.data(), g, k, n, m);
                           }
                       }
                       if (pb->needs_grad) {
                           pb->ensure_grad();
                           if (!trans_b) {
                               // dB(k,n) += opA(a)(m,k)^T * g(m,n)
                               if (!trans_a)
                                   kernels::mm_tn(pb->grad.data(), pa->value.data(), g, k, m, n);
                               else
                                   kernels::mm_nn(pb->grad.data(), pa->value.data(), g, k, m, n);
                           } else {
                               // b is (n,k): dB(n,k) += g(m,n)^T * opA(a)(m,k)
                               kernels::mm_tn(pb->grad.data(), g, pa->value.data(), n, m, k);
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation) over (C,H,W) with weight (O,C,kh,kw)

namespace detail {

struct ConvDims {
    size_t cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

inline ConvDims conv_dims(const std::vector<size_t>& xs, const std::vector<size_t>& ws,
                          size_t stride, size_t pad) {
    require(xs.size() == 3 && ws.size() == 4, "conv2d: x must be (C,H,W), w must be (O,C,kh,kw)");
    ConvDims d;
    d.cin = xs[0];
    d.h = xs[1];
    d.w = xs[2];
    d.cout = ws[0];
    d.kh = ws[2];
    d.kw = ws[3];
    require(ws[1] == d.cin, "conv2d: channel mismatch");
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(d.h + 2 * pad >= d.kh && d.w + 2 * pad >= d.kw, "conv2d: kernel larger than input");
    d.stride = stride;
    d.pad = pad;
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

// cols is (C*kh*kw) x (Ho*Wo)
inline void im2col(const double* x, const ConvDims& d, double* cols) {
    const size_t ncols = d.ho * d.wo;
    for (size_t c = 0; c < d.cin; ++c)
        for (size_t ki = 0; ki < d.kh; ++ki)
            for (size_t kj = 0; kj < d.kw; ++kj) {
                double* row = cols + ((c * d.kh + ki) * d.kw + kj) * ncols;
                for (size_t oi = 0; oi < d.ho; ++oi) {
                    const ptrdiff_t ii = static_cast<ptrdiff_t>(oi * d.stride + ki) -
                                         static_cast<ptrdiff_t>(d.pad);
                    double* dst = row + oi * d.wo;
                    if (ii < 0 || ii >= static_cast<ptrdiff_t>(d.h)) {
                        std::fill(dst, dst + d.wo, 0.0);
                        continue;
                    }
                    const double* src = x + (c * d.h + ii) * d.w;
                    for (size_t oj = 0; oj < d.wo; ++oj) {
                        const ptrdiff_t jj = static_cast<ptrdiff_t>(oj * d.stride + kj) -
                                             static_cast<ptrdiff_t>(d.pad);
                        dst[oj] = (jj < 0 || jj >= static_cast<ptrdiff_t>(d.w)) ? 0.0 : src[jj];
                    }
                }
            }
}

inline void col2im_add(const double* cols, const ConvDims& d, double* x) {
    const size_t ncols = d.ho * d.wo;
    for (size_t c = 0; c < d.cin; ++c)
        for (size_t ki = 0; ki < d.kh; ++ki)
            for (size_t kj = 0; kj < d.kw; ++kj) {
                const double* row = cols + ((c * d.kh + ki) * d.kw + kj) * ncols;
                for (size_t oi = 0; oi < d.ho; ++oi) {
                    const ptrdiff_t ii = static_cast<ptrdiff_t>(oi * d.stride + ki) -
                                         static_cast<ptrdiff_t>(d.pad);
                    if (ii < 0 || ii >= static_cast<ptrdiff_t>(d.h)) continue;
                    const double* src = row + oi * d.wo;
                    double* dst = x + (c * d.h + ii) * d.w;
                    for (size_t oj = 0; oj < d.wo; ++oj) {
                        const ptrdiff_t jj = static_cast<ptrdiff_t>(oj * d.stride + kj) -
                                             static_cast<ptrdiff_t>(d.pad);
                        if (jj >= 0 && jj < static_cast<ptrdiff_t>(d.w)) dst[jj] += src[oj];
                    }
                }
            }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, size_t stride = 1, size_t pad = 0) {
    const auto d = detail::conv_dims(x.shape(), w.shape(), stride, pad);
    const size_t ckk = d.cin * d.kh * d.kw;
    const size_t ncols = d.ho * d.wo;

    std::vector<double> v(d.cout * ncols, 0.0);
    std::shared_ptr<std::vector<double>> cols;  // kept for backward
    if (d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0) {
        kernels::mm_nn(v.data(), w.value().data(), x.value().data(), d.cout, ckk, ncols);
    } else {
        cols = std::make_shared<std::vector<double>>(ckk * ncols);
        detail::im2col(x.value().data(), d, cols->data());
        kernels::mm_nn(v.data(), w.value().data(), cols->data(), d.cout, ckk, ncols);
    }
    return make_op("conv2d", {d.cout, d.ho, d.wo}, std::move(v), {x, w},
                   [px = x.node(), pw = w.node(), d, ckk, ncols, cols](Node& n) {
                       const double* g = n.grad.data();  // (cout, ho*wo)
                       const bool pointwise = !cols;
                       if (pw->needs_grad) {
                           pw->ensure_grad();
                           const double* src = pointwise ? px->value.data() : cols->data();
                           // dW(cout,ckk) += g(cout,ncols) * cols(ckk,ncols)^T
                           kernels::mm_nt(pw->grad.data(), g, src, d.cout, ncols, ckk);
                       }
                       if (px->needs_grad) {
                           px->ensure_grad();
                           if (pointwise) {
                               // dX(cin,ncols) += W(cout,cin)^T * g(cout,ncols)
                               kernels::mm_tn(px->grad.data(), pw->value.data(), g, d.cin, d.cout,
                                              ncols);
                           } else {
                               std::vector<double> dcols(ckk * ncols, 0.0);
                               kernels::mm_tn(dcols.data(), pw->value.data(), g, ckk, d.cout,
                                              ncols);
                               detail::col2im_add(dcols.data(), d, px->grad.data());
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// spatial resampling ops on (C,H,W)

inline Tensor upsample_nearest2(const Tensor& x) {
    require(x.shape().size() == 3, "upsample_nearest2: (C,H,W) required");
    const size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    std::vector<double> v(c * 2 * h * 2 * w);
    const auto& xv = x.value();
    for (size_t ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < 2 * h; ++i) {
            const double* src = xv.data() + (ch * h + i / 2) * w;
            double* dst = v.data() + (ch * 2 * h + i) * 2 * w;
            for (size_t j = 0; j < 2 * w; ++j) dst[j] = src[j / 2];
        }
    return make_op("upsample_nearest2", {c, 2 * h, 2 * w}, std::move(v), {x},
                   [px = x.node(), c, h, w](Node& n) {
                       if (!px->needs_grad) return;
                       px->ensure_grad();
                       for (size_t ch = 0; ch < c; ++ch)
                           for (size_t i = 0; i < 2 * h; ++i) {
                               const double* g = n.grad.data() + (ch * 2 * h + i) * 2 * w;
                               double* pg = px->grad.data() + (ch * h + i / 2) * w;
                               for (size_t j = 0; j < 2 * w; ++j) pg[j / 2] += g[j];
                           }
                   });
}

// 2x2 average pooling with ceil semantics: edge cells average the entries that exist.
inline Tensor avg_pool2_ceil(const Tensor& x) {
    require(x.shape().size() == 3, "avg_pool2_ceil: (C,H,W) required");
    const size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const size_t ho = (h + 1) / 2, wo = (w + 1) / 2;
    std::vector<double> v(c * ho * wo);
    const auto& xv = x.value();
    for (size_t ch = 0; ch < c; ++ch)
        for (size_t oi = 0; oi < ho; ++oi)
            for (size_t oj = 0; oj < wo; ++oj) {
                double s = 0.0;
                size_t cnt = 0;
                for (size_t di = 0; di < 2; ++di)
                    for (size_t dj = 0; dj < 2; ++dj) {
                        const size_t i = 2 * oi + di, j = 2 * oj + dj;
                        if (i < h && j < w) {
                            s += xv[(ch * h + i) * w + j];
                            ++cnt;
                        }
                    }
                v[(ch * ho + oi) * wo + oj] = s / static_cast<double>(cnt);
            }
    return make_op("avg_pool2_ceil", {c, ho, wo}, std::move(v), {x},
                   [px = x.node(), c, h, w, ho, wo](Node& n) {
                       if (!px->needs_grad) return;
                       px->ensure_grad();
                       for (size_t ch = 0; ch < c; ++ch)
                           for (size_t oi = 0; oi < ho; ++oi)
                               for (size_t oj = 0; oj < wo; ++oj) {
                                   size_t cnt = 0;
                                   for (size_t di = 0; di < 2; ++di)
                                       for (size_t dj = 0; dj < 2; ++dj)
                                           if (2 * oi + di < h && 2 * oj + dj < w) ++cnt;
                                   const double g =
                                       n.grad[(ch * ho + oi) * wo + oj] / static_cast<double>(cnt);
                                   for (size_t di = 0; di < 2; ++di)
                                       for (size_t dj = 0; dj < 2; ++dj) {
                                           const size_t i = 2 * oi + di, j = 2 * oj + dj;
                                           if (i < h && j < w) px->grad[(ch * h + i) * w + j] += g;
                                       }
                               }
                   });
}

// ---------------------------------------------------------------------------
// backward pass

namespace detail {

inline void topo_collect(Node* root, std::vector<Node*>& order) {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Populates grad on every needs_grad ancestor of `loss`. Deterministic ordering;
// accumulation is a sum over all paths.
inline void backward(const Tensor& loss) {
    require(loss.numel() == 1, "backward: loss must be scalar");
    require(std::isfinite(loss.item()), "backward: loss is not finite");
    std::vector<Node*> order;
    detail::topo_collect(loss.raw(), order);
    // order is postorder: parents precede descendants; reset grads first
    for (Node* nd : order) nd->grad.assign(nd->numel(), 0.0);
    loss.raw()->grad[0] = 1.0;
    for (size_t k = order.size(); k-- > 0;) {
        Node* nd = order[k];
        for (double g : nd->grad) {
            if (std::isnan(g))
                throw error(std::string("backward: NaN gradient at op '") + nd->op + "' (node " +
                            std::to_string(nd->id) + ")");
        }
        if (nd->backprop) nd->backprop(*nd);
    }
}

// ---------------------------------------------------------------------------
// gradient checking

// Central-difference check of d(f)/d(params). Coordinates are subsampled (seeded)
// to at most max_coords per parameter. Returns the max relative error, where the
// error is defined as 0 when both magnitudes are below 1e-12.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double step = 1e-5, size_t max_coords = 200, std::uint64_t seed = 0) {
    require(step >= 1e-7 && step <= 1e-3, "grad_check: step out of range");
    Tensor loss = f();
    require(std::isfinite(loss.item()), "grad_check: non-finite objective");
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        require(p.requires_grad(), "grad_check: parameter does not require grad");
        analytic.push_back(p.grad().empty() ? std::vector<double>(p.numel(), 0.0) : p.grad());
    }

    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Rng rng(mix_seed(seed, pi));  // per-parameter subsample stream
        auto& vals = params[pi].value();
        std::vector<size_t> coords(vals.size());
        std::iota(coords.begin(), coords.end(), size_t{0});
        if (coords.size() > max_coords) {
            for (size_t k = 0; k < max_coords; ++k)
                std::swap(coords[k], coords[k + rng.index(coords.size() - k)]);
            coords.resize(max_coords);
        }
        for (size_t ci : coords) {
            const double keep = vals[ci];
            vals[ci] = keep + step;
            const double fplus = f().item();
            vals[ci] = keep - step;
            const double fminus = f().item();
            vals[ci] = keep;
            const double numeric = (fplus - fminus) / (2.0 * step);
            const double a = analytic[pi][ci];
            const double mag = std::max(std::abs(a), std::abs(numeric));
            const double rel = (std::abs(a) < 1e-12 && std::abs(numeric) < 1e-12)
                                   ? 0.0
                                   : std::abs(a - numeric) / mag;
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace wsnet::ad
