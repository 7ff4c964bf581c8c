#pragma once

// Reverse-mode automatic differentiation tensor core.
//
// Tensors are row-major n-d value arrays with an optional gradient buffer.
// Every operation that touches a requires_grad tensor records a tape node;
// backward() walks the tape in reverse topological order and ACCUMULATES
// gradients until they are explicitly zeroed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "emonext/errors.hpp"

namespace emonext {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

namespace detail {

inline thread_local int no_grad_depth = 0;

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

// Disables tape recording in scope (inference / data preprocessing).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_recording_enabled() { return detail::no_grad_depth == 0; }

template <typename T>
class Tensor {
  public:
    using NodeT = detail::Node<T>;

    Tensor() = default;

    explicit Tensor(Shape shape) : node_(std::make_shared<NodeT>()) {
        validate_shape(shape);
        node_->shape = std::move(shape);
        node_->data.assign(static_cast<size_t>(shape_numel(node_->shape)), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<NodeT>()) {
        validate_shape(shape);
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("tensor data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t dim(int64_t i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node_->numel(); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }

    Tensor& set_requires_grad(bool v = true) {
        node_->requires_grad = v;
        return *this;
    }

    const std::vector<T>& grad() const {
        return const_cast<NodeT&>(*node_).ensure_grad();
    }
    std::vector<T>& grad() { return node_->ensure_grad(); }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->data[0];
    }

    // Reverse-mode sweep from a scalar loss. Gradients accumulate across calls.
    void backward() const {
        if (numel() != 1)
            throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
        if (!node_->requires_grad) return;

        // iterative postorder DFS over parents -> reverse topological order
        std::vector<std::shared_ptr<NodeT>> order;
        std::unordered_set<NodeT*> visited;
        std::vector<std::pair<std::shared_ptr<NodeT>, size_t>> stack;
        stack.emplace_back(node_, 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [cur, idx] = stack.back();
            if (idx < cur->parents.size()) {
                auto child = cur->parents[idx++];
                if (child->requires_grad && visited.insert(child.get()).second)
                    stack.emplace_back(child, 0);
            } else {
                order.push_back(cur);
                stack.pop_back();
            }
        }
        // interior nodes restart from zero each sweep; only leaves accumulate
        for (auto& n : order)
            if (n->backward_fn && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));
        node_->ensure_grad()[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }

    std::shared_ptr<NodeT> node() const { return node_; }

    // Marks this tensor as an op result depending on `parents`. No-op when
    // recording is off or no parent needs gradients.
    void attach(std::vector<std::shared_ptr<NodeT>> parents,
                std::function<void(NodeT&)> backward_fn) {
        if (!grad_recording_enabled()) return;
        bool needed = false;
        for (auto& p : parents)
            if (p->requires_grad) needed = true;
        if (!needed) return;
        node_->requires_grad = true;
        node_->parents = std::move(parents);
        node_->backward_fn = std::move(backward_fn);
    }

  private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
        for (size_t i = 0; i < shape.size(); ++i)
            if (shape[i] < 1)
                throw DimensionError("tensor axis " + std::to_string(i) + " has non-positive size " +
                                     std::to_string(shape[i]));
    }

    std::shared_ptr<NodeT> node_;
};

#ifndef NDEBUG
#define EMONEXT_CHECK_FINITE 1
#endif

template <typename T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
#ifdef EMONEXT_CHECK_FINITE
    for (T v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
#else
    (void)t;
    (void)op;
#endif
}

template <typename T>
inline bool tape_needed(const Tensor<T>& a) {
    return grad_recording_enabled() && a.requires_grad();
}
template <typename T>
inline bool tape_needed(const Tensor<T>& a, const Tensor<T>& b) {
    return grad_recording_enabled() && (a.requires_grad() || b.requires_grad());
}
template <typename T>
inline bool tape_needed(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
    return grad_recording_enabled() && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
    if (tape_needed(a, b)) {
        auto an = a.node(), bn = b.node();
        out.attach({an, bn}, [an, bn](detail::Node<T>& o) {
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
            }
        });
    }
    debug_check_finite(out, "add");
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
    if (tape_needed(a, b)) {
        auto an = a.node(), bn = b.node();
        out.attach({an, bn}, [an, bn](detail::Node<T>& o) {
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
            }
        });
    }
    debug_check_finite(out, "sub");
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
    if (tape_needed(a, b)) {
        auto an = a.node(), bn = b.node();
        out.attach({an, bn}, [an, bn](detail::Node<T>& o) {
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->data[i];
            }
        });
    }
    debug_check_finite(out, "mul");
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + s;
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        });
    }
    debug_check_finite(out, "add_scalar");
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * s;
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an, s](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
        });
    }
    debug_check_finite(out, "mul_scalar");
    return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] > T(0) ? ad[i] : T(0);
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i)
                if (an->data[i] > T(0)) g[i] += o.grad[i];
        });
    }
    return out;
}

// x * Phi(x), exact Gaussian CDF (erf) form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) {
        double x = static_cast<double>(ad[i]);
        od[i] = static_cast<T>(x * 0.5 * (1.0 + std::erf(x * kInvSqrt2)));
    }
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) {
                double x = static_cast<double>(an->data[i]);
                double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                g[i] += o.grad[i] * static_cast<T>(phi + x * pdf);
            }
        });
    }
    debug_check_finite(out, "gelu");
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) {
        double x = static_cast<double>(ad[i]);
        od[i] = static_cast<T>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                      : std::exp(x) / (1.0 + std::exp(x)));
    }
    if (tape_needed(a)) {
        auto an = a.node();
        // the output values come from the node passed to the callback; a
        // captured self-pointer would make the tape a reference cycle
        out.attach({an}, [an](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) {
                T y = o.data[i];
                g[i] += o.grad[i] * y * (T(1) - y);
            }
        });
    }
    debug_check_finite(out, "sigmoid");
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    T inv = T(1) / static_cast<T>(a.numel());
    T acc = 0;
    for (T v : a.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc * inv);
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an, inv](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * inv;
        });
    }
    return out;
}

inline void check_axis(int64_t axis, int64_t ndim, const char* op) {
    if (axis < 0 || axis >= ndim)
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for rank " + std::to_string(ndim));
}

// mean over one axis; that axis is removed from the output shape
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int64_t axis) {
    check_axis(axis, a.ndim(), "mean_axis");
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
    int64_t extent = s[static_cast<size_t>(axis)];

    Shape out_shape;
    for (int64_t i = 0; i < a.ndim(); ++i)
        if (i != axis) out_shape.push_back(s[static_cast<size_t>(i)]);
    if (out_shape.empty()) out_shape.push_back(1);

    Tensor<T> out(out_shape);
    const auto& ad = a.data();
    auto& od = out.data();
    T inv = T(1) / static_cast<T>(extent);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            T acc = 0;
            for (int64_t k = 0; k < extent; ++k)
                acc += ad[static_cast<size_t>((o * extent + k) * inner + in)];
            od[static_cast<size_t>(o * inner + in)] = acc * inv;
        }
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an, outer, inner, extent, inv](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t in = 0; in < inner; ++in) {
                    T go = o.grad[static_cast<size_t>(ou * inner + in)] * inv;
                    for (int64_t k = 0; k < extent; ++k)
                        g[static_cast<size_t>((ou * extent + k) * inner + in)] += go;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(new_shape));
    Tensor<T> out(std::move(new_shape), a.data());
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int64_t>& perm) {
    int64_t nd = a.ndim();
    if (static_cast<int64_t>(perm.size()) != nd)
        throw DimensionError("permute: permutation rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(nd), false);
    for (int64_t p : perm) {
        check_axis(p, nd, "permute");
        if (seen[static_cast<size_t>(p)]) throw DimensionError("permute: duplicate axis");
        seen[static_cast<size_t>(p)] = true;
    }

    const Shape& s = a.shape();
    Shape out_shape(static_cast<size_t>(nd));
    for (int64_t i = 0; i < nd; ++i)
        out_shape[static_cast<size_t>(i)] = s[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
    for (int64_t i = nd - 2; i >= 0; --i)
        in_strides[static_cast<size_t>(i)] =
            in_strides[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];

    // in_index(out_flat) mapping via permuted strides
    std::vector<int64_t> perm_strides(static_cast<size_t>(nd));
    for (int64_t i = 0; i < nd; ++i)
        perm_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    Tensor<T> out(out_shape);
    const auto& ad = a.data();
    auto& od = out.data();
    int64_t n = a.numel();
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    std::vector<int64_t> src_index(static_cast<size_t>(n));
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t src = 0;
        for (int64_t i = 0; i < nd; ++i)
            src += idx[static_cast<size_t>(i)] * perm_strides[static_cast<size_t>(i)];
        src_index[static_cast<size_t>(flat)] = src;
        od[static_cast<size_t>(flat)] = ad[static_cast<size_t>(src)];
        for (int64_t i = nd - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    if (tape_needed(a)) {
        auto an = a.node();
        out.attach({an}, [an, src_index = std::move(src_index)](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < src_index.size(); ++i)
                g[static_cast<size_t>(src_index[i])] += o.grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    int64_t nd = parts[0].ndim();
    check_axis(axis, nd, "concat");
    Shape out_shape = parts[0].shape();
    int64_t total_extent = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd) throw DimensionError("concat: rank mismatch");
        for (int64_t i = 0; i < nd; ++i)
            if (i != axis && p.dim(i) != out_shape[static_cast<size_t>(i)])
                throw DimensionError("concat: shape mismatch on axis " + std::to_string(i));
        total_extent += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total_extent;

    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < nd; ++i) inner *= out_shape[static_cast<size_t>(i)];

    Tensor<T> out(out_shape);
    auto& od = out.data();
    int64_t offset = 0;
    for (const auto& p : parts) {
        int64_t ext = p.dim(axis);
        const auto& pd = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(pd.begin() + o * ext * inner, pd.begin() + (o + 1) * ext * inner,
                      od.begin() + (o * total_extent + offset) * inner);
        offset += ext;
    }

    bool needs = false;
    for (const auto& p : parts) needs = needs || p.requires_grad();
    if (grad_recording_enabled() && needs) {
        std::vector<std::shared_ptr<detail::Node<T>>> nodes;
        std::vector<int64_t> extents;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            extents.push_back(p.dim(axis));
        }
        out.attach({nodes.begin(), nodes.end()},
                   [nodes, extents, outer, inner, total_extent](detail::Node<T>& o) {
                       int64_t off = 0;
                       for (size_t pi = 0; pi < nodes.size(); ++pi) {
                           int64_t ext = extents[pi];
                           if (nodes[pi]->requires_grad) {
                               auto& g = nodes[pi]->ensure_grad();
                               for (int64_t ou = 0; ou < outer; ++ou)
                                   for (int64_t k = 0; k < ext * inner; ++k)
                                       g[static_cast<size_t>(ou * ext * inner + k)] +=
                                           o.grad[static_cast<size_t>((ou * total_extent + off) * inner + k)];
                           }
                           off += ext;
                       }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimensionError("matmul: expects rank-2 inputs");
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner axis mismatch " + std::to_string(a.dim(1)) + " vs " +
                             std::to_string(b.dim(0)));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
            T av = ad[static_cast<size_t>(i * k + p)];
            if (av == T(0)) continue;
            for (int64_t j = 0; j < n; ++j)
                od[static_cast<size_t>(i * n + j)] += av * bd[static_cast<size_t>(p * n + j)];
        }
    if (tape_needed(a, b)) {
        auto an = a.node(), bn = b.node();
        out.attach({an, bn}, [an, bn, m, k, n](detail::Node<T>& o) {
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) {
                        T go = o.grad[static_cast<size_t>(i * n + j)];
                        for (int64_t p = 0; p < k; ++p)
                            g[static_cast<size_t>(i * k + p)] += go * bn->data[static_cast<size_t>(p * n + j)];
                    }
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        T av = an->data[static_cast<size_t>(i * k + p)];
                        for (int64_t j = 0; j < n; ++j)
                            g[static_cast<size_t>(p * n + j)] += av * o.grad[static_cast<size_t>(i * n + j)];
                    }
            }
        });
    }
    debug_check_finite(out, "matmul");
    return out;
}

// batched matmul; with transpose_b, b is [B, J, K] and the product is a . b^T
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    if (a.ndim() != 3 || b.ndim() != 3) throw DimensionError("bmm: expects rank-3 inputs");
    if (a.dim(0) != b.dim(0)) throw DimensionError("bmm: batch axis mismatch");
    int64_t bsz = a.dim(0), m = a.dim(1), k = a.dim(2);
    int64_t bk = transpose_b ? b.dim(2) : b.dim(1);
    int64_t n = transpose_b ? b.dim(1) : b.dim(2);
    if (k != bk) throw DimensionError("bmm: inner axis mismatch");

    Tensor<T> out({bsz, m, n});
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (int64_t s = 0; s < bsz; ++s) {
        const T* ap = ad.data() + s * m * k;
        const T* bp = bd.data() + s * (transpose_b ? n * k : k * n);
        T* op = od.data() + s * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
                T acc = 0;
                for (int64_t p = 0; p < k; ++p)
                    acc += ap[i * k + p] * (transpose_b ? bp[j * k + p] : bp[p * n + j]);
                op[i * n + j] = acc;
            }
    }
    if (tape_needed(a, b)) {
        auto an = a.node(), bn = b.node();
        out.attach({an, bn}, [an, bn, bsz, m, k, n, transpose_b](detail::Node<T>& o) {
            for (int64_t s = 0; s < bsz; ++s) {
                const T* ap = an->data.data() + s * m * k;
                const T* bp = bn->data.data() + s * (transpose_b ? n * k : k * n);
                const T* go = o.grad.data() + s * m * n;
                if (an->requires_grad) {
                    T* ga = an->ensure_grad().data() + s * m * k;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t p = 0; p < k; ++p) {
                            T acc = 0;
                            for (int64_t j = 0; j < n; ++j)
                                acc += go[i * n + j] * (transpose_b ? bp[j * k + p] : bp[p * n + j]);
                            ga[i * k + p] += acc;
                        }
                }
                if (bn->requires_grad) {
                    T* gb = bn->ensure_grad().data() + s * (transpose_b ? n * k : k * n);
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) {
                            T go_ij = go[i * n + j];
                            for (int64_t p = 0; p < k; ++p) {
                                if (transpose_b)
                                    gb[j * k + p] += go_ij * ap[i * k + p];
                                else
                                    gb[p * n + j] += go_ij * ap[i * k + p];
                            }
                        }
                }
            }
        });
    }
    debug_check_finite(out, "bmm");
    return out;
}

// y = x . W^T + b for x of shape [.., in], W of shape [out, in]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    if (weight.ndim() != 2) throw DimensionError("linear: weight must be rank 2 [out, in]");
    int64_t in_dim = weight.dim(1), out_dim = weight.dim(0);
    if (x.dim(x.ndim() - 1) != in_dim)
        throw DimensionError("linear: last input axis " + std::to_string(x.dim(x.ndim() - 1)) +
                             " != weight in axis " + std::to_string(in_dim));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_dim))
        throw DimensionError("linear: bias shape must be [out]");

    int64_t rows = x.numel() / in_dim;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    Tensor<T> out(out_shape);
    const auto& xd = x.data();
    const auto& wd = weight.data();
    auto& od = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t o = 0; o < out_dim; ++o) {
            T acc = bias.defined() ? bias.data()[static_cast<size_t>(o)] : T(0);
            const T* xp = xd.data() + r * in_dim;
            const T* wp = wd.data() + o * in_dim;
            for (int64_t i = 0; i < in_dim; ++i) acc += xp[i] * wp[i];
            od[static_cast<size_t>(r * out_dim + o)] = acc;
        }

    bool needs = grad_recording_enabled() &&
                 (x.requires_grad() || weight.requires_grad() ||
                  (bias.defined() && bias.requires_grad()));
    if (needs) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        std::vector<std::shared_ptr<detail::Node<T>>> parents{xn, wn};
        if (bn) parents.push_back(bn);
        out.attach(std::move(parents), [xn, wn, bn, rows, in_dim, out_dim](detail::Node<T>& o) {
            if (xn->requires_grad) {
                auto& g = xn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t od2 = 0; od2 < out_dim; ++od2) {
                        T go = o.grad[static_cast<size_t>(r * out_dim + od2)];
                        const T* wp = wn->data.data() + od2 * in_dim;
                        T* gp = g.data() + r * in_dim;
                        for (int64_t i = 0; i < in_dim; ++i) gp[i] += go * wp[i];
                    }
            }
            if (wn->requires_grad) {
                auto& g = wn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xp = xn->data.data() + r * in_dim;
                    for (int64_t od2 = 0; od2 < out_dim; ++od2) {
                        T go = o.grad[static_cast<size_t>(r * out_dim + od2)];
                        T* gp = g.data() + od2 * in_dim;
                        for (int64_t i = 0; i < in_dim; ++i) gp[i] += go * xp[i];
                    }
                }
            }
            if (bn && bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t od2 = 0; od2 < out_dim; ++od2)
                        g[static_cast<size_t>(od2)] += o.grad[static_cast<size_t>(r * out_dim + od2)];
            }
        });
    }
    debug_check_finite(out, "linear");
    return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int64_t axis) {
    check_axis(axis, a.ndim(), "softmax");
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
    int64_t extent = s[static_cast<size_t>(axis)];

    Tensor<T> out(a.shape());
    const auto& ad = a.data();
    auto& od = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            T mx = ad[static_cast<size_t>(o * extent * inner + in)];
            for (int64_t k = 1; k < extent; ++k)
                mx = std::max(mx, ad[static_cast<size_t>((o * extent + k) * inner + in)]);
            T denom = 0;
            for (int64_t k = 0; k < extent; ++k) {
                size_t ix = static_cast<size_t>((o * extent + k) * inner + in);
                od[ix] = std::exp(ad[ix] - mx);
                denom += od[ix];
            }
            T inv = T(1) / denom;
            for (int64_t k = 0; k < extent; ++k)
                od[static_cast<size_t>((o * extent + k) * inner + in)] *= inv;
        }
    if (tape_needed(a)) {
        auto an = a.node();
        // the output values come from the node passed to the callback; a
        // captured self-pointer would make the tape a reference cycle
        out.attach({an}, [an, outer, inner, extent](detail::Node<T>& o) {
            auto& g = an->ensure_grad();
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t in = 0; in < inner; ++in) {
                    T dot = 0;
                    for (int64_t k = 0; k < extent; ++k) {
                        size_t ix = static_cast<size_t>((ou * extent + k) * inner + in);
                        dot += o.grad[ix] * o.data[ix];
                    }
                    for (int64_t k = 0; k < extent; ++k) {
                        size_t ix = static_cast<size_t>((ou * extent + k) * inner + in);
                        g[ix] += o.data[ix] * (o.grad[ix] - dot);
                    }
                }
        });
    }
    debug_check_finite(out, "softmax");
    return out;
}

}  // namespace emonext
