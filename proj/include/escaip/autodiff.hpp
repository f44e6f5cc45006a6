#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation executed through it; Var is a lightweight handle
// to a recorded node. Tape::backward replays the record in reverse, visiting each
// node exactly once. Gradients of parameters shared across uses are summed.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace escaip {

template <class T>
struct Parameter {
    std::string name;
    std::string group;
    Tensor<T> value;
};

/// Ordered collection of named trainable tensors. Parameter ids are insertion indices.
template <class T>
class ParamStore {
   public:
    std::size_t add(std::string name, std::string group, Tensor<T> value) {
        if (index_.contains(name)) {
            throw ContractError("duplicate parameter name '" + name + "'");
        }
        index_.emplace(name, params_.size());
        params_.push_back({std::move(name), std::move(group), std::move(value)});
        return params_.size() - 1;
    }

    std::size_t size() const noexcept { return params_.size(); }
    Parameter<T>& operator[](std::size_t id) { return params_[id]; }
    const Parameter<T>& operator[](std::size_t id) const { return params_[id]; }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

    std::size_t id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ContractError("unknown parameter '" + name + "'");
        }
        return it->second;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

   private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// One tensor per parameter, aligned with ParamStore ids.
template <class T>
using Gradients = std::vector<Tensor<T>>;

template <class T>
Gradients<T> zero_gradients(const ParamStore<T>& store) {
    Gradients<T> g;
    g.reserve(store.size());
    for (const auto& p : store) g.emplace_back(p.value.shape());
    return g;
}

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
};

template <class T>
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    struct Node {
        Tensor<T> value;
        Buffer<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
        long param = -1;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

    /// Leaf bound to a store parameter. Repeated calls return the same node.
    Var<T> parameter(const ParamStore<T>& store, std::size_t id) {
        if (auto it = param_nodes_.find(id); it != param_nodes_.end()) {
            return {this, it->second};
        }
        Var<T> v = push(store[id].value, true, nullptr);
        nodes_[v.id].param = static_cast<long>(id);
        param_nodes_.emplace(id, v.id);
        return v;
    }

    Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
        nodes_.push_back({std::move(value), {}, requires_grad, std::move(fn), -1});
        return {this, nodes_.size() - 1};
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient buffer for node id, zero-allocated on first use.
    T* grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
        return n.grad.data();
    }
    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    /// Populates node gradients of d(loss)/d(node). Clears any previous pass first so
    /// repeated calls give identical results.
    void backward(Var<T> loss) {
        if (loss.tape != this) throw ContractError("loss belongs to a different tape");
        if (value(loss.id).size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                to_string(value(loss.id).shape()));
        }
        for (auto& n : nodes_) n.grad.clear();
        grad(loss.id)[0] = T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    /// Parameter gradients from the last backward pass. Parameters absent from the tape
    /// get zeros.
    Gradients<T> gradients(const ParamStore<T>& store) const {
        Gradients<T> g = zero_gradients(store);
        accumulate_gradients(g);
        return g;
    }

    void accumulate_gradients(Gradients<T>& g) const {
        for (const auto& [pid, nid] : param_nodes_) {
            const auto& n = nodes_[nid];
            if (n.grad.empty()) continue;
            T* dst = g[pid].data();
            for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += n.grad[k];
        }
    }

    /// Count of softmax rows with no valid entry seen so far (isolated atoms).
    std::size_t empty_softmax_rows = 0;
    /// Count of direction vectors that hit the norm guard.
    std::size_t guarded_norms = 0;

   private:
    std::deque<Node> nodes_;
    std::unordered_map<std::size_t, std::size_t> param_nodes_;
};

namespace detail {

template <class T>
Var<T> make_node(Tape<T>& tape, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                 typename Tape<T>::BackwardFn fn) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || tape.requires_grad(v.id);
    return tape.push(std::move(value), rg, rg ? std::move(fn) : nullptr);
}

inline bool is_suffix(const Shape& full, const Shape& tail) {
    if (tail.size() > full.size()) return false;
    return std::equal(tail.begin(), tail.end(), full.end() - static_cast<long>(tail.size()));
}

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
    if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise with trailing-axis broadcasting: b's shape must be a suffix of a's.

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!detail::is_suffix(av.shape(), bv.shape())) {
        throw DimensionError("add: " + to_string(bv.shape()) + " does not broadcast to " +
                             to_string(av.shape()));
    }
    Tensor<T> out(av.shape());
    const std::size_t n = av.size(), m = bv.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % m];
    return detail::make_node(*a.tape, std::move(out), {a, b}, [ai = a.id, bi = b.id, n, m](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        if (t.requires_grad(ai)) {
            T* ga = t.grad(ai);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (t.requires_grad(bi)) {
            T* gb = t.grad(bi);
            for (std::size_t i = 0; i < n; ++i) gb[i % m] += g[i];
        }
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!detail::is_suffix(av.shape(), bv.shape())) {
        throw DimensionError("sub: " + to_string(bv.shape()) + " does not broadcast to " +
                             to_string(av.shape()));
    }
    Tensor<T> out(av.shape());
    const std::size_t n = av.size(), m = bv.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i % m];
    return detail::make_node(*a.tape, std::move(out), {a, b}, [ai = a.id, bi = b.id, n, m](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        if (t.requires_grad(ai)) {
            T* ga = t.grad(ai);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (t.requires_grad(bi)) {
            T* gb = t.grad(bi);
            for (std::size_t i = 0; i < n; ++i) gb[i % m] -= g[i];
        }
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!detail::is_suffix(av.shape(), bv.shape())) {
        throw DimensionError("mul: " + to_string(bv.shape()) + " does not broadcast to " +
                             to_string(av.shape()));
    }
    Tensor<T> out(av.shape());
    const std::size_t n = av.size(), m = bv.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % m];
    return detail::make_node(*a.tape, std::move(out), {a, b}, [ai = a.id, bi = b.id, n, m](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const auto& av = t.value(ai);
        const auto& bv = t.value(bi);
        if (t.requires_grad(ai)) {
            T* ga = t.grad(ai);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i % m];
        }
        if (t.requires_grad(bi)) {
            T* gb = t.grad(bi);
            for (std::size_t i = 0; i < n; ++i) gb[i % m] += g[i] * av[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= s;
    return detail::make_node(*a.tape, std::move(out), {a}, [ai = a.id, s](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        T* ga = t.grad(ai);
        const std::size_t n = t.value(ai).size();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
}

/// x * s row-wise: x is (R, k), s holds R scalars (shape (R) or (R, 1)).
template <class T>
Var<T> mul_rows(Var<T> x, Var<T> s) {
    detail::require_same_tape(x, s);
    const auto& xv = x.value();
    const auto& sv = s.value();
    if (xv.rank() != 2 || sv.size() != xv.dim(0)) {
        throw DimensionError("mul_rows: " + to_string(xv.shape()) + " by " + to_string(sv.shape()));
    }
    const std::size_t rows = xv.dim(0), k = xv.dim(1);
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = xv[r * k + j] * sv[r];
    return detail::make_node(*x.tape, std::move(out), {x, s}, [xi = x.id, si = s.id, rows, k](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const auto& xv = t.value(xi);
        const auto& sv = t.value(si);
        if (t.requires_grad(xi)) {
            T* gx = t.grad(xi);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r * k + j] * sv[r];
        }
        if (t.requires_grad(si)) {
            T* gs = t.grad(si);
            for (std::size_t r = 0; r < rows; ++r) {
                T acc = 0;
                for (std::size_t j = 0; j < k; ++j) acc += g[r * k + j] * xv[r * k + j];
                gs[r] += acc;
            }
        }
    });
}

template <class T>
Var<T> abs(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = std::abs(v);
    return detail::make_node(*a.tape, std::move(out), {a}, [ai = a.id](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const auto& av = t.value(ai);
        T* ga = t.grad(ai);
        for (std::size_t i = 0; i < av.size(); ++i) {
            ga[i] += av[i] > T(0) ? g[i] : (av[i] < T(0) ? -g[i] : T(0));
        }
    });
}

/// x * sigmoid(x)
template <class T>
Var<T> silu(Var<T> a) {
    const auto& av = a.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / (T(1) + std::exp(-av[i]));
    return detail::make_node(*a.tape, std::move(out), {a}, [ai = a.id](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const auto& av = t.value(ai);
        T* ga = t.grad(ai);
        for (std::size_t i = 0; i < av.size(); ++i) {
            const T sg = T(1) / (T(1) + std::exp(-av[i]));
            ga[i] += g[i] * sg * (T(1) + av[i] * (T(1) - sg));
        }
    });
}

/// Huber loss per element: 0.5 x^2 / delta for |x| < delta, |x| - 0.5 delta otherwise.
template <class T>
Var<T> smooth_l1(Var<T> a, T delta) {
    const auto& av = a.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const T x = std::abs(av[i]);
        out[i] = x < delta ? T(0.5) * x * x / delta : x - T(0.5) * delta;
    }
    return detail::make_node(*a.tape, std::move(out), {a}, [ai = a.id, delta](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const auto& av = t.value(ai);
        T* ga = t.grad(ai);
        for (std::size_t i = 0; i < av.size(); ++i) {
            const T x = av[i];
            const T d = std::abs(x) < delta ? x / delta : (x > 0 ? T(1) : T(-1));
            ga[i] += g[i] * d;
        }
    });
}

template <class T>
Var<T> sum(Var<T> a) {
    T acc = 0;
    for (T v : a.value().values()) acc += v;
    Tensor<T> out(Shape{}, acc);
    return detail::make_node(*a.tape, std::move(out), {a}, [ai = a.id](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        T* ga = t.grad(ai);
        const std::size_t n = t.value(ai).size();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
}

template <class T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return detail::make_node(*a.tape, std::move(out), {a}, [ai = a.id](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        T* ga = t.grad(ai);
        const std::size_t n = t.value(ai).size();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* bj = b + j * k;
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            c[i * n + j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            T* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

}  // namespace detail

/// (m, k) x (k, n) -> (m, n)
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw DimensionError("matmul: " + to_string(av.shape()) + " x " + to_string(bv.shape()));
    }
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out(Shape{m, n});
    detail::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
    return detail::make_node(*a.tape, std::move(out), {a, b}, [ai = a.id, bi = b.id, m, k, n](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        if (t.requires_grad(ai)) detail::gemm_nt(g, t.value(bi).data(), t.grad(ai), m, n, k);
        if (t.requires_grad(bi)) detail::gemm_tn(t.value(ai).data(), g, t.grad(bi), m, k, n);
    });
}

/// Batched product. a: (B, m, k); b: (B, k, n), or (B, n, k) when transpose_b.
template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
    detail::require_same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
        av.dim(2) != (transpose_b ? bv.dim(2) : bv.dim(1))) {
        throw DimensionError("bmm: " + to_string(av.shape()) + " x " + to_string(bv.shape()) +
                             (transpose_b ? "^T" : ""));
    }
    const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
    const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
    Tensor<T> out(Shape{batch, m, n});
    for (std::size_t s = 0; s < batch; ++s) {
        const T* as = av.data() + s * m * k;
        const T* bs = bv.data() + s * k * n;
        T* cs = out.data() + s * m * n;
        if (transpose_b)
            detail::gemm_nt(as, bs, cs, m, k, n);
        else
            detail::gemm_nn(as, bs, cs, m, k, n);
    }
    return detail::make_node(*a.tape, std::move(out), {a, b},
                             [ai = a.id, bi = b.id, batch, m, k, n, transpose_b](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const T* av = t.value(ai).data();
        const T* bv = t.value(bi).data();
        const bool ga_on = t.requires_grad(ai), gb_on = t.requires_grad(bi);
        T* ga = ga_on ? t.grad(ai) : nullptr;
        T* gb = gb_on ? t.grad(bi) : nullptr;
        for (std::size_t s = 0; s < batch; ++s) {
            const T* gs = g + s * m * n;
            const T* as = av + s * m * k;
            const T* bs = bv + s * k * n;
            if (transpose_b) {
                // C = A B^T: dA = G B, dB = G^T A
                if (ga_on) detail::gemm_nn(gs, bs, ga + s * m * k, m, n, k);
                if (gb_on) detail::gemm_tn(gs, as, gb + s * k * n, m, n, k);
            } else {
                if (ga_on) detail::gemm_nt(gs, bs, ga + s * m * k, m, n, k);
                if (gb_on) detail::gemm_tn(as, gs, gb + s * k * n, m, k, n);
            }
        }
    });
}

/// Axis permutation for rank <= 4 tensors: out.shape[i] = in.shape[axes[i]].
template <class T>
Var<T> permute(Var<T> a, std::vector<std::size_t> axes) {
    const auto& av = a.value();
    const std::size_t r = av.rank();
    if (axes.size() != r || r > 4) throw DimensionError("permute: bad axes for " + to_string(av.shape()));
    Shape in4(4, 1), out_shape(r);
    std::vector<std::size_t> ax4{0, 1, 2, 3};
    for (std::size_t i = 0; i < r; ++i) {
        in4[4 - r + i] = av.dim(i);
        out_shape[i] = av.dim(axes[i]);
        ax4[4 - r + i] = axes[i] + (4 - r);
    }
    std::array<std::size_t, 4> in_stride{};
    in_stride[3] = 1;
    for (int i = 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in4[i + 1];
    // map[out_flat] = in_flat
    std::vector<std::size_t> map(av.size());
    {
        std::array<std::size_t, 4> od{in4[ax4[0]], in4[ax4[1]], in4[ax4[2]], in4[ax4[3]]};
        std::size_t o = 0;
        for (std::size_t i0 = 0; i0 < od[0]; ++i0)
            for (std::size_t i1 = 0; i1 < od[1]; ++i1)
                for (std::size_t i2 = 0; i2 < od[2]; ++i2)
                    for (std::size_t i3 = 0; i3 < od[3]; ++i3) {
                        std::array<std::size_t, 4> idx{i0, i1, i2, i3};
                        std::size_t in_flat = 0;
                        for (std::size_t d = 0; d < 4; ++d) in_flat += idx[d] * in_stride[ax4[d]];
                        map[o++] = in_flat;
                    }
    }
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = av[map[i]];
    return detail::make_node(*a.tape, std::move(out), {a}, [ai = a.id, map = std::move(map)](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        T* ga = t.grad(ai);
        for (std::size_t i = 0; i < map.size(); ++i) ga[map[i]] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Normalizes over the last axis with epsilon 1e-5, then applies gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias) {
    constexpr T eps = T(1e-5);
    const auto& xv = x.value();
    const std::size_t d = xv.shape().back();
    if (gain.size() != d || bias.size() != d) {
        throw DimensionError("layer_norm: gain/bias width does not match " + to_string(xv.shape()));
    }
    const std::size_t rows = xv.size() / d;
    Tensor<T> out(xv.shape());
    std::vector<T> xhat(xv.size()), rstd(rows);
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(d);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mu) * rstd[r];
            out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
        }
    }
    return detail::make_node(*x.tape, std::move(out), {x, gain, bias},
                             [xi = x.id, gi = gain.id, bi = bias.id, d, rows, xhat = std::move(xhat),
                              rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const auto& gv = t.value(gi);
        if (t.requires_grad(gi) || t.requires_grad(bi)) {
            T* gg = t.requires_grad(gi) ? t.grad(gi) : nullptr;
            T* gb = t.requires_grad(bi) ? t.grad(bi) : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) {
                    if (gg) gg[j] += g[r * d + j] * xhat[r * d + j];
                    if (gb) gb[j] += g[r * d + j];
                }
        }
        if (t.requires_grad(xi)) {
            T* gx = t.grad(xi);
            for (std::size_t r = 0; r < rows; ++r) {
                T m1 = 0, m2 = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const T dy = g[r * d + j] * gv[j];
                    m1 += dy;
                    m2 += dy * xhat[r * d + j];
                }
                m1 /= static_cast<T>(d);
                m2 /= static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const T dy = g[r * d + j] * gv[j];
                    gx[r * d + j] += rstd[r] * (dy - m1 - xhat[r * d + j] * m2);
                }
            }
        }
    });
}

/// Softmax over the last axis restricted to entries with mask != 0. Masked entries get
/// exactly zero weight and their logits are never read. A row with no valid entry
/// yields zeros and is counted in Tape::empty_softmax_rows.
template <class T>
Var<T> masked_softmax(Var<T> logits, std::span<const std::uint8_t> mask) {
    const auto& lv = logits.value();
    if (mask.size() != lv.size() || lv.rank() == 0) {
        throw DimensionError("masked_softmax: mask of " + std::to_string(mask.size()) +
                             " entries for logits " + to_string(lv.shape()));
    }
    const std::size_t len = lv.shape().back();
    const std::size_t rows = lv.size() / len;
    Tensor<T> out(lv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* lr = lv.data() + r * len;
        const std::uint8_t* mr = mask.data() + r * len;
        T* orow = out.data() + r * len;
        bool any = false;
        T mx = 0;
        for (std::size_t j = 0; j < len; ++j) {
            if (!mr[j]) continue;
            mx = any ? std::max(mx, lr[j]) : lr[j];
            any = true;
        }
        if (!any) {
            ++logits.tape->empty_softmax_rows;
            continue;
        }
        T z = 0;
        for (std::size_t j = 0; j < len; ++j) {
            if (!mr[j]) continue;
            orow[j] = std::exp(lr[j] - mx);
            z += orow[j];
        }
        for (std::size_t j = 0; j < len; ++j) orow[j] /= z;
    }
    return detail::make_node(*logits.tape, std::move(out), {logits}, [li = logits.id, len, rows](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const T* p = t.value(self).data();
        T* gl = t.grad(li);
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < len; ++j) dot += g[r * len + j] * p[r * len + j];
            for (std::size_t j = 0; j < len; ++j) {
                gl[r * len + j] += p[r * len + j] * (g[r * len + j] - dot);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Structural ops

/// Concatenate along the last axis; leading shapes must match.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ContractError("concat of nothing");
    Shape lead = parts[0].shape();
    lead.pop_back();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_same_tape(parts[0], p);
        Shape l = p.shape();
        const std::size_t w = l.back();
        l.pop_back();
        if (l != lead) throw DimensionError("concat: leading shape mismatch " + to_string(p.shape()));
        widths.push_back(w);
        total += w;
    }
    const std::size_t rows = numel(lead);
    Shape out_shape = lead;
    out_shape.push_back(total);
    Tensor<T> out(out_shape);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].value();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + off);
        off += widths[k];
    }
    bool rg = false;
    std::vector<std::size_t> ids;
    for (const auto& p : parts) {
        rg = rg || p.tape->requires_grad(p.id);
        ids.push_back(p.id);
    }
    auto& tape = *parts[0].tape;
    typename Tape<T>::BackwardFn fn = [ids, widths, rows, total](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) {
                T* gp = t.grad(ids[k]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j) gp[r * widths[k] + j] += g[r * total + off + j];
            }
            off += widths[k];
        }
    };
    return tape.push(std::move(out), rg, rg ? std::move(fn) : nullptr);
}

/// Rows of x (R, d) picked by index; negative indices produce zero rows.
template <class T>
Var<T> gather_rows(Var<T> x, std::vector<long> index) {
    const auto& xv = x.value();
    if (xv.rank() != 2) throw DimensionError("gather_rows expects a matrix, got " + to_string(xv.shape()));
    const std::size_t rows = xv.dim(0), d = xv.dim(1);
    for (long i : index) {
        if (i >= static_cast<long>(rows)) throw DimensionError("gather_rows index out of range");
    }
    Tensor<T> out(Shape{index.size(), d});
    for (std::size_t k = 0; k < index.size(); ++k) {
        if (index[k] < 0) continue;
        std::copy_n(xv.data() + static_cast<std::size_t>(index[k]) * d, d, out.data() + k * d);
    }
    return detail::make_node(*x.tape, std::move(out), {x}, [xi = x.id, d, index = std::move(index)](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        T* gx = t.grad(xi);
        for (std::size_t k = 0; k < index.size(); ++k) {
            if (index[k] < 0) continue;
            T* dst = gx + static_cast<std::size_t>(index[k]) * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += g[k * d + j];
        }
    });
}

/// (N, d) -> (N, M, d) by repeating each row M times.
template <class T>
Var<T> broadcast_rows(Var<T> x, std::size_t m) {
    const auto& xv = x.value();
    if (xv.rank() != 2) throw DimensionError("broadcast_rows expects a matrix");
    const std::size_t n = xv.dim(0), d = xv.dim(1);
    Tensor<T> out(Shape{n, m, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < m; ++s) std::copy_n(xv.data() + i * d, d, out.data() + (i * m + s) * d);
    return detail::make_node(*x.tape, std::move(out), {x}, [xi = x.id, n, m, d](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        T* gx = t.grad(xi);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t s = 0; s < m; ++s)
                for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[(i * m + s) * d + j];
    });
}

/// Zeroes every (N, M, ...) slot whose mask entry is 0. Writes zeros rather than
/// multiplying, so non-finite values in masked slots never propagate.
template <class T>
Var<T> mask_select(Var<T> x, std::span<const std::uint8_t> mask) {
    const auto& xv = x.value();
    if (mask.empty() || xv.size() % mask.size() != 0) {
        throw DimensionError("mask_select: mask size does not divide " + to_string(xv.shape()));
    }
    const std::size_t inner = xv.size() / mask.size();
    Tensor<T> out(xv.shape());
    for (std::size_t s = 0; s < mask.size(); ++s) {
        if (mask[s]) std::copy_n(xv.data() + s * inner, inner, out.data() + s * inner);
    }
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    return detail::make_node(*x.tape, std::move(out), {x}, [xi = x.id, inner, m = std::move(m)](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        T* gx = t.grad(xi);
        for (std::size_t s = 0; s < m.size(); ++s) {
            if (!m[s]) continue;
            for (std::size_t j = 0; j < inner; ++j) gx[s * inner + j] += g[s * inner + j];
        }
    });
}

/// Masked segment sum: (N, M, d) -> (N, d), summing valid slots in slot order.
template <class T>
Var<T> masked_sum(Var<T> x, std::span<const std::uint8_t> mask) {
    const auto& xv = x.value();
    if (xv.rank() != 3 || mask.size() != xv.dim(0) * xv.dim(1)) {
        throw DimensionError("masked_sum: mask does not match " + to_string(xv.shape()));
    }
    const std::size_t n = xv.dim(0), m = xv.dim(1), d = xv.dim(2);
    Tensor<T> out(Shape{n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < m; ++s) {
            if (!mask[i * m + s]) continue;
            const T* src = xv.data() + (i * m + s) * d;
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += src[j];
        }
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    return detail::make_node(*x.tape, std::move(out), {x}, [xi = x.id, n, m, d, mk = std::move(mk)](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        T* gx = t.grad(xi);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t s = 0; s < m; ++s) {
                if (!mk[i * m + s]) continue;
                for (std::size_t j = 0; j < d; ++j) gx[(i * m + s) * d + j] += g[i * d + j];
            }
    });
}

/// Row-wise g / max(|g|, eps) for a (R, k) matrix. Rows below eps are counted in
/// Tape::guarded_norms.
template <class T>
Var<T> normalize_rows(Var<T> x, T eps) {
    const auto& xv = x.value();
    if (xv.rank() != 2) throw DimensionError("normalize_rows expects a matrix");
    const std::size_t rows = xv.dim(0), k = xv.dim(1);
    Tensor<T> out(xv.shape());
    std::vector<T> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T s = 0;
        for (std::size_t j = 0; j < k; ++j) s += xv[r * k + j] * xv[r * k + j];
        norms[r] = std::sqrt(s);
        if (norms[r] < eps) ++x.tape->guarded_norms;
        const T den = std::max(norms[r], eps);
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = xv[r * k + j] / den;
    }
    return detail::make_node(*x.tape, std::move(out), {x}, [xi = x.id, rows, k, eps, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const T* y = t.value(self).data();
        T* gx = t.grad(xi);
        for (std::size_t r = 0; r < rows; ++r) {
            if (norms[r] < eps) {
                for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r * k + j] / eps;
                continue;
            }
            T dot = 0;
            for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
            for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += (g[r * k + j] - dot * y[r * k + j]) / norms[r];
        }
    });
}

/// Euclidean norm of each row of (R, k) -> (R). Zero rows get zero gradient.
template <class T>
Var<T> row_norms(Var<T> x) {
    const auto& xv = x.value();
    if (xv.rank() != 2) throw DimensionError("row_norms expects a matrix");
    const std::size_t rows = xv.dim(0), k = xv.dim(1);
    Tensor<T> out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        T s = 0;
        for (std::size_t j = 0; j < k; ++j) s += xv[r * k + j] * xv[r * k + j];
        out[r] = std::sqrt(s);
    }
    return detail::make_node(*x.tape, std::move(out), {x}, [xi = x.id, rows, k](Tape<T>& t, std::size_t self) {
        const T* g = t.grad(self);
        const T* nv = t.value(self).data();
        const auto& xv = t.value(xi);
        T* gx = t.grad(xi);
        for (std::size_t r = 0; r < rows; ++r) {
            if (nv[r] == T(0)) continue;
            for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r] * xv[r * k + j] / nv[r];
        }
    });
}

/// x W + b over the last axis of x (any rank >= 2).
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
    Shape s = x.shape();
    const std::size_t in = s.back();
    if (weight.value().rank() != 2 || weight.value().dim(0) != in) {
        throw DimensionError("linear: input " + to_string(s) + " vs weight " + to_string(weight.shape()));
    }
    const std::size_t rows = x.size() / in;
    Var<T> flat = s.size() == 2 ? x : reshape(x, Shape{rows, in});
    Var<T> y = add(matmul(flat, weight), bias);
    if (s.size() == 2) return y;
    s.back() = weight.value().dim(1);
    return reshape(y, s);
}

}  // namespace escaip
