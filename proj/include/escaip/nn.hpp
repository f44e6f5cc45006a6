#pragma once

#include <cmath>
#include <random>
#include <string>

#include "autodiff.hpp"

namespace escaip::nn {

/// Dense layer y = x W + b. W is (in, out); initialized U(-1/sqrt(in), 1/sqrt(in)), b = 0.
struct Linear {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::size_t in = 0;
    std::size_t out = 0;

    template <class T>
    static Linear create(ParamStore<T>& store, const std::string& name, const std::string& group,
                         std::size_t in, std::size_t out, std::mt19937_64& rng) {
        Tensor<T> w(Shape{in, out});
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : w.values()) v = static_cast<T>(u(rng));
        Linear l;
        l.in = in;
        l.out = out;
        l.weight = store.add(name + ".weight", group, std::move(w));
        l.bias = store.add(name + ".bias", group, Tensor<T>(Shape{out}));
        return l;
    }

    template <class T>
    Var<T> operator()(Tape<T>& tape, const ParamStore<T>& store, Var<T> x) const {
        return linear(x, tape.parameter(store, weight), tape.parameter(store, bias));
    }

    static std::size_t count(std::size_t in, std::size_t out) { return in * out + out; }
};

struct LayerNorm {
    std::size_t gain = 0;
    std::size_t bias = 0;

    template <class T>
    static LayerNorm create(ParamStore<T>& store, const std::string& name, const std::string& group,
                            std::size_t width) {
        LayerNorm l;
        l.gain = store.add(name + ".gain", group, Tensor<T>(Shape{width}, T(1)));
        l.bias = store.add(name + ".bias", group, Tensor<T>(Shape{width}));
        return l;
    }

    template <class T>
    Var<T> operator()(Tape<T>& tape, const ParamStore<T>& store, Var<T> x) const {
        return layer_norm(x, tape.parameter(store, gain), tape.parameter(store, bias));
    }

    static std::size_t count(std::size_t width) { return 2 * width; }
};

/// Two-layer feed-forward network: Linear -> SiLU -> Linear.
struct FFN {
    Linear first;
    Linear second;

    template <class T>
    static FFN create(ParamStore<T>& store, const std::string& name, const std::string& group,
                      std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
        return {Linear::create(store, name + ".0", group, in, hidden, rng),
                Linear::create(store, name + ".1", group, hidden, out, rng)};
    }

    template <class T>
    Var<T> operator()(Tape<T>& tape, const ParamStore<T>& store, Var<T> x) const {
        return second(tape, store, silu(first(tape, store, x)));
    }

    static std::size_t count(std::size_t in, std::size_t hidden, std::size_t out) {
        return Linear::count(in, hidden) + Linear::count(hidden, out);
    }
};

}  // namespace escaip::nn
