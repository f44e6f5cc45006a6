#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "escaip/escaip.hpp"

namespace testutil {

using namespace escaip;

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    std::normal_distribution<double> nd(0.0, scale);
    for (auto& v : t.values()) v = nd(rng);
    return t;
}

using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheck {
    double max_rel = 0.0;   // over elements with max(|analytic|, |numeric|) > floor
    double max_abs = 0.0;
};

/// Central differences of f with respect to every input element.
inline GradCheck check_gradients(const ScalarFn& f, std::vector<Tensor<double>> inputs, double h = 1e-6,
                                 double floor = 1e-8) {
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& t : inputs) vars.push_back(tape.push(t, true, nullptr));
        Var<double> loss = f(tape, vars);
        tape.backward(loss);
        for (const auto& v : vars) {
            Tensor<double> g(v.shape());
            if (tape.has_grad(v.id)) std::copy_n(tape.grad(v.id), g.size(), g.data());
            analytic.push_back(std::move(g));
        }
    }
    auto eval = [&](const std::vector<Tensor<double>>& in) {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& t : in) vars.push_back(tape.constant(t));
        return f(tape, vars).value()[0];
    };
    GradCheck r;
    for (std::size_t a = 0; a < inputs.size(); ++a)
        for (std::size_t k = 0; k < inputs[a].size(); ++k) {
            const double x0 = inputs[a][k];
            inputs[a][k] = x0 + h;
            const double fp = eval(inputs);
            inputs[a][k] = x0 - h;
            const double fm = eval(inputs);
            inputs[a][k] = x0;
            const double num = (fp - fm) / (2 * h);
            const double ana = analytic[a][k];
            const double diff = std::abs(num - ana);
            r.max_abs = std::max(r.max_abs, diff);
            const double mag = std::max(std::abs(num), std::abs(ana));
            if (mag > floor) r.max_rel = std::max(r.max_rel, diff / mag);
        }
    return r;
}

/// Weighted sum with fixed random weights, so every output element influences the loss.
inline Var<double> probe(Tape<double>& tape, Var<double> x, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return sum(mul(x, tape.constant(random_tensor(x.shape(), rng))));
}

/// Random non-periodic cluster with no pair closer than min_dist.
inline AtomicSystem random_cluster(std::size_t n, std::mt19937_64& rng, double box = 2.0, double min_dist = 0.8,
                                   int z = 18) {
    std::uniform_real_distribution<double> u(-box / 2, box / 2);
    AtomicSystem s;
    while (s.size() < n) {
        Vec3 p{u(rng), u(rng), u(rng)};
        bool ok = true;
        for (const auto& q : s.positions) ok = ok && norm(p - q) >= min_dist;
        if (!ok) continue;
        s.species.push_back(z);
        s.positions.push_back(p);
    }
    return s;
}

inline Vec3 random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Vec3 v{nd(rng), nd(rng), nd(rng)};
    return (1.0 / norm(v)) * v;
}

/// Small model for fast unit tests.
inline ModelConfig micro_config() {
    ModelConfig c;
    c.num_blocks = 2;
    c.num_heads = 2;
    c.message_size = 8;
    c.node_width = 8;
    c.edge_width = 6;
    c.ffn_width = 10;
    c.readout_width = 4;
    c.head_width = 6;
    c.max_neighbors = 4;
    c.cutoff = 2.5;
    c.l_max = 4;
    c.rbf_count = 6;
    c.max_z = 20;
    return c;
}

}  // namespace testutil
