// Rotational consistency of an untrained model next to the analytic Lennard-Jones
// forces, which are exactly equivariant.

#include <cstdio>

#include "escaip/escaip.hpp"

using namespace escaip;

int main() {
    SyntheticSpec spec;
    spec.count = 32;
    spec.seed = 11;
    const auto pool = synth_generate(spec);

    ModelConfig cfg = ModelConfig::tiny();
    fit_normalization(cfg, pool);
    const auto model = Model<float>::create(cfg, 11);
    const auto pot = spec.make_potential();

    const auto learned = equivariance_check([&](const AtomicSystem& s) { return model.predict(s).forces; }, pool, 16, 4, 1);
    const auto exact = equivariance_check([&](const AtomicSystem& s) { return pot.energy_forces(s).second; }, pool, 16, 4, 1);
    std::printf("untrained model: mean cosine %.4f\n", learned.mean);
    std::printf("analytic forces: mean cosine %.12f\n", exact.mean);
}
