#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "data.hpp"
#include "geometry.hpp"

namespace escaip {

struct EquivarianceReport {
    std::vector<double> batch_cosines;
    std::vector<std::uint64_t> rotation_seeds;
    double mean = 0.0;
    std::size_t num_batches = 0;
    std::size_t skipped_atoms = 0;
};

inline constexpr double kCosineSkipNorm = 1e-10;

/// Rotational self-consistency of a force predictor. Per batch: draw batch_size systems
/// from `pool` and one Haar rotation R, then score cos(F(Rx)_v, R F(x)_v) averaged over
/// atoms; atoms where either force is shorter than 1e-10 are skipped. The report mean
/// averages batch scores.
///
/// `predict` maps an AtomicSystem to per-atom forces.
template <class Predictor>
EquivarianceReport equivariance_check(Predictor&& predict, const std::vector<AtomicSystem>& pool,
                                      std::size_t num_batches, std::size_t batch_size, std::uint64_t seed) {
    if (pool.empty()) throw ContractError("equivariance_check needs a nonempty validation set");
    if (batch_size < 1) throw ContractError("equivariance_check batch size must be at least 1");
    EquivarianceReport rep;
    rep.num_batches = num_batches;
    double total = 0;
    for (std::size_t b = 0; b < num_batches; ++b) {
        std::mt19937_64 rng(derive_seed(seed, b));
        const std::uint64_t rot_seed = rng();
        const Rotation rot = random_rotation(rot_seed);
        double score = 0;
        std::size_t counted = 0;
        for (std::size_t k = 0; k < batch_size; ++k) {
            const AtomicSystem& x = pool[rng() % pool.size()];
            const std::vector<Vec3> fa = predict(x);
            const std::vector<Vec3> fb = predict(apply_rotation(x, rot));
            for (std::size_t v = 0; v < x.size(); ++v) {
                const Vec3 rfa = rot.apply(fa[v]);
                const double na = norm(rfa), nb = norm(fb[v]);
                if (na < kCosineSkipNorm || nb < kCosineSkipNorm) {
                    ++rep.skipped_atoms;
                    continue;
                }
                score += dot(rfa, fb[v]) / (na * nb);
                ++counted;
            }
        }
        const double batch_score = counted ? score / static_cast<double>(counted) : std::nan("");
        rep.batch_cosines.push_back(batch_score);
        rep.rotation_seeds.push_back(rot_seed);
        total += batch_score;
    }
    rep.mean = num_batches ? total / static_cast<double>(num_batches) : std::nan("");
    return rep;
}

}  // namespace escaip
