#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <utility>
#include <vector>

#include "geometry.hpp"

namespace escaip {

enum class PotentialKind { LennardJones, Morse };

/// Per-species parameters. LJ uses (epsilon, sigma); Morse uses (depth, stiffness, r0).
struct SpeciesParams {
    int z = 18;
    double epsilon = 1.0;
    double sigma = 1.0;
    double depth = 1.0;
    double stiffness = 1.5;
    double r0 = 1.122462048309373;   // 2^(1/6)

    bool operator==(const SpeciesParams&) const = default;
};

struct PairParams {
    double a = 1.0;   // epsilon (LJ) or depth (Morse)
    double b = 1.0;   // sigma (LJ) or stiffness (Morse)
    double c = 0.0;   // unused (LJ) or r0 (Morse)
};

/// Analytic pair potential with Lorentz-Berthelot mixing (LJ) or geometric/arithmetic
/// mixing (Morse). Non-periodic systems sum all pairs; periodic systems use minimum
/// image with the energy shifted to zero at `periodic_cutoff`.
class PairPotential {
   public:
    PairPotential(PotentialKind kind, std::vector<SpeciesParams> palette, double periodic_cutoff = 0.0)
        : kind_(kind), palette_(std::move(palette)), periodic_cutoff_(periodic_cutoff) {
        if (palette_.empty()) throw ConfigError("potential palette is empty");
        for (const auto& s : palette_) {
            const bool ok = kind_ == PotentialKind::LennardJones ? (s.epsilon > 0 && s.sigma > 0)
                                                                 : (s.depth > 0 && s.stiffness > 0 && s.r0 > 0);
            if (!ok) throw ConfigError("pair parameters must be positive");
        }
    }

    static PairPotential lennard_jones(double epsilon = 1.0, double sigma = 1.0, int z = 18) {
        SpeciesParams s;
        s.z = z;
        s.epsilon = epsilon;
        s.sigma = sigma;
        return PairPotential(PotentialKind::LennardJones, {s});
    }

    PotentialKind kind() const { return kind_; }
    const std::vector<SpeciesParams>& palette() const { return palette_; }

    PairParams pair(int zi, int zj) const {
        const auto& a = lookup(zi);
        const auto& b = lookup(zj);
        if (kind_ == PotentialKind::LennardJones) return {std::sqrt(a.epsilon * b.epsilon), 0.5 * (a.sigma + b.sigma), 0.0};
        return {std::sqrt(a.depth * b.depth), 0.5 * (a.stiffness + b.stiffness), 0.5 * (a.r0 + b.r0)};
    }

    /// Length scale of the pair (sigma for LJ, r0 / 2^(1/6) for Morse).
    double length_scale(int zi, int zj) const {
        const auto p = pair(zi, zj);
        return kind_ == PotentialKind::LennardJones ? p.b : p.c / std::pow(2.0, 1.0 / 6.0);
    }

    /// phi(r) and dphi/dr.
    std::pair<double, double> phi(const PairParams& p, double r) const {
        if (kind_ == PotentialKind::LennardJones) {
            const double sr6 = std::pow(p.b / r, 6);
            const double sr12 = sr6 * sr6;
            return {4 * p.a * (sr12 - sr6), 4 * p.a * (-12 * sr12 + 6 * sr6) / r};
        }
        const double e = std::exp(-p.b * (r - p.c));
        return {p.a * ((1 - e) * (1 - e) - 1), 2 * p.a * p.b * e * (1 - e)};
    }

    /// Curvature phi'' at the pair minimum, used to convert temperatures to displacements.
    double minimum_curvature(int zi, int zj) const {
        const auto p = pair(zi, zj);
        if (kind_ == PotentialKind::LennardJones) return 72.0 * p.a / (std::pow(2.0, 1.0 / 3.0) * p.b * p.b);
        return 2 * p.a * p.b * p.b;
    }

    double minimum_distance(int zi, int zj) const {
        const auto p = pair(zi, zj);
        return kind_ == PotentialKind::LennardJones ? std::pow(2.0, 1.0 / 6.0) * p.b : p.c;
    }

    /// Total energy and forces F = -grad E (closed form).
    std::pair<double, std::vector<Vec3>> energy_forces(const AtomicSystem& sys) const {
        const std::size_t n = sys.size();
        std::vector<Vec3> f(n, Vec3{0, 0, 0});
        double e = 0;
        const bool periodic = sys.cell.has_value();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const Vec3 d = displacement(sys, sys.positions[i], sys.positions[j]);   // i -> j
                const double r = norm(d);
                if (periodic && r > periodic_cutoff_) continue;
                const auto pp = pair(sys.species[i], sys.species[j]);
                auto [v, dv] = phi(pp, r);
                if (periodic) v -= phi(pp, periodic_cutoff_).first;
                e += v;
                // dE/dx_j = dv * d / r ; dE/dx_i = -dv * d / r
                for (int k = 0; k < 3; ++k) {
                    const double g = dv * d[static_cast<std::size_t>(k)] / r;
                    f[i][static_cast<std::size_t>(k)] += g;
                    f[j][static_cast<std::size_t>(k)] -= g;
                }
            }
        return {e, f};
    }

    double energy(const AtomicSystem& sys) const { return energy_forces(sys).first; }

    double periodic_cutoff() const { return periodic_cutoff_; }
    void set_periodic_cutoff(double rc) { periodic_cutoff_ = rc; }

   private:
    const SpeciesParams& lookup(int z) const {
        for (const auto& s : palette_)
            if (s.z == z) return s;
        throw DataError("species " + std::to_string(z) + " not in potential palette");
    }

    PotentialKind kind_;
    std::vector<SpeciesParams> palette_;
    double periodic_cutoff_ = 0.0;
};

}  // namespace escaip
