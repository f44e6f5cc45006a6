#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "errors.hpp"

namespace escaip {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

/// Orthorhombic periodic cell.
struct Cell {
    Vec3 lengths{};
    std::array<bool, 3> periodic{true, true, true};

    bool operator==(const Cell&) const = default;
};

struct AtomicSystem {
    std::vector<int> species;
    std::vector<Vec3> positions;
    std::optional<Cell> cell;
    std::optional<double> energy;
    std::optional<std::vector<Vec3>> forces;

    std::size_t size() const noexcept { return species.size(); }

    /// Throws DataError if counts disagree or any coordinate is non-finite.
    void validate() const {
        if (positions.size() != species.size()) {
            throw DataError("species count " + std::to_string(species.size()) + " != position count " +
                            std::to_string(positions.size()));
        }
        if (forces && forces->size() != species.size()) {
            throw DataError("force label count does not match atom count");
        }
        for (const auto& p : positions)
            for (double c : p)
                if (!std::isfinite(c)) throw DataError("non-finite coordinate");
        if (energy && !std::isfinite(*energy)) throw DataError("non-finite energy label");
        if (cell) {
            for (int d = 0; d < 3; ++d)
                if (!(cell->lengths[d] > 0)) throw DataError("cell edge must be positive");
        }
    }

    /// Wraps periodic coordinates into [0, L).
    void wrap() {
        if (!cell) return;
        for (auto& p : positions)
            for (int d = 0; d < 3; ++d) {
                if (!cell->periodic[d]) continue;
                const double l = cell->lengths[d];
                p[d] -= l * std::floor(p[d] / l);
                if (p[d] >= l) p[d] = 0.0;
            }
    }
};

/// Displacement from a to b, minimum image under the system's cell when present.
inline Vec3 displacement(const AtomicSystem& sys, const Vec3& a, const Vec3& b) {
    Vec3 d = b - a;
    if (sys.cell) {
        for (int k = 0; k < 3; ++k) {
            if (!sys.cell->periodic[k]) continue;
            const double l = sys.cell->lengths[k];
            d[k] -= l * std::round(d[k] / l);
        }
    }
    return d;
}

/// Padded neighbor table. Slot (i, s) is row-major at i * max_neighbors + s. unit_dirs
/// point from the center atom to its neighbor.
struct NeighborGraph {
    static constexpr long kSentinel = -1;

    std::size_t num_atoms = 0;
    std::size_t max_neighbors = 0;
    double cutoff = 0.0;
    std::vector<long> neighbor_index;
    std::vector<std::uint8_t> valid_mask;
    std::vector<Vec3> unit_dirs;
    std::vector<double> distances;

    std::size_t slot(std::size_t atom, std::size_t s) const { return atom * max_neighbors + s; }
    bool valid(std::size_t atom, std::size_t s) const { return valid_mask[slot(atom, s)] != 0; }

    std::size_t valid_count(std::size_t atom) const {
        std::size_t n = 0;
        for (std::size_t s = 0; s < max_neighbors; ++s) n += valid(atom, s);
        return n;
    }
};

/// Radius graph keeping at most max_neighbors nearest neighbors per atom (ties broken by
/// ascending atom index). O(N^2) scan with minimum image for periodic cells.
inline NeighborGraph build_neighbor_graph(const AtomicSystem& system, double cutoff, std::size_t max_neighbors) {
    if (!(cutoff > 0)) throw ConfigError("cutoff must be positive");
    if (max_neighbors < 1) throw ConfigError("max_neighbors must be at least 1");
    system.validate();
    if (system.cell) {
        for (int d = 0; d < 3; ++d) {
            if (system.cell->periodic[d] && !(cutoff < 0.5 * system.cell->lengths[d])) {
                throw ConfigError("cutoff " + std::to_string(cutoff) +
                                  " violates the minimum-image bound for cell edge " +
                                  std::to_string(system.cell->lengths[d]));
            }
        }
    }
    const std::size_t n = system.size();
    NeighborGraph g;
    g.num_atoms = n;
    g.max_neighbors = max_neighbors;
    g.cutoff = cutoff;
    g.neighbor_index.assign(n * max_neighbors, NeighborGraph::kSentinel);
    g.valid_mask.assign(n * max_neighbors, 0);
    g.unit_dirs.assign(n * max_neighbors, Vec3{0, 0, 0});
    g.distances.assign(n * max_neighbors, 0.0);

    struct Candidate {
        double dist;
        std::size_t index;
        Vec3 d;
    };
    std::vector<Candidate> cand;
    for (std::size_t i = 0; i < n; ++i) {
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const Vec3 d = displacement(system, system.positions[i], system.positions[j]);
            const double r = norm(d);
            if (r > 0 && r <= cutoff) cand.push_back({r, j, d});
        }
        std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
            return a.dist < b.dist || (a.dist == b.dist && a.index < b.index);
        });
        const std::size_t keep = std::min(cand.size(), max_neighbors);
        for (std::size_t s = 0; s < keep; ++s) {
            const std::size_t k = g.slot(i, s);
            g.neighbor_index[k] = static_cast<long>(cand[s].index);
            g.valid_mask[k] = 1;
            g.distances[k] = cand[s].dist;
            g.unit_dirs[k] = (1.0 / cand[s].dist) * cand[s].d;
        }
    }
    return g;
}

/// Proper rotation matrix, row-major.
struct Rotation {
    std::array<std::array<double, 3>, 3> m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

    static Rotation identity() { return {}; }

    Vec3 apply(const Vec3& v) const {
        return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
                m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
    }

    Rotation transposed() const {
        Rotation r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
        return r;
    }

    double determinant() const {
        return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
               m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    }

    /// Rotation by angle (radians) about a unit axis.
    static Rotation axis_angle(const Vec3& axis, double angle) {
        const double c = std::cos(angle), s = std::sin(angle), t = 1 - c;
        const double x = axis[0], y = axis[1], z = axis[2];
        Rotation r;
        r.m = {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
                {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
                {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
        return r;
    }
};

/// Haar-uniform rotation from a normalized Gaussian quaternion.
inline Rotation random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    double q[4];
    double nrm = 0;
    do {
        nrm = 0;
        for (double& c : q) {
            c = normal(rng);
            nrm += c * c;
        }
    } while (nrm < 1e-12);
    nrm = std::sqrt(nrm);
    const double w = q[0] / nrm, x = q[1] / nrm, y = q[2] / nrm, z = q[3] / nrm;
    Rotation r;
    r.m = {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
            {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
            {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
    return r;
}

inline Rotation random_rotation(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return random_rotation(rng);
}

/// Maps positions and force labels x -> R x. Periodic systems are rejected unless R
/// is the identity, since only orthorhombic cells aligned with the axes are supported.
inline AtomicSystem apply_rotation(const AtomicSystem& system, const Rotation& rot) {
    if (system.cell) {
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                if (std::abs(rot.m[i][j] - (i == j ? 1.0 : 0.0)) > 0) {
                    throw ConfigError("cannot rotate a periodic orthorhombic system");
                }
    }
    AtomicSystem out = system;
    for (auto& p : out.positions) p = rot.apply(p);
    if (out.forces)
        for (auto& f : *out.forces) f = rot.apply(f);
    return out;
}

inline AtomicSystem translate(const AtomicSystem& system, const Vec3& shift) {
    AtomicSystem out = system;
    for (auto& p : out.positions) p = p + shift;
    out.wrap();
    return out;
}

/// Reorders atoms so that new atom k is old atom order[k].
inline AtomicSystem permute_atoms(const AtomicSystem& system, const std::vector<std::size_t>& order) {
    AtomicSystem out = system;
    for (std::size_t k = 0; k < order.size(); ++k) {
        out.species[k] = system.species[order[k]];
        out.positions[k] = system.positions[order[k]];
        if (out.forces) (*out.forces)[k] = (*system.forces)[order[k]];
    }
    return out;
}

}  // namespace escaip
