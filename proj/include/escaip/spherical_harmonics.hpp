#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "errors.hpp"
#include "geometry.hpp"

namespace escaip {

namespace detail {

/// sqrt((2l + 1) / 4 pi * (l - m)! / (l + m)!), tabulated for small l.
inline double sh_normalization(int l, int m) {
    constexpr int kTable = 16;
    auto direct = [](int l, int m) {
        const double lognorm = 0.5 * (std::lgamma(l - m + 1.0) - std::lgamma(l + m + 1.0));
        return std::sqrt((2 * l + 1) / (4 * std::numbers::pi)) * std::exp(lognorm);
    };
    static const std::vector<double> table = [&] {
        std::vector<double> t(kTable * kTable);
        for (int a = 0; a < kTable; ++a)
            for (int b = 0; b <= a; ++b) t[static_cast<std::size_t>(a * kTable + b)] = direct(a, b);
        return t;
    }();
    if (l < kTable) return table[static_cast<std::size_t>(l * kTable + m)];
    return direct(l, m);
}

}  // namespace detail

/// Orthonormal real spherical harmonics of degree l at a unit direction, ordered
/// m = -l..l. No Condon-Shortley phase: Y_{1,-1} ~ y, Y_{1,0} ~ z, Y_{1,1} ~ x.
///
/// The associated Legendre part is evaluated as P_l^m(z) = sin^m(theta) Q_l^m(z) with the
/// three-term recurrence on Q, and sin^m(theta) e^{i m phi} is taken as (x + i y)^m, so
/// no angles are formed and the poles need no special casing.
inline std::vector<double> real_spherical_harmonics(const Vec3& dir, int l) {
    if (l < 0) throw ContractError("spherical harmonic degree must be nonnegative");
    if (std::abs(norm(dir) - 1.0) > 1e-9) throw ContractError("spherical harmonics need a unit direction");
    const double x = dir[0], y = dir[1], z = dir[2];
    std::vector<double> out(static_cast<std::size_t>(2 * l + 1));

    double re = 1.0, im = 0.0;   // (x + i y)^m
    double qmm = 1.0;            // Q_m^m = (2m - 1)!!
    for (int m = 0; m <= l; ++m) {
        if (m > 0) {
            const double nre = re * x - im * y;
            im = re * y + im * x;
            re = nre;
            qmm *= static_cast<double>(2 * m - 1);
        }
        // Q_l^m by upward recurrence in degree.
        double q_prev = qmm, q = qmm;
        if (l > m) {
            q = z * (2 * m + 1) * qmm;
            for (int k = m + 2; k <= l; ++k) {
                const double next = ((2 * k - 1) * z * q - (k + m - 1) * q_prev) / (k - m);
                q_prev = q;
                q = next;
            }
        }
        const double k_lm = detail::sh_normalization(l, m);
        if (m == 0) {
            out[static_cast<std::size_t>(l)] = k_lm * q;
        } else {
            out[static_cast<std::size_t>(l + m)] = std::numbers::sqrt2 * k_lm * q * re;
            out[static_cast<std::size_t>(l - m)] = std::numbers::sqrt2 * k_lm * q * im;
        }
    }
    return out;
}

}  // namespace escaip
