#pragma once

#include <array>
#include <string>
#include <string_view>

#include "errors.hpp"

namespace escaip {

namespace detail {
struct Element {
    std::string_view symbol;
    double mass;   // amu
};

inline constexpr std::array<Element, 37> kElements{{
    {"X", 1.0},      {"H", 1.008},    {"He", 4.0026},  {"Li", 6.94},    {"Be", 9.0122},  {"B", 10.81},
    {"C", 12.011},   {"N", 14.007},   {"O", 15.999},   {"F", 18.998},   {"Ne", 20.180},  {"Na", 22.990},
    {"Mg", 24.305},  {"Al", 26.982},  {"Si", 28.085},  {"P", 30.974},   {"S", 32.06},    {"Cl", 35.45},
    {"Ar", 39.948},  {"K", 39.098},   {"Ca", 40.078},  {"Sc", 44.956},  {"Ti", 47.867},  {"V", 50.942},
    {"Cr", 51.996},  {"Mn", 54.938},  {"Fe", 55.845},  {"Co", 58.933},  {"Ni", 58.693},  {"Cu", 63.546},
    {"Zn", 65.38},   {"Ga", 69.723},  {"Ge", 72.630},  {"As", 74.922},  {"Se", 78.971},  {"Br", 79.904},
    {"Kr", 83.798},
}};
}  // namespace detail

inline constexpr int kMaxTabulatedZ = 36;

inline double atomic_mass(int z) {
    if (z < 1 || z > kMaxTabulatedZ) throw DataError("no mass tabulated for Z=" + std::to_string(z));
    return detail::kElements[static_cast<std::size_t>(z)].mass;
}

inline std::string element_symbol(int z) {
    if (z < 1 || z > kMaxTabulatedZ) return std::to_string(z);
    return std::string(detail::kElements[static_cast<std::size_t>(z)].symbol);
}

/// Element symbol or a bare atomic number.
inline int atomic_number(std::string_view token) {
    for (int z = 1; z <= kMaxTabulatedZ; ++z)
        if (detail::kElements[static_cast<std::size_t>(z)].symbol == token) return z;
    int z = 0;
    for (char c : token) {
        if (c < '0' || c > '9') throw DataError("unknown species '" + std::string(token) + "'");
        z = z * 10 + (c - '0');
    }
    if (token.empty() || z < 1) throw DataError("unknown species '" + std::string(token) + "'");
    return z;
}

}  // namespace escaip
