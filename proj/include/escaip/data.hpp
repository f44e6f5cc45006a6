#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "elements.hpp"
#include "parallel.hpp"
#include "potential.hpp"

namespace escaip {

inline constexpr double kBoltzmannEv = 8.617333262e-5;   // eV / K

/// splitmix64 mix of (seed, index) for per-sample streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class SynthMode { Cluster, Box };

struct SyntheticSpec {
    PotentialKind potential = PotentialKind::LennardJones;
    std::vector<SpeciesParams> palette{SpeciesParams{}};
    std::size_t min_atoms = 4;
    std::size_t max_atoms = 8;
    SynthMode mode = SynthMode::Cluster;
    double density = 0.5;                // atoms per sigma^3 (box mode)
    double jitter_temperature = 4000.0;  // K; displacement std = sqrt(kB T / phi''(r_min))
    std::size_t relax_steps = 200;
    std::size_t count = 100;
    std::uint64_t seed = 0;
    double min_distance_factor = 0.7;

    void validate() const {
        if (palette.empty()) throw ConfigError("data.palette must not be empty");
        if (min_atoms < 2 || max_atoms < min_atoms) throw ConfigError("data atom range must satisfy 2 <= min <= max");
        if (!(density > 0)) throw ConfigError("data.density must be positive");
        if (jitter_temperature < 0) throw ConfigError("data.jitter_temperature must be nonnegative");
        if (!(min_distance_factor > 0)) throw ConfigError("data.min_distance_factor must be positive");
        PairPotential(potential, palette);
    }

    PairPotential make_potential() const { return PairPotential(potential, palette); }
};

namespace detail {

inline double min_scaled_distance(const AtomicSystem& s, const PairPotential& pot) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = i + 1; j < s.size(); ++j) {
            const double r = norm(displacement(s, s.positions[i], s.positions[j]));
            best = std::min(best, r / pot.length_scale(s.species[i], s.species[j]));
        }
    return best;
}

inline AtomicSystem synth_one(const SyntheticSpec& spec, std::uint64_t sample_seed) {
    std::mt19937_64 rng(sample_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    PairPotential pot = spec.make_potential();
    const std::size_t span = spec.max_atoms - spec.min_atoms + 1;
    const std::size_t n = spec.min_atoms + static_cast<std::size_t>(rng() % span);

    AtomicSystem base;
    base.species.resize(n);
    for (auto& z : base.species) z = spec.palette[rng() % spec.palette.size()].z;
    double sigma_max = 0;
    for (const auto& p : spec.palette) sigma_max = std::max(sigma_max, pot.length_scale(p.z, p.z));

    double box = 0;
    if (spec.mode == SynthMode::Box) {
        box = std::cbrt(static_cast<double>(n) * std::pow(sigma_max, 3) / spec.density);
        base.cell = Cell{{box, box, box}, {true, true, true}};
        pot.set_periodic_cutoff(0.5 * box * (1 - 1e-9));
    }
    const double radius = sigma_max * (0.6 * std::cbrt(static_cast<double>(n)) + 0.3);

    // Random sequential placement with a soft exclusion radius.
    constexpr int kMaxAttempts = 10000;
    for (std::size_t i = 0; i < n; ++i) {
        int attempt = 0;
        for (;; ++attempt) {
            if (attempt == kMaxAttempts) throw ConfigError("synthetic placement failed; lower data.density");
            Vec3 p;
            if (spec.mode == SynthMode::Box) {
                p = {box * unit(rng), box * unit(rng), box * unit(rng)};
            } else {
                do {
                    p = {2 * unit(rng) - 1, 2 * unit(rng) - 1, 2 * unit(rng) - 1};
                } while (dot(p, p) > 1);
                p = radius * p;
            }
            bool ok = true;
            for (std::size_t j = 0; j < i && ok; ++j) {
                const double r = norm(displacement(base, p, base.positions[j]));
                ok = r >= 0.95 * pot.length_scale(base.species[i], base.species[j]);
            }
            if (ok) {
                base.positions.push_back(p);
                break;
            }
        }
    }

    // Steepest descent with a capped step toward a nearby local minimum.
    const double max_step = 0.05 * sigma_max;
    for (std::size_t it = 0; it < spec.relax_steps; ++it) {
        auto [e, f] = pot.energy_forces(base);
        double fmax = 0;
        for (const auto& v : f) fmax = std::max(fmax, norm(v));
        if (fmax < 1e-6) break;
        const double step = std::min(0.01, max_step / fmax);
        for (std::size_t i = 0; i < n; ++i) base.positions[i] = base.positions[i] + step * f[i];
        base.wrap();
    }

    const double k = pot.minimum_curvature(spec.palette[0].z, spec.palette[0].z);
    const double jitter = std::sqrt(kBoltzmannEv * spec.jitter_temperature / k);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        AtomicSystem s = base;
        for (auto& p : s.positions)
            for (double& c : p) c += jitter * normal(rng);
        if (spec.mode == SynthMode::Cluster) {
            Vec3 com{0, 0, 0};
            for (const auto& p : s.positions) com = com + p;
            com = (1.0 / static_cast<double>(n)) * com;
            for (auto& p : s.positions) p = p - com;
        }
        s.wrap();
        if (min_scaled_distance(s, pot) < spec.min_distance_factor) continue;
        auto [e, f] = pot.energy_forces(s);
        s.energy = e;
        s.forces = std::move(f);
        return s;
    }
    throw ConfigError("synthetic rejection sampling failed after 1000 attempts; lower jitter_temperature");
}

}  // namespace detail

/// Labeled systems with exact analytic energy and forces. Sample i depends only on
/// (seed, i), so output is independent of worker count.
inline std::vector<AtomicSystem> synth_generate(const SyntheticSpec& spec) {
    spec.validate();
    std::vector<AtomicSystem> out(spec.count);
    parallel_for(spec.count, [&](std::size_t i) { out[i] = detail::synth_one(spec, derive_seed(spec.seed, i)); });
    return out;
}

// ---------------------------------------------------------------------------
// Extended XYZ

class UnsupportedCellError : public DataError {
   public:
    using DataError::DataError;
};

namespace detail {

/// key=value pairs of an extended-XYZ comment line; values may be double-quoted.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& line, std::size_t lineno) {
    std::vector<std::pair<std::string, std::string>> kv;
    std::size_t i = 0;
    auto skip_ws = [&] {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    };
    while (true) {
        skip_ws();
        if (i >= line.size()) break;
        std::size_t k0 = i;
        while (i < line.size() && line[i] != '=' && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::string key = line.substr(k0, i - k0);
        if (i >= line.size() || line[i] != '=') {
            kv.emplace_back(key, "T");   // bare flag
            continue;
        }
        ++i;
        std::string value;
        if (i < line.size() && line[i] == '"') {
            const std::size_t close = line.find('"', i + 1);
            if (close == std::string::npos) {
                throw DataError("line " + std::to_string(lineno) + ": unterminated quote");
            }
            value = line.substr(i + 1, close - i - 1);
            i = close + 1;
        } else {
            std::size_t v0 = i;
            while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
            value = line.substr(v0, i - v0);
        }
        kv.emplace_back(key, value);
    }
    return kv;
}

inline double parse_double(const std::string& tok, std::size_t lineno) {
    try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw DataError("line " + std::to_string(lineno) + ": bad number '" + tok + "'");
    }
}

inline std::string fmt10(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace detail

/// Parses every frame of an extended-XYZ stream. Recognized comment keys: Lattice
/// (must be diagonal), pbc, energy, Properties (species/pos/forces columns).
inline std::vector<AtomicSystem> parse_extxyz(std::istream& is) {
    std::vector<AtomicSystem> frames;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::size_t n = 0;
        {
            std::istringstream ls(line);
            long v = -1;
            std::string rest;
            if (!(ls >> v) || v < 0 || (ls >> rest)) {
                throw DataError("line " + std::to_string(lineno) + ": expected atom count");
            }
            n = static_cast<std::size_t>(v);
        }
        if (!std::getline(is, line)) throw DataError("line " + std::to_string(lineno + 1) + ": missing comment line");
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();

        AtomicSystem sys;
        struct Column {
            std::string name;
            char type;
            int width;
        };
        std::vector<Column> columns{{"species", 'S', 1}, {"pos", 'R', 3}};
        std::array<bool, 3> pbc{true, true, true};
        bool pbc_given = false;
        std::optional<std::array<double, 9>> lattice;
        for (const auto& [key, value] : detail::parse_key_values(line, lineno)) {
            if (key == "Lattice") {
                std::istringstream vs(value);
                std::array<double, 9> l{};
                std::string tok;
                for (double& c : l) {
                    if (!(vs >> tok)) throw DataError("line " + std::to_string(lineno) + ": Lattice needs 9 numbers");
                    c = detail::parse_double(tok, lineno);
                }
                lattice = l;
            } else if (key == "pbc") {
                std::istringstream vs(value);
                std::string tok;
                for (bool& b : pbc) {
                    if (!(vs >> tok)) throw DataError("line " + std::to_string(lineno) + ": pbc needs 3 flags");
                    b = tok == "T" || tok == "True" || tok == "true" || tok == "1";
                }
                pbc_given = true;
            } else if (key == "energy") {
                sys.energy = detail::parse_double(value, lineno);
            } else if (key == "Properties") {
                columns.clear();
                std::vector<std::string> parts;
                std::stringstream ps(value);
                std::string part;
                while (std::getline(ps, part, ':')) parts.push_back(part);
                if (parts.size() % 3 != 0) throw DataError("line " + std::to_string(lineno) + ": malformed Properties");
                for (std::size_t k = 0; k < parts.size(); k += 3) {
                    const int w = static_cast<int>(detail::parse_double(parts[k + 2], lineno));
                    if (parts[k + 1].size() != 1 || w < 1) {
                        throw DataError("line " + std::to_string(lineno) + ": malformed Properties");
                    }
                    columns.push_back({parts[k], parts[k + 1][0], w});
                }
            }
        }
        if (lattice) {
            const auto& l = *lattice;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c)
                    if (r != c && l[static_cast<std::size_t>(3 * r + c)] != 0.0) {
                        throw UnsupportedCellError("line " + std::to_string(lineno) +
                                                   ": non-orthorhombic lattice is not supported");
                    }
            sys.cell = Cell{{l[0], l[4], l[8]}, pbc};
        } else if (pbc_given && (pbc[0] || pbc[1] || pbc[2])) {
            throw DataError("line " + std::to_string(lineno) + ": pbc without Lattice");
        }

        bool has_forces = false;
        for (const auto& c : columns) has_forces = has_forces || c.name == "forces" || c.name == "force";
        if (has_forces) sys.forces.emplace();
        for (std::size_t a = 0; a < n; ++a) {
            if (!std::getline(is, line)) {
                throw DataError("line " + std::to_string(lineno + 1) + ": expected " + std::to_string(n) +
                                " atom lines, file ended");
            }
            ++lineno;
            std::istringstream ls(line);
            std::vector<std::string> toks;
            for (std::string t; ls >> t;) toks.push_back(t);
            std::size_t pos = 0;
            Vec3 xyz{}, frc{};
            int z = -1;
            bool got_pos = false;
            for (const auto& c : columns) {
                if (pos + static_cast<std::size_t>(c.width) > toks.size()) {
                    throw DataError("line " + std::to_string(lineno) + ": too few columns");
                }
                if (c.name == "species" || c.name == "Z") {
                    z = atomic_number(toks[pos]);
                } else if (c.name == "pos" && c.width == 3) {
                    for (std::size_t d = 0; d < 3; ++d) xyz[d] = detail::parse_double(toks[pos + d], lineno);
                    got_pos = true;
                } else if ((c.name == "forces" || c.name == "force") && c.width == 3) {
                    for (std::size_t d = 0; d < 3; ++d) frc[d] = detail::parse_double(toks[pos + d], lineno);
                }
                pos += static_cast<std::size_t>(c.width);
            }
            if (pos != toks.size()) throw DataError("line " + std::to_string(lineno) + ": unexpected extra columns");
            if (z < 0 || !got_pos) throw DataError("line " + std::to_string(lineno) + ": missing species or pos");
            sys.species.push_back(z);
            sys.positions.push_back(xyz);
            if (has_forces) sys.forces->push_back(frc);
        }
        try {
            sys.validate();
        } catch (const DataError& e) {
            throw DataError("frame ending at line " + std::to_string(lineno) + ": " + e.what());
        }
        frames.push_back(std::move(sys));
    }
    return frames;
}

inline std::vector<AtomicSystem> parse_extxyz(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    return parse_extxyz(is);
}

/// Writes frames with 10 significant digits ("%.10g").
inline void write_extxyz(std::ostream& os, const std::vector<AtomicSystem>& frames) {
    for (const auto& s : frames) {
        os << s.size() << '\n';
        std::string comment;
        if (s.cell) {
            const auto& l = s.cell->lengths;
            comment += "Lattice=\"" + detail::fmt10(l[0]) + " 0 0 0 " + detail::fmt10(l[1]) + " 0 0 0 " +
                       detail::fmt10(l[2]) + "\" ";
        }
        comment += "Properties=species:S:1:pos:R:3";
        if (s.forces) comment += ":forces:R:3";
        if (s.energy) comment += " energy=" + detail::fmt10(*s.energy);
        if (s.cell) {
            comment += " pbc=\"";
            for (int d = 0; d < 3; ++d) comment += std::string(d ? " " : "") + (s.cell->periodic[static_cast<std::size_t>(d)] ? "T" : "F");
            comment += "\"";
        }
        os << comment << '\n';
        for (std::size_t i = 0; i < s.size(); ++i) {
            os << element_symbol(s.species[i]);
            for (double c : s.positions[i]) os << ' ' << detail::fmt10(c);
            if (s.forces)
                for (double c : (*s.forces)[i]) os << ' ' << detail::fmt10(c);
            os << '\n';
        }
    }
}

inline void write_extxyz(const std::filesystem::path& path, const std::vector<AtomicSystem>& frames) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    write_extxyz(os, frames);
}

// ---------------------------------------------------------------------------
// Splits and manifests

struct DatasetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
    std::uint64_t seed = 0;
};

/// Deterministic shuffled partition. Sizes are round(ratio * n) for train and val, the
/// remainder goes to test.
inline DatasetSplit split(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed) {
    double total = 0;
    for (double r : ratios) {
        if (r < 0) throw ConfigError("split ratios must be nonnegative");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n))));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
    DatasetSplit s;
    s.seed = seed;
    s.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
    s.val.assign(order.begin() + static_cast<long>(n_train), order.begin() + static_cast<long>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<long>(n_train + n_val), order.end());
    if ((ratios[0] > 0 && s.train.empty()) || (ratios[1] > 0 && s.val.empty()) || (ratios[2] > 0 && s.test.empty())) {
        throw ConfigError("split produced an empty partition for a nonzero ratio");
    }
    return s;
}

template <class V>
std::vector<V> select(const std::vector<V>& all, const std::vector<std::size_t>& idx) {
    std::vector<V> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(all.at(i));
    return out;
}

/// Dataset directory listing: one extended-XYZ file per sample plus split assignment.
struct Manifest {
    struct Entry {
        std::string file;
        std::string split;
    };
    std::uint64_t seed = 0;
    std::array<double, 3> ratios{0.95, 0.05, 0.0};
    std::vector<Entry> entries;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["version"] = 1;
        j["seed"] = seed;
        j["ratios"] = ratios;
        j["samples"] = nlohmann::json::array();
        for (const auto& e : entries) j["samples"].push_back({{"file", e.file}, {"split", e.split}});
        return j;
    }

    static Manifest from_json(const nlohmann::json& j) {
        Manifest m;
        try {
            if (j.at("version").get<int>() != 1) throw DataError("unsupported manifest version");
            m.seed = j.at("seed").get<std::uint64_t>();
            m.ratios = j.at("ratios").get<std::array<double, 3>>();
            for (const auto& s : j.at("samples")) m.entries.push_back({s.at("file").get<std::string>(), s.at("split").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("malformed manifest: ") + e.what());
        }
        return m;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("cannot write " + path.string());
        os << to_json().dump(2) << '\n';
    }

    static Manifest load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw DataError("cannot open " + path.string());
        try {
            return from_json(nlohmann::json::parse(is));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("manifest " + path.string() + ": " + e.what());
        }
    }
};

struct Dataset {
    std::vector<AtomicSystem> train;
    std::vector<AtomicSystem> val;
    std::vector<AtomicSystem> test;
};

/// Writes sample_XXXXX.xyz files and manifest.json into dir.
inline Manifest write_dataset(const std::filesystem::path& dir, const std::vector<AtomicSystem>& systems,
                              const std::array<double, 3>& ratios, std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    const DatasetSplit s = split(systems.size(), ratios, seed);
    std::vector<std::string> tag(systems.size());
    for (auto i : s.train) tag[i] = "train";
    for (auto i : s.val) tag[i] = "val";
    for (auto i : s.test) tag[i] = "test";
    Manifest m;
    m.seed = seed;
    m.ratios = ratios;
    for (std::size_t i = 0; i < systems.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%05zu.xyz", i);
        write_extxyz(dir / name, std::vector<AtomicSystem>{systems[i]});
        m.entries.push_back({name, tag[i]});
    }
    m.save(dir / "manifest.json");
    return m;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const Manifest m = Manifest::load(dir / "manifest.json");
    Dataset d;
    for (const auto& e : m.entries) {
        auto frames = parse_extxyz(dir / e.file);
        auto& dst = e.split == "train" ? d.train : e.split == "val" ? d.val : e.split == "test" ? d.test
                                                                                   : throw DataError("unknown split '" + e.split + "'");
        for (auto& f : frames) dst.push_back(std::move(f));
    }
    return d;
}

}  // namespace escaip
