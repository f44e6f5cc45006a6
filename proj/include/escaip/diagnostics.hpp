#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <new>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "elements.hpp"
#include "equivariance.hpp"
#include "memory.hpp"
#include "training.hpp"

namespace escaip {

namespace detail {
inline std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}
inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
}  // namespace detail

// ---------------------------------------------------------------------------
// Equivariance reports

inline void write_equivariance_csv(std::ostream& os, const EquivarianceReport& r) {
    os << "batch,rotation_seed,cosine\n";
    for (std::size_t b = 0; b < r.batch_cosines.size(); ++b)
        os << b << ',' << r.rotation_seeds[b] << ',' << detail::fmt_g(r.batch_cosines[b]) << '\n';
}

inline nlohmann::json equivariance_json(const EquivarianceReport& r) {
    return {{"mean", detail::finite_or_null(r.mean)},
            {"num_batches", r.num_batches},
            {"skipped_atoms", r.skipped_atoms},
            {"rotation_seeds", r.rotation_seeds}};
}

// ---------------------------------------------------------------------------
// Scaling study

struct ScalingVariant {
    std::string label;
    std::string family;
    ModelConfig config;
};

struct ScalingCell {
    std::string label;
    std::string family;
    std::size_t params = 0;
    std::size_t train_size = 0;
    double force_mae = 0.0;    // eV / A
    double energy_mae = 0.0;   // eV / atom
};

struct ScalingFit {
    std::string label;
    std::optional<double> slope;   // empty when fewer than two distinct sizes
    std::size_t points = 0;
};

struct ScalingResult {
    std::vector<ScalingCell> cells;
    std::vector<ScalingFit> fits;
    double max_param_mismatch = 0.0;
};

inline constexpr double kParamMatchTolerance = 0.02;

/// Least-squares slope of log(y) against log(x); empty if the fit is undefined.
inline std::optional<double> loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ContractError("loglog_slope: length mismatch");
    if (xs.size() < 2) return std::nullopt;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!(xs[i] > 0) || !(ys[i] > 0)) throw ContractError("loglog_slope needs positive values");
        mx += std::log(xs[i]);
        my += std::log(ys[i]);
    }
    mx /= static_cast<double>(xs.size());
    my /= static_cast<double>(xs.size());
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = std::log(xs[i]) - mx;
        sxx += dx * dx;
        sxy += dx * (std::log(ys[i]) - my);
    }
    if (sxx == 0) return std::nullopt;
    return sxy / sxx;
}

/// Largest relative parameter-count spread (max / min - 1) within any family.
inline double param_mismatch(const std::vector<ScalingVariant>& variants) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> range;
    for (const auto& v : variants) {
        const std::size_t n = parameter_audit(v.config).total;
        auto [it, fresh] = range.try_emplace(v.family, n, n);
        if (!fresh) {
            it->second.first = std::min(it->second.first, n);
            it->second.second = std::max(it->second.second, n);
        }
    }
    double worst = 0;
    for (const auto& [family, mm] : range)
        worst = std::max(worst, static_cast<double>(mm.second) / static_cast<double>(mm.first) - 1.0);
    return worst;
}

inline void check_param_matching(const std::vector<ScalingVariant>& variants, double tol = kParamMatchTolerance) {
    const double m = param_mismatch(variants);
    if (m > tol) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "scaling variants differ by %.2f%% in parameter count (limit %.2f%%)", 100 * m,
                      100 * tol);
        throw ConfigError(buf);
    }
}

/// An attention-heavy variant (message_size scaled up) and a channel-heavy variant whose
/// ffn_width is chosen to match its parameter count as closely as possible.
inline std::vector<ScalingVariant> matched_variants(const ModelConfig& base, const std::string& family,
                                                    std::size_t attention_factor = 2) {
    ModelConfig at = base;
    at.message_size = base.message_size * attention_factor;
    at.validate();
    const std::size_t target = parameter_audit(at).total;
    ModelConfig ch = base;
    std::size_t best_gap = std::numeric_limits<std::size_t>::max();
    for (std::size_t w = base.ffn_width; w <= base.ffn_width * 64; ++w) {
        ModelConfig c = base;
        c.ffn_width = w;
        const std::size_t n = parameter_audit(c).total;
        const std::size_t gap = n > target ? n - target : target - n;
        if (gap < best_gap) {
            best_gap = gap;
            ch = c;
        }
        if (n > target) break;
    }
    return {{family + "/attention", family, at}, {family + "/channel", family, ch}};
}

/// Trains every (variant, size) cell from the same seed and schedule on the first `size`
/// samples of `train_pool`, then fits the log-log slope of force MAE against train size.
inline ScalingResult scaling_study(const std::vector<ScalingVariant>& variants, const std::vector<AtomicSystem>& train_pool,
                                   const std::vector<AtomicSystem>& val, const std::vector<std::size_t>& data_sizes,
                                   const TrainConfig& tc, std::uint64_t seed) {
    if (variants.empty() || data_sizes.empty()) throw ConfigError("scaling study needs variants and data sizes");
    check_param_matching(variants);
    for (std::size_t n : data_sizes)
        if (n < 1 || n > train_pool.size()) throw ConfigError("scaling data size outside the training pool");
    ScalingResult res;
    res.max_param_mismatch = param_mismatch(variants);
    std::vector<ScalingCell> cells(variants.size() * data_sizes.size());
    parallel_for(cells.size(), [&](std::size_t k) {
        const auto& v = variants[k / data_sizes.size()];
        const std::size_t n = data_sizes[k % data_sizes.size()];
        const std::vector<AtomicSystem> subset(train_pool.begin(), train_pool.begin() + static_cast<std::ptrdiff_t>(n));
        ModelConfig cfg = v.config;
        fit_normalization(cfg, subset);
        auto state = TrainState<float>::init(Model<float>::create(cfg, seed));
        TrainConfig cell_tc = tc;
        cell_tc.seed = seed;
        cell_tc.equivariance_batches = 0;
        train(state, subset, {}, cell_tc);
        const EvalReport ev = evaluate(state.model, val);
        cells[k] = {v.label, v.family, parameter_audit(cfg).total, n, ev.force_mae, ev.energy_mae_per_atom};
    }, 1);
    res.cells = std::move(cells);
    for (const auto& v : variants) {
        std::vector<double> xs, ys;
        for (const auto& c : res.cells)
            if (c.label == v.label) {
                xs.push_back(static_cast<double>(c.train_size));
                ys.push_back(c.force_mae);
            }
        res.fits.push_back({v.label, loglog_slope(xs, ys), xs.size()});
    }
    return res;
}

inline void write_scaling_csv(std::ostream& os, const ScalingResult& r) {
    os << "label,family,params,train_size,force_mae,energy_mae\n";
    for (const auto& c : r.cells)
        os << c.label << ',' << c.family << ',' << c.params << ',' << c.train_size << ',' << detail::fmt_g(c.force_mae)
           << ',' << detail::fmt_g(c.energy_mae) << '\n';
}

inline nlohmann::json scaling_json(const ScalingResult& r) {
    nlohmann::json fits = nlohmann::json::array();
    for (const auto& f : r.fits)
        fits.push_back({{"label", f.label},
                        {"slope", f.slope ? nlohmann::json(*f.slope) : nlohmann::json(nullptr)},
                        {"slope_defined", f.slope.has_value()},
                        {"points", f.points}});
    return {{"fits", fits}, {"max_param_mismatch", r.max_param_mismatch}, {"cells", r.cells.size()}};
}

// ---------------------------------------------------------------------------
// Throughput and memory benchmark

struct BenchmarkConfig {
    std::vector<std::size_t> batch_sizes{1, 2, 4, 8};
    std::size_t repeats = 16;
    std::size_t warmup = 3;
    std::uint64_t seed = 0;
    std::size_t memory_limit_bytes = 0;   // 0: unlimited
};

struct BenchmarkRow {
    std::size_t batch_size = 0;
    std::size_t repeats = 0;
    std::vector<double> samples_per_second;   // one per measured batch
    double mean_sps = 0.0;
    double std_sps = 0.0;
    double peak_bytes_per_sample = 0.0;
    bool capped = false;
};

/// Times inference (featurization plus forward) on randomly sampled batches from
/// `pool`; single-threaded. A batch that exceeds the memory limit yields a capped row.
template <class T>
std::vector<BenchmarkRow> benchmark(const Model<T>& model, const std::vector<AtomicSystem>& pool,
                                    const BenchmarkConfig& cfg) {
    if (pool.empty()) throw ContractError("benchmark needs a nonempty sample pool");
    if (cfg.repeats < 1) throw ConfigError("benchmark repeats must be at least 1");
    std::vector<BenchmarkRow> rows;
    struct LimitGuard {
        explicit LimitGuard(std::size_t b) { MemoryTracker::set_limit(b ? MemoryTracker::current_bytes() + b : 0); }
        ~LimitGuard() { MemoryTracker::set_limit(0); }
    };
    for (std::size_t bi = 0; bi < cfg.batch_sizes.size(); ++bi) {
        const std::size_t b = cfg.batch_sizes[bi];
        if (b < 1) throw ConfigError("benchmark batch sizes must be at least 1");
        BenchmarkRow row;
        row.batch_size = b;
        row.repeats = cfg.repeats;
        std::mt19937_64 rng(derive_seed(cfg.seed, bi));
        double peak = 0;
        try {
            LimitGuard guard(cfg.memory_limit_bytes);
            for (std::size_t r = 0; r < cfg.warmup + cfg.repeats; ++r) {
                std::vector<const AtomicSystem*> batch(b);
                for (auto& p : batch) p = &pool[rng() % pool.size()];
                const std::size_t base = MemoryTracker::current_bytes();
                MemoryTracker::reset_peak();
                const auto t0 = std::chrono::steady_clock::now();
                double sink = 0;
                {
                    // Activations of the whole batch stay live together, as in a padded batch.
                    std::vector<Tape<T>> tapes(b);
                    for (std::size_t k = 0; k < b; ++k) {
                        auto fv = model.forward(tapes[k], compute_attributes(*batch[k], model.attribute_config()));
                        sink += static_cast<double>(fv.output.energy.value()[0]);
                    }
                }
                const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                if (!std::isfinite(sink)) throw NumericalError("benchmark produced a non-finite energy");
                if (r < cfg.warmup) continue;
                row.samples_per_second.push_back(static_cast<double>(b) / std::max(sec, 1e-12));
                peak = std::max(peak, static_cast<double>(MemoryTracker::peak_bytes() - base));
            }
        } catch (const std::bad_alloc&) {
            row.capped = true;
            row.samples_per_second.clear();
            rows.push_back(row);
            continue;
        }
        const double n = static_cast<double>(row.samples_per_second.size());
        for (double v : row.samples_per_second) row.mean_sps += v / n;
        double var = 0;
        for (double v : row.samples_per_second) var += (v - row.mean_sps) * (v - row.mean_sps);
        row.std_sps = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
        row.peak_bytes_per_sample = peak / static_cast<double>(b);
        rows.push_back(row);
    }
    return rows;
}

inline void write_benchmark_csv(std::ostream& os, const std::vector<BenchmarkRow>& rows) {
    os << "batch_size,repeats,mean_samples_per_sec,std_samples_per_sec,peak_bytes_per_sample,capped\n";
    for (const auto& r : rows)
        os << r.batch_size << ',' << r.repeats << ',' << detail::fmt_g(r.mean_sps) << ',' << detail::fmt_g(r.std_sps)
           << ',' << detail::fmt_g(r.peak_bytes_per_sample) << ',' << (r.capped ? 1 : 0) << '\n';
}

inline nlohmann::json benchmark_json(const std::vector<BenchmarkRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows)
        out.push_back({{"batch_size", r.batch_size},
                       {"repeats", r.repeats},
                       {"mean_samples_per_sec", r.mean_sps},
                       {"std_samples_per_sec", r.std_sps},
                       {"peak_bytes_per_sample", r.peak_bytes_per_sample},
                       {"capped", r.capped}});
    return out;
}

// ---------------------------------------------------------------------------
// Langevin molecular dynamics

inline constexpr double kEvPerAmuToA2PerFs2 = 9.648533212e-3;

struct MdConfig {
    std::size_t steps = 1000;
    double dt = 1.0;             // fs
    double temperature = 500.0;  // K
    double friction = 0.5;       // 1/ps
    std::uint64_t seed = 0;
    std::size_t stride = 10;
    double bin_width = 0.05;     // A
    double r_max = 2.5;          // A, histogram range
    bool thermal_start = true;   // Maxwell-Boltzmann initial velocities at `temperature`

    void validate() const {
        if (!(dt > 0)) throw ConfigError("md.dt must be positive");
        if (temperature < 0 || friction < 0) throw ConfigError("md temperature and friction must be nonnegative");
        if (stride < 1) throw ConfigError("md.stride must be at least 1");
        if (!(bin_width > 0) || !(r_max > bin_width)) throw ConfigError("md histogram range is invalid");
    }
};

struct DistanceHistogram {
    std::vector<double> edges;     // bins + 1
    std::vector<double> counts;
    std::vector<double> density;   // counts / (pairs * bin width)
    std::size_t pairs = 0;         // all pair distances seen, including those beyond range
};

struct MdTrajectory {
    std::vector<std::vector<Vec3>> positions;
    std::vector<std::vector<Vec3>> velocities;   // A / fs
    std::vector<std::size_t> frame_steps;
    double temperature = 0.0;
    double dt = 0.0;
    double friction = 0.0;
    std::uint64_t seed = 0;
    bool stable = true;
    std::optional<std::size_t> unstable_step;
    DistanceHistogram hr;
};

using ForceField = std::function<std::vector<Vec3>(const AtomicSystem&)>;

inline DistanceHistogram distance_histogram(const AtomicSystem& topology, const std::vector<std::vector<Vec3>>& frames,
                                            double bin_width, double r_max) {
    const auto bins = static_cast<std::size_t>(std::ceil(r_max / bin_width - 1e-9));
    DistanceHistogram h;
    h.edges.resize(bins + 1);
    for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = static_cast<double>(b) * bin_width;
    h.counts.assign(bins, 0.0);
    AtomicSystem s = topology;
    for (const auto& frame : frames) {
        s.positions = frame;
        for (std::size_t i = 0; i < s.size(); ++i)
            for (std::size_t j = i + 1; j < s.size(); ++j) {
                const double r = norm(displacement(s, s.positions[i], s.positions[j]));
                ++h.pairs;
                const auto b = static_cast<std::size_t>(r / bin_width);
                if (b < bins) h.counts[b] += 1.0;
            }
    }
    h.density.assign(bins, 0.0);
    if (h.pairs)
        for (std::size_t b = 0; b < bins; ++b) h.density[b] = h.counts[b] / (static_cast<double>(h.pairs) * bin_width);
    return h;
}

/// Integral of |h_a - h_b| over r; both histograms must share bins.
inline double histogram_mae(const DistanceHistogram& a, const DistanceHistogram& b) {
    if (a.edges != b.edges) throw ContractError("h(r) histograms use different bins");
    double s = 0;
    for (std::size_t i = 0; i < a.density.size(); ++i)
        s += std::abs(a.density[i] - b.density[i]) * (a.edges[i + 1] - a.edges[i]);
    return s;
}

inline double kinetic_energy(const AtomicSystem& s, const std::vector<Vec3>& v) {
    double ke = 0;
    for (std::size_t i = 0; i < s.size(); ++i) ke += 0.5 * atomic_mass(s.species[i]) * dot(v[i], v[i]);
    return ke / kEvPerAmuToA2PerFs2;
}

/// BAOAB Langevin dynamics driven by `forces`. Frames are recorded at step 0 and every
/// `stride` steps; a non-finite position stops the run and clears `stable`.
inline MdTrajectory langevin_md(const AtomicSystem& initial, const ForceField& forces, const MdConfig& cfg,
                                std::optional<std::vector<Vec3>> initial_velocities = std::nullopt) {
    cfg.validate();
    initial.validate();
    const std::size_t n = initial.size();
    std::vector<double> inv_mass(n), thermal(n);
    const double kt = kBoltzmannEv * cfg.temperature;
    for (std::size_t i = 0; i < n; ++i) {
        const double m = atomic_mass(initial.species[i]);
        inv_mass[i] = kEvPerAmuToA2PerFs2 / m;
        thermal[i] = std::sqrt(kt * kEvPerAmuToA2PerFs2 / m);   // A / fs
    }
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    AtomicSystem s = initial;
    std::vector<Vec3> v(n, Vec3{0, 0, 0});
    if (initial_velocities) {
        if (initial_velocities->size() != n) throw ContractError("initial velocity count does not match atoms");
        v = *initial_velocities;
    } else if (cfg.thermal_start && kt > 0) {
        for (std::size_t i = 0; i < n; ++i)
            for (auto& c : v[i]) c = thermal[i] * normal(rng);
    }

    MdTrajectory traj;
    traj.temperature = cfg.temperature;
    traj.dt = cfg.dt;
    traj.friction = cfg.friction;
    traj.seed = cfg.seed;
    traj.positions.push_back(s.positions);
    traj.velocities.push_back(v);
    traj.frame_steps.push_back(0);

    const double gamma = cfg.friction / 1000.0;   // 1/fs
    const double c1 = std::exp(-gamma * cfg.dt);
    const double c2 = std::sqrt(1.0 - c1 * c1);
    const double h = 0.5 * cfg.dt;
    std::vector<Vec3> f = n && cfg.steps ? forces(s) : std::vector<Vec3>(n, Vec3{0, 0, 0});
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        for (std::size_t i = 0; i < n; ++i)
            for (int d = 0; d < 3; ++d) {
                v[i][d] += h * f[i][d] * inv_mass[i];   // B
                s.positions[i][d] += h * v[i][d];       // A
                if (c1 != 1.0) v[i][d] = c1 * v[i][d] + c2 * thermal[i] * normal(rng);   // O
                s.positions[i][d] += h * v[i][d];       // A
            }
        bool finite = true;
        for (const auto& p : s.positions)
            for (double c : p) finite = finite && std::isfinite(c);
        if (finite) {
            if (s.cell) s.wrap();
            f = forces(s);
            for (std::size_t i = 0; i < n; ++i)
                for (int d = 0; d < 3; ++d) v[i][d] += h * f[i][d] * inv_mass[i];   // B
            for (const auto& p : v)
                for (double c : p) finite = finite && std::isfinite(c);
        }
        if (!finite) {
            traj.stable = false;
            traj.unstable_step = step;
            break;
        }
        if (step % cfg.stride == 0) {
            traj.positions.push_back(s.positions);
            traj.velocities.push_back(v);
            traj.frame_steps.push_back(step);
        }
    }
    traj.hr = distance_histogram(initial, traj.positions, cfg.bin_width, cfg.r_max);
    return traj;
}

template <class T>
ForceField model_force_field(const Model<T>& model) {
    return [&model](const AtomicSystem& s) { return model.predict(s).forces; };
}

inline ForceField potential_force_field(const PairPotential& pot) {
    return [pot](const AtomicSystem& s) { return pot.energy_forces(s).second; };
}

inline void write_histogram_csv(std::ostream& os, const DistanceHistogram& h) {
    os << "r_lo,r_hi,count,density\n";
    for (std::size_t b = 0; b < h.counts.size(); ++b)
        os << detail::fmt_g(h.edges[b]) << ',' << detail::fmt_g(h.edges[b + 1]) << ',' << detail::fmt_g(h.counts[b])
           << ',' << detail::fmt_g(h.density[b]) << '\n';
}

inline nlohmann::json md_json(const MdTrajectory& t) {
    return {{"frames", t.positions.size()},
            {"temperature", t.temperature},
            {"dt", t.dt},
            {"friction", t.friction},
            {"seed", t.seed},
            {"stable", t.stable},
            {"unstable_step", t.unstable_step ? nlohmann::json(*t.unstable_step) : nlohmann::json(nullptr)},
            {"pairs", t.hr.pairs}};
}

}  // namespace escaip
