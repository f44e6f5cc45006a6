#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diagnostics.hpp"

namespace escaip {

namespace detail {

struct Field {
    std::string key;
    std::function<void(const nlohmann::json&)> set;
    std::function<nlohmann::json()> get;
};

template <class V>
Field field(std::string key, V& ref) {
    return {key, [&ref, key](const nlohmann::json& j) { ref = detail::json_value<V>(j, key); },
            [&ref] { return nlohmann::json(ref); }};
}

inline void apply_fields(const std::string& section, const std::vector<Field>& fields, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError(section + " section must be an object");
    for (const auto& [key, v] : j.items()) {
        auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return f.key == key; });
        if (it == fields.end()) throw ConfigError("unknown key '" + section + "." + key + "'");
        try {
            it->set(v);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(section + "." + key + ": " + e.what());
        }
    }
}

inline nlohmann::json dump_fields(const std::vector<Field>& fields) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : fields) j[f.key] = f.get();
    return j;
}

}  // namespace detail

struct ScalingSettings {
    std::vector<std::string> families{"tiny"};   // model presets; each yields an attention/channel pair
    std::vector<std::size_t> data_sizes{100, 200, 400};
    std::size_t epochs = 20;
    std::size_t attention_factor = 2;
};

struct DataConfig {
    SyntheticSpec synth;
    std::array<double, 3> ratios{0.8, 0.1, 0.1};
};

struct DiagnosticsConfig {
    std::size_t equivariance_batches = 128;
    std::size_t equivariance_batch_size = 8;
    BenchmarkConfig benchmark;
    MdConfig md;
    ScalingSettings scaling;
};

/// Everything a CLI run needs. A single top-level seed drives every stochastic stage.
struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    TrainConfig training;
    DataConfig data;
    DiagnosticsConfig diagnostics;

    void resolve_seeds() {
        training.seed = seed;
        data.synth.seed = seed;
        diagnostics.benchmark.seed = seed;
        diagnostics.md.seed = seed;
    }

    void validate() const {
        model.validate();
        training.validate();
        data.synth.validate();
        double sum = 0;
        for (double r : data.ratios) {
            if (r < 0) throw ConfigError("data.ratios must be nonnegative");
            sum += r;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("data.ratios must sum to 1");
        diagnostics.md.validate();
        if (diagnostics.equivariance_batch_size < 1) throw ConfigError("diagnostics.equivariance_batch_size must be at least 1");
    }
};

namespace detail {

inline std::vector<Field> training_fields(TrainConfig& c) {
    return {field("energy_weight", c.weights.energy), field("force_weight", c.weights.force),
            field("smooth_l1", c.smooth_l1),          field("smooth_l1_delta", c.smooth_l1_delta),
            field("epochs", c.epochs),                field("batch_size", c.batch_size),
            field("lr", c.lr),                        field("min_lr", c.min_lr),
            field("warmup_fraction", c.warmup_fraction), field("clip_norm", c.clip_norm),
            field("beta1", c.beta1),                  field("beta2", c.beta2),
            field("adam_eps", c.adam_eps),            field("augment_copies", c.augment_copies),
            field("augment_full_epochs", c.augment_full_epochs),
            field("equivariance_batches", c.equivariance_batches),
            field("equivariance_batch_size", c.equivariance_batch_size)};
}

inline nlohmann::json species_to_json(const SpeciesParams& s) {
    return {{"z", s.z},         {"epsilon", s.epsilon},     {"sigma", s.sigma},
            {"depth", s.depth}, {"stiffness", s.stiffness}, {"r0", s.r0}};
}

inline SpeciesParams species_from_json(const nlohmann::json& j) {
    SpeciesParams s;
    std::vector<Field> f{field("z", s.z),         field("epsilon", s.epsilon),     field("sigma", s.sigma),
                         field("depth", s.depth), field("stiffness", s.stiffness), field("r0", s.r0)};
    apply_fields("data.palette[]", f, j);
    return s;
}

inline std::vector<Field> data_fields(DataConfig& c) {
    SyntheticSpec& s = c.synth;
    std::vector<Field> f{field("min_atoms", s.min_atoms),
                         field("max_atoms", s.max_atoms),
                         field("density", s.density),
                         field("jitter_temperature", s.jitter_temperature),
                         field("relax_steps", s.relax_steps),
                         field("count", s.count),
                         field("min_distance_factor", s.min_distance_factor),
                         field("ratios", c.ratios)};
    f.push_back({"potential",
                 [&s](const nlohmann::json& j) {
                     const auto v = j.get<std::string>();
                     if (v == "lennard_jones") s.potential = PotentialKind::LennardJones;
                     else if (v == "morse") s.potential = PotentialKind::Morse;
                     else throw ConfigError("data.potential must be 'lennard_jones' or 'morse'");
                 },
                 [&s] { return nlohmann::json(s.potential == PotentialKind::Morse ? "morse" : "lennard_jones"); }});
    f.push_back({"mode",
                 [&s](const nlohmann::json& j) {
                     const auto v = j.get<std::string>();
                     if (v == "cluster") s.mode = SynthMode::Cluster;
                     else if (v == "box") s.mode = SynthMode::Box;
                     else throw ConfigError("data.mode must be 'cluster' or 'box'");
                 },
                 [&s] { return nlohmann::json(s.mode == SynthMode::Box ? "box" : "cluster"); }});
    f.push_back({"palette",
                 [&s](const nlohmann::json& j) {
                     if (!j.is_array()) throw ConfigError("data.palette must be an array");
                     s.palette.clear();
                     for (const auto& e : j) s.palette.push_back(species_from_json(e));
                 },
                 [&s] {
                     nlohmann::json a = nlohmann::json::array();
                     for (const auto& p : s.palette) a.push_back(species_to_json(p));
                     return a;
                 }});
    return f;
}

inline std::vector<Field> benchmark_fields(BenchmarkConfig& c) {
    return {field("batch_sizes", c.batch_sizes), field("repeats", c.repeats), field("warmup", c.warmup),
            field("memory_limit_bytes", c.memory_limit_bytes)};
}

inline std::vector<Field> md_fields(MdConfig& c) {
    return {field("steps", c.steps),         field("dt", c.dt),
            field("temperature", c.temperature), field("friction", c.friction),
            field("stride", c.stride),       field("bin_width", c.bin_width),
            field("r_max", c.r_max),         field("thermal_start", c.thermal_start)};
}

inline std::vector<Field> scaling_fields(ScalingSettings& c) {
    return {field("families", c.families), field("data_sizes", c.data_sizes), field("epochs", c.epochs),
            field("attention_factor", c.attention_factor)};
}

inline std::vector<Field> diagnostics_fields(DiagnosticsConfig& c) {
    std::vector<Field> f{field("equivariance_batches", c.equivariance_batches),
                         field("equivariance_batch_size", c.equivariance_batch_size)};
    f.push_back({"benchmark", [&c](const nlohmann::json& j) { apply_fields("diagnostics.benchmark", benchmark_fields(c.benchmark), j); },
                 [&c] { return dump_fields(benchmark_fields(c.benchmark)); }});
    f.push_back({"md", [&c](const nlohmann::json& j) { apply_fields("diagnostics.md", md_fields(c.md), j); },
                 [&c] { return dump_fields(md_fields(c.md)); }});
    f.push_back({"scaling", [&c](const nlohmann::json& j) { apply_fields("diagnostics.scaling", scaling_fields(c.scaling), j); },
                 [&c] { return dump_fields(scaling_fields(c.scaling)); }});
    return f;
}

}  // namespace detail

/// Partial update from a JSON document; unknown keys anywhere are a ConfigError.
inline void update_from_json(RunConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be an object");
    for (const auto& [key, v] : j.items()) {
        if (key == "seed") {
            try {
                c.seed = detail::json_value<std::uint64_t>(v, "seed");
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError(std::string("seed: ") + e.what());
            }
        } else if (key == "model") update_from_json(c.model, v);
        else if (key == "training") detail::apply_fields("training", detail::training_fields(c.training), v);
        else if (key == "data") detail::apply_fields("data", detail::data_fields(c.data), v);
        else if (key == "diagnostics") detail::apply_fields("diagnostics", detail::diagnostics_fields(c.diagnostics), v);
        else throw ConfigError("unknown config section '" + key + "'");
    }
    c.resolve_seeds();
}

inline nlohmann::json to_json(const RunConfig& cfg) {
    RunConfig c = cfg;
    return {{"seed", c.seed},
            {"model", c.model},
            {"training", detail::dump_fields(detail::training_fields(c.training))},
            {"data", detail::dump_fields(detail::data_fields(c.data))},
            {"diagnostics", detail::dump_fields(detail::diagnostics_fields(c.diagnostics))}};
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    RunConfig c;
    update_from_json(c, j);
    return c;
}

}  // namespace escaip
