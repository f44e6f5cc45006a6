// escaip: command-line front end for data generation, training, evaluation and the
// diagnostic protocols. Every subcommand writes into a run directory (--out) together
// with resolved_config.json.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "escaip/escaip.hpp"

namespace fs = std::filesystem;
using namespace escaip;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumerical = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "run";
};

struct Overrides {
    std::optional<std::size_t> epochs, count, batches, steps, stop_after;
};

RunConfig resolve(const Common& c, const Overrides& o) {
    RunConfig rc;
    if (!c.config.empty()) rc = load_run_config(c.config);
    if (c.seed) rc.seed = *c.seed;
    if (o.epochs) rc.training.epochs = *o.epochs;
    if (o.count) rc.data.synth.count = *o.count;
    if (o.batches) rc.diagnostics.equivariance_batches = *o.batches;
    if (o.steps) rc.diagnostics.md.steps = *o.steps;
    rc.resolve_seeds();
    rc.validate();
    return rc;
}

fs::path prepare_run_dir(const Common& c, const RunConfig& rc) {
    fs::path dir(c.out);
    fs::create_directories(dir);
    std::ofstream os(dir / "resolved_config.json");
    os << to_json(rc).dump(2) << '\n';
    return dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

template <class Fn>
void write_file(const fs::path& path, Fn&& fn) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    fn(os);
}

Dataset require_dataset(const std::string& dir) {
    if (dir.empty()) throw ConfigError("--data is required");
    return load_dataset(dir);
}

const std::vector<AtomicSystem>& eval_split(const Dataset& d, const std::string& name) {
    if (name == "train") return d.train;
    if (name == "val") return d.val;
    if (name == "test") return d.test;
    throw ConfigError("--split must be train, val or test");
}

Model<float> require_model(const std::string& path) {
    if (path.empty()) throw ConfigError("--checkpoint is required");
    return load_model<float>(path);
}

int cmd_generate(const Common& c, const Overrides& o) {
    const RunConfig rc = resolve(c, o);
    const fs::path dir = prepare_run_dir(c, rc);
    const auto systems = synth_generate(rc.data.synth);
    const Manifest m = write_dataset(dir, systems, rc.data.ratios, rc.seed);
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& e : m.entries) ++counts[e.split == "train" ? 0 : e.split == "val" ? 1 : 2];
    std::printf("wrote %zu samples to %s (train %zu, val %zu, test %zu)\n", systems.size(), dir.c_str(), counts[0],
                counts[1], counts[2]);
    return kOk;
}

int cmd_train(const Common& c, const Overrides& o, const std::string& data, const std::string& resume) {
    RunConfig rc = resolve(c, o);
    const Dataset ds = require_dataset(data);
    TrainState<float> state;
    if (!resume.empty()) {
        state = state_from_checkpoint(load_checkpoint<float>(resume));
        rc.model = state.model.config;
    } else {
        fit_normalization(rc.model, ds.train);
        state = TrainState<float>::init(Model<float>::create(rc.model, rc.seed));
    }
    const fs::path dir = prepare_run_dir(c, rc);
    const fs::path csv_path = dir / "metrics.csv";
    const bool append = !resume.empty() && fs::exists(csv_path);
    std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!append) csv << kMetricHeader << '\n';
    int code = kOk;
    try {
        train(state, ds.train, ds.val, rc.training, &csv, o.stop_after);
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        code = kNumerical;
    }
    save_checkpoint(dir / "checkpoint.bin", state_checkpoint(state));
    if (std::isfinite(state.best_val)) save_checkpoint(dir / "best.bin", model_checkpoint(state.best));
    std::printf("step %llu, epoch %llu; checkpoint %s\n", static_cast<unsigned long long>(state.step),
                static_cast<unsigned long long>(state.epoch), (dir / "checkpoint.bin").c_str());
    return code;
}

int cmd_eval(const Common& c, const Overrides& o, const std::string& data, const std::string& ckpt,
             const std::string& which) {
    const RunConfig rc = resolve(c, o);
    const Dataset ds = require_dataset(data);
    const Model<float> model = require_model(ckpt);
    const auto& systems = eval_split(ds, which);
    if (systems.empty()) throw DataError("split '" + which + "' is empty");
    const EvalReport r = evaluate(model, systems);
    const fs::path dir = prepare_run_dir(c, rc);
    const nlohmann::json j{{"split", which},
                           {"samples", r.samples},
                           {"energy_mae_mev_per_atom", 1000.0 * r.energy_mae_per_atom},
                           {"energy_mae_mev", 1000.0 * r.energy_mae},
                           {"force_mae_mev_per_A", 1000.0 * r.force_mae},
                           {"zero_force_mae_mev_per_A", 1000.0 * zero_force_mae(systems)}};
    write_json(dir / "eval.json", j);
    std::cout << j.dump(2) << '\n';
    return kOk;
}

int cmd_equivariance(const Common& c, const Overrides& o, const std::string& data, const std::string& ckpt) {
    const RunConfig rc = resolve(c, o);
    const Dataset ds = require_dataset(data);
    const Model<float> model = require_model(ckpt);
    const auto rep = equivariance_check([&](const AtomicSystem& s) { return model.predict(s).forces; }, ds.val,
                                        rc.diagnostics.equivariance_batches, rc.diagnostics.equivariance_batch_size, rc.seed);
    const fs::path dir = prepare_run_dir(c, rc);
    write_file(dir / "equivariance.csv", [&](std::ostream& os) { write_equivariance_csv(os, rep); });
    write_json(dir / "equivariance.json", equivariance_json(rep));
    std::printf("mean cosine %.6f over %zu batches\n", rep.mean, rep.num_batches);
    return kOk;
}

ModelConfig preset(const std::string& name) {
    nlohmann::json j{{"preset", name}};
    ModelConfig m;
    update_from_json(m, j);
    return m;
}

int cmd_scaling(const Common& c, const Overrides& o, const std::string& data) {
    const RunConfig rc = resolve(c, o);
    const Dataset ds = require_dataset(data);
    const auto& sc = rc.diagnostics.scaling;
    std::vector<ScalingVariant> variants;
    for (const auto& fam : sc.families) {
        auto pair = matched_variants(preset(fam), fam, sc.attention_factor);
        variants.insert(variants.end(), pair.begin(), pair.end());
    }
    TrainConfig tc = rc.training;
    tc.epochs = o.epochs ? *o.epochs : sc.epochs;
    const auto res = scaling_study(variants, ds.train, ds.val, sc.data_sizes, tc, rc.seed);
    const fs::path dir = prepare_run_dir(c, rc);
    write_file(dir / "scaling.csv", [&](std::ostream& os) { write_scaling_csv(os, res); });
    write_json(dir / "scaling.json", scaling_json(res));
    for (const auto& f : res.fits) {
        if (f.slope) std::printf("%s: slope %.4f (%zu points)\n", f.label.c_str(), *f.slope, f.points);
        else std::printf("%s: slope undefined (%zu points)\n", f.label.c_str(), f.points);
    }
    return kOk;
}

int cmd_benchmark(const Common& c, const Overrides& o, const std::string& data, const std::string& ckpt) {
    const RunConfig rc = resolve(c, o);
    const Dataset ds = require_dataset(data);
    const Model<float> model = ckpt.empty() ? Model<float>::create(rc.model, rc.seed) : require_model(ckpt);
    std::vector<AtomicSystem> pool = ds.test.empty() ? ds.val : ds.test;
    if (pool.empty()) pool = ds.train;
    const auto rows = benchmark(model, pool, rc.diagnostics.benchmark);
    const fs::path dir = prepare_run_dir(c, rc);
    write_file(dir / "benchmark.csv", [&](std::ostream& os) { write_benchmark_csv(os, rows); });
    write_json(dir / "benchmark.json", benchmark_json(rows));
    write_benchmark_csv(std::cout, rows);
    return kOk;
}

int cmd_md(const Common& c, const Overrides& o, const std::string& data, const std::string& ckpt, std::size_t sample) {
    const RunConfig rc = resolve(c, o);
    const Dataset ds = require_dataset(data);
    const auto& pool = !ds.test.empty() ? ds.test : !ds.val.empty() ? ds.val : ds.train;
    if (sample >= pool.size()) throw ConfigError("--sample is out of range");
    const AtomicSystem& start = pool[sample];
    const PairPotential pot = rc.data.synth.make_potential();
    const fs::path dir = prepare_run_dir(c, rc);

    const MdTrajectory oracle = langevin_md(start, potential_force_field(pot), rc.diagnostics.md);
    write_file(dir / "hr_oracle.csv", [&](std::ostream& os) { write_histogram_csv(os, oracle.hr); });
    nlohmann::json report{{"oracle", md_json(oracle)}};

    auto dump_traj = [&](const MdTrajectory& t, const fs::path& path) {
        std::vector<AtomicSystem> frames;
        for (const auto& p : t.positions) {
            AtomicSystem f = start;
            f.positions = p;
            f.energy.reset();
            f.forces.reset();
            frames.push_back(std::move(f));
        }
        write_extxyz(path, frames);
    };
    dump_traj(oracle, dir / "trajectory_oracle.xyz");

    if (!ckpt.empty()) {
        const Model<float> model = require_model(ckpt);
        const MdTrajectory learned = langevin_md(start, model_force_field(model), rc.diagnostics.md);
        write_file(dir / "hr_model.csv", [&](std::ostream& os) { write_histogram_csv(os, learned.hr); });
        dump_traj(learned, dir / "trajectory_model.xyz");
        report["model"] = md_json(learned);
        report["hr_mae"] = histogram_mae(learned.hr, oracle.hr);
        std::printf("h(r) MAE %.6f, model run %s\n", report["hr_mae"].get<double>(), learned.stable ? "stable" : "unstable");
    }
    write_json(dir / "md.json", report);
    std::printf("%zu frames written to %s\n", oracle.positions.size(), dir.c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EScAIP interatomic potential toolkit"};
    app.require_subcommand(1);
    Common common;
    Overrides ov;
    std::string data, ckpt, resume, which = "test";
    std::size_t sample = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", common.seed, "Seed for every stochastic stage");
        sub->add_option("--out", common.out, "Run directory")->capture_default_str();
    };
    auto* gen = app.add_subcommand("generate", "Synthesize a labeled dataset");
    add_common(gen);
    gen->add_option("--count", ov.count, "Number of samples");

    auto* tr = app.add_subcommand("train", "Train a model; writes checkpoint.bin and metrics.csv");
    add_common(tr);
    tr->add_option("--data", data, "Dataset directory")->required();
    tr->add_option("--epochs", ov.epochs, "Target epoch count (total, including resumed epochs)");
    tr->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
    tr->add_option("--stop-after", ov.stop_after, "Stop once this epoch completes; the schedule still spans --epochs");

    auto* ev = app.add_subcommand("eval", "Energy and force MAE of a checkpoint");
    add_common(ev);
    ev->add_option("--data", data, "Dataset directory")->required();
    ev->add_option("--checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", which, "train, val or test")->capture_default_str();

    auto* eq = app.add_subcommand("equivariance", "Rotational consistency of predicted forces");
    add_common(eq);
    eq->add_option("--data", data, "Dataset directory")->required();
    eq->add_option("--checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    eq->add_option("--batches", ov.batches, "Number of rotated batches");

    auto* sc = app.add_subcommand("scaling", "Attention-heavy vs channel-heavy data scaling study");
    add_common(sc);
    sc->add_option("--data", data, "Dataset directory")->required();
    sc->add_option("--epochs", ov.epochs, "Epochs per cell");

    auto* bm = app.add_subcommand("benchmark", "Throughput and memory per batch size");
    add_common(bm);
    bm->add_option("--data", data, "Dataset directory")->required();
    bm->add_option("--checkpoint", ckpt, "Model checkpoint (default: fresh model)")->check(CLI::ExistingFile);

    auto* md = app.add_subcommand("md", "Langevin MD with analytic and (optionally) learned forces");
    add_common(md);
    md->add_option("--data", data, "Dataset directory")->required();
    md->add_option("--checkpoint", ckpt, "Model checkpoint")->check(CLI::ExistingFile);
    md->add_option("--steps", ov.steps, "Number of integration steps");
    md->add_option("--sample", sample, "Index of the starting structure in the test split");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*gen) return cmd_generate(common, ov);
        if (*tr) return cmd_train(common, ov, data, resume);
        if (*ev) return cmd_eval(common, ov, data, ckpt, which);
        if (*eq) return cmd_equivariance(common, ov, data, ckpt);
        if (*sc) return cmd_scaling(common, ov, data);
        if (*bm) return cmd_benchmark(common, ov, data, ckpt);
        if (*md) return cmd_md(common, ov, data, ckpt, sample);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return kNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kOther;
    }
    return kOther;
}
