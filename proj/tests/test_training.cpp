#include <gtest/gtest.h>

#include <cstdlib>
#include <algorithm>
#include <filesystem>
#include <sstream>

#include "test_util.hpp"

using namespace escaip;
using namespace testutil;

namespace {

std::vector<AtomicSystem> lj_data(std::size_t count, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.count = count;
    spec.seed = seed;
    spec.min_atoms = 3;
    spec.max_atoms = 5;
    return synth_generate(spec);
}

TrainConfig quick_config(std::size_t epochs) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 4;
    c.lr = 3e-3;
    c.augment_copies = 4;
    c.equivariance_batches = 1;
    c.equivariance_batch_size = 2;
    c.seed = 5;
    return c;
}

TrainState<double> fresh_state(const std::vector<AtomicSystem>& train, std::uint64_t seed = 1) {
    ModelConfig mc = micro_config();
    fit_normalization(mc, train);
    return TrainState<double>::init(Model<double>::create(mc, seed));
}

bool same_params(const Model<double>& a, const Model<double>& b) {
    if (a.params.size() != b.params.size()) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i)
        if (!std::ranges::equal(a.params[i].value.values(), b.params[i].value.values())) return false;
    return true;
}

std::string run_csv(const std::vector<AtomicSystem>& train, const std::vector<AtomicSystem>& val, std::size_t epochs) {
    auto s = fresh_state(train);
    std::ostringstream os;
    escaip::train(s, train, val, quick_config(epochs), &os);
    return os.str();
}

}  // namespace

TEST(Loss, MatchesHandComputation) {
    AtomicSystem labels{{18, 18}, {{0, 0, 0}, {1, 0, 0}}, {}, -3.0, std::vector<Vec3>{{1, 2, 3}, {-1, -2, -3}}};
    Prediction p;
    p.energy = -2.0;
    p.forces = {{1.5, 2, 2}, {-1, 0, -3}};
    // |dE|/N = 0.5; componentwise |dF| = {0.5,0,1,0,2,0}, mean 3.5/6.
    EXPECT_NEAR(loss_value(p, labels, {1, 1}), 0.5 + 3.5 / 6, 1e-12);
    EXPECT_NEAR(loss_value(p, labels, {2, 0.5}), 1.0 + 1.75 / 6, 1e-12);
    // Huber of per-atom norms sqrt(1.25) and 2 with delta 0.1: n - delta/2.
    const double huber = 0.5 * ((std::sqrt(1.25) - 0.05) + (2 - 0.05));
    EXPECT_NEAR(loss_value(p, labels, {0, 1}, true, 0.1), huber, 1e-12);
}

TEST(Loss, SmoothVariantIsRotationInvariant) {
    std::mt19937_64 rng(1);
    AtomicSystem labels = random_cluster(5, rng, 2.0);
    labels.energy = 1.0;
    labels.forces = std::vector<Vec3>(5);
    Prediction p;
    p.energy = 0.5;
    for (std::size_t i = 0; i < 5; ++i) {
        (*labels.forces)[i] = random_unit(rng);
        p.forces.push_back(0.3 * random_unit(rng));
    }
    const Rotation r = random_rotation(rng);
    AtomicSystem rl = apply_rotation(labels, r);
    Prediction rp = p;
    for (auto& f : rp.forces) f = r.apply(f);
    EXPECT_NEAR(loss_value(p, labels, {1, 1}, true, 0.05), loss_value(rp, rl, {1, 1}, true, 0.05), 1e-12);
}

TEST(Loss, RequiresLabels) {
    AtomicSystem s{{18}, {{0, 0, 0}}, {}, {}, {}};
    EXPECT_THROW(loss_value(Prediction{0.0, {{0, 0, 0}}, 0}, s, {}), ContractError);
}

TEST(Augmentation, PreservesEnergiesAndRotatesForces) {
    const auto data = lj_data(5, 2);
    const auto aug = augment_rotations(data, 3, 9);
    ASSERT_EQ(aug.size(), 15u);
    const auto pot = PairPotential::lennard_jones();
    for (std::size_t i = 0; i < aug.size(); ++i) {
        EXPECT_EQ(*aug[i].energy, *data[i / 3].energy);
        auto [e, f] = pot.energy_forces(aug[i]);
        EXPECT_NEAR(e, *aug[i].energy, 1e-9);
        for (std::size_t v = 0; v < f.size(); ++v)
            for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR((*aug[i].forces)[v][d], f[v][d], 1e-8 * (1 + std::abs(f[v][d])));
    }
    EXPECT_EQ(augment_rotations(data, 1, 9).size(), data.size());
    EXPECT_THROW(augment_rotations(data, 0, 9), ContractError);
    EXPECT_EQ(augment_rotations(data, 3, 9)[4].positions, aug[4].positions);
}

TEST(Normalization, FitsLabelStatistics) {
    const auto data = lj_data(30, 3);
    ModelConfig c = micro_config();
    fit_normalization(c, data);
    std::vector<double> pa, comps;
    for (const auto& s : data) {
        pa.push_back(*s.energy / static_cast<double>(s.size()));
        for (const auto& f : *s.forces) comps.insert(comps.end(), f.begin(), f.end());
    }
    double mean = 0;
    for (double x : pa) mean += x / static_cast<double>(pa.size());
    double var = 0, rms = 0;
    for (double x : pa) var += (x - mean) * (x - mean) / static_cast<double>(pa.size());
    for (double x : comps) rms += x * x / static_cast<double>(comps.size());
    EXPECT_NEAR(c.energy_shift, mean, 1e-12);
    EXPECT_NEAR(c.energy_scale, std::sqrt(var), 1e-9);
    EXPECT_NEAR(c.force_scale, std::sqrt(rms), 1e-9);
}

TEST(Schedule, WarmupThenCosine) {
    TrainConfig c;
    c.lr = 1e-2;
    c.min_lr = 1e-4;
    c.warmup_fraction = 0.1;
    const std::uint64_t total = 100;
    EXPECT_NEAR(scheduled_lr(c, 0, total), 1e-3, 1e-15);
    EXPECT_NEAR(scheduled_lr(c, 9, total), 1e-2, 1e-15);
    EXPECT_NEAR(scheduled_lr(c, 10, total), 1e-2, 1e-15);
    EXPECT_NEAR(scheduled_lr(c, 55, total), 0.5 * (1e-2 + 1e-4), 1e-12);
    EXPECT_NEAR(scheduled_lr(c, 100, total), 1e-4, 1e-15);
    for (std::uint64_t s = 10; s < 100; ++s) EXPECT_LE(scheduled_lr(c, s + 1, total), scheduled_lr(c, s, total));
}

TEST(Adam, FirstStepMovesEachCoordinateByLr) {
    auto s = TrainState<double>::init(Model<double>::create(micro_config(), 1));
    const auto before = s.model;
    auto g = zero_gradients(s.model.params);
    std::mt19937_64 rng(4);
    for (auto& t : g) t = random_tensor(t.shape(), rng);
    TrainConfig c;
    c.clip_norm = 1e-3;   // clipping rescales g but leaves m/sqrt(v) unchanged on step one
    c.adam_eps = 0;
    const double gnorm = adam_step(s, g, c, 0.01);
    EXPECT_GT(gnorm, 1e-3);
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t k = 0; k < g[i].size(); ++k) {
            const double delta = s.model.params[i].value[k] - before.params[i].value[k];
            EXPECT_NEAR(delta, g[i][k] > 0 ? -0.01 : 0.01, 1e-12);
        }
    EXPECT_EQ(s.step, 1u);
}

TEST(Adam, MinimizesQuadratic) {
    auto s = TrainState<double>::init(Model<double>::create(micro_config(), 2));
    TrainConfig c;
    for (int it = 0; it < 3000; ++it) {
        auto g = zero_gradients(s.model.params);
        for (std::size_t i = 0; i < g.size(); ++i)
            for (std::size_t k = 0; k < g[i].size(); ++k) g[i][k] = s.model.params[i].value[k] - 0.25;
        adam_step(s, g, c, 0.01 * (1 - it / 3000.0));
    }
    for (const auto& p : s.model.params)
        for (double v : p.value.values()) EXPECT_NEAR(v, 0.25, 1e-3);
}

TEST(Training, CsvHasOneRowPerEpochPlusInit) {
    const auto data = lj_data(12, 5);
    const std::vector<AtomicSystem> train(data.begin(), data.begin() + 8), val(data.begin() + 8, data.end());
    auto s = fresh_state(train);
    const auto rows = escaip::train(s, train, val, quick_config(3));
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0].step, 0u);
    EXPECT_EQ(rows[3].step, 6u);
    EXPECT_TRUE(std::isnan(rows[0].train_loss));
    for (const auto& r : rows) EXPECT_TRUE(std::isfinite(r.val_force_mae));
    EXPECT_EQ(s.epoch, 3u);
    auto zero = fresh_state(train);
    EXPECT_EQ(escaip::train(zero, train, val, quick_config(0)).size(), 1u);
    EXPECT_TRUE(same_params(zero.model, fresh_state(train).model));
}

TEST(Training, DeterministicAcrossRunsAndWorkerCounts) {
    const auto data = lj_data(12, 6);
    const std::vector<AtomicSystem> train(data.begin(), data.begin() + 8), val(data.begin() + 8, data.end());
    const auto a = run_csv(train, val, 2);
    EXPECT_EQ(a, run_csv(train, val, 2));
    ::setenv("ESCAIP_THREADS", "3", 1);
    const auto b = run_csv(train, val, 2);
    ::setenv("ESCAIP_THREADS", "1", 1);
    EXPECT_EQ(a, b);
}

TEST(Training, ResumeIsBitIdentical) {
    const auto data = lj_data(12, 7);
    const std::vector<AtomicSystem> train(data.begin(), data.begin() + 8), val(data.begin() + 8, data.end());
    const auto cfg = quick_config(4);
    auto straight = fresh_state(train);
    std::ostringstream full;
    escaip::train(straight, train, val, cfg, &full);

    auto first = fresh_state(train);
    std::ostringstream part;
    escaip::train(first, train, val, cfg, &part, 2);
    EXPECT_EQ(first.epoch, 2u);
    const auto path = std::filesystem::temp_directory_path() / "escaip_resume.bin";
    save_checkpoint(path, state_checkpoint(first));
    auto resumed = state_from_checkpoint(load_checkpoint<double>(path));
    std::filesystem::remove(path);
    EXPECT_EQ(resumed.step, first.step);
    EXPECT_EQ(resumed.best_val, first.best_val);
    escaip::train(resumed, train, val, cfg, &part);
    EXPECT_EQ(part.str(), full.str());
    EXPECT_TRUE(same_params(resumed.model, straight.model));
    EXPECT_TRUE(same_params(resumed.best, straight.best));
}

TEST(Training, NonFiniteLossRollsBack) {
    auto data = lj_data(8, 8);
    auto s = fresh_state(data);
    auto cfg = quick_config(1);
    escaip::train(s, data, {}, cfg);
    const auto good = s.model;
    (*data[3].forces)[0][1] = std::nan("");
    cfg.epochs = 2;
    EXPECT_THROW(escaip::train(s, data, {}, cfg), NumericalError);
    EXPECT_EQ(s.epoch, 1u);
    EXPECT_TRUE(same_params(s.model, good));
}

TEST(Training, OverfitsSingleSample) {
    const auto data = lj_data(1, 9);
    auto s = fresh_state(data);
    auto cfg = quick_config(400);
    cfg.batch_size = 1;
    cfg.augment_copies = 1;
    cfg.equivariance_batches = 0;
    cfg.lr = 3e-3;
    cfg.warmup_fraction = 0;
    escaip::train(s, data, data, cfg);
    const auto ev = evaluate(s.model, data);
    EXPECT_LT(ev.force_mae, 0.05 * zero_force_mae(data)) << ev.force_mae << " vs " << zero_force_mae(data);
    EXPECT_LE(s.best_val, ev.force_mae);
}

TEST(Training, EnergyFinetuneDoesNotWorsenEnergy) {
    const auto data = lj_data(24, 10);
    const std::vector<AtomicSystem> train(data.begin(), data.begin() + 16), val(data.begin() + 16, data.end());
    auto s = fresh_state(train);
    auto cfg = quick_config(6);
    cfg.weights.energy = 0.1;
    cfg.equivariance_batches = 0;
    escaip::train(s, train, val, cfg);
    const double before = evaluate(s.model, val).energy_mae_per_atom;
    const auto origin = s.step;
    const auto rows = finetune_energy(s, train, val, cfg, 20.0, 6);
    const double after = evaluate(s.model, val).energy_mae_per_atom;
    std::cout << "energy MAE per atom before " << before << " after " << after << '\n';
    EXPECT_EQ(rows.size(), 6u);
    EXPECT_EQ(s.schedule_origin_step, origin);
    EXPECT_EQ(s.epoch, 12u);
    EXPECT_LE(after, before);
}

TEST(Training, InvalidConfigIsConfigError) {
    TrainConfig c;
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.weights = {0, 0};
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.warmup_fraction = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}
