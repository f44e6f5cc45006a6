#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>

#include "test_util.hpp"

using namespace escaip;
using namespace testutil;

namespace {

std::vector<Vec3> forces_of(const OutputVars<double>& o) {
    const auto& f = o.forces.value();
    std::vector<Vec3> out(f.size() / 3);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {f[i * 3], f[i * 3 + 1], f[i * 3 + 2]};
    return out;
}

Model<double> micro_model(std::uint64_t seed = 1) { return Model<double>::create(micro_config(), seed); }

}  // namespace

TEST(Model, IsolatedAtomHasZeroMessagesAndForce) {
    auto model = micro_model();
    AtomicSystem s{{18}, {{0, 0, 0}}, {}, {}, {}};
    auto attrs = compute_attributes(s, model.attribute_config());
    Tape<double> tape;
    auto fv = model.forward(tape, attrs);
    for (const auto& b : fv.blocks)
        for (double v : b.messages.value().values()) EXPECT_EQ(v, 0.0);
    for (double v : fv.output.forces.value().values()) EXPECT_EQ(v, 0.0);
    EXPECT_TRUE(std::isfinite(fv.output.energy.value()[0]));
    EXPECT_EQ(model.predict(s).isolated_atoms, 1u);
}

TEST(Model, IdenticalNeighborhoodsGiveIdenticalNodeRows) {
    auto model = micro_model();
    AtomicSystem s{{18, 18}, {{0, 0, 0}, {1.1, 0, 0}}, {}, {}, {}};
    Tape<double> tape;
    auto fv = model.forward(tape, compute_attributes(s, model.attribute_config()));
    const auto& x = fv.blocks.back().node.value();
    const std::size_t w = x.dim(1);
    for (std::size_t j = 0; j < w; ++j) EXPECT_EQ(x[j], x[w + j]);
}

TEST(Model, MaskNeutralityIsExact) {
    std::mt19937_64 rng(41);
    auto model = micro_model();
    auto s = random_cluster(7, rng, 4.0);
    const auto clean = compute_attributes(s, model.attribute_config());
    ASSERT_LT(std::count(clean.graph.valid_mask.begin(), clean.graph.valid_mask.end(), 1), static_cast<long>(clean.graph.valid_mask.size()));
    Tape<double> t0;
    auto ref = model.forward(t0, clean);
    std::uniform_real_distribution<double> u(-1e3, 1e3);
    for (int trial = 0; trial < 5; ++trial) {
        auto dirty = clean;
        const std::size_t k = dirty.num_basis;
        for (std::size_t slot = 0; slot < dirty.graph.valid_mask.size(); ++slot) {
            if (dirty.graph.valid_mask[slot]) continue;
            dirty.graph.neighbor_index[slot] = static_cast<long>(rng() % s.size());
            dirty.graph.unit_dirs[slot] = {u(rng), std::numeric_limits<double>::quiet_NaN(), u(rng)};
            dirty.graph.distances[slot] = u(rng);
            for (std::size_t b = 0; b < k; ++b)
                dirty.rbf[slot * k + b] = trial % 2 ? std::numeric_limits<double>::quiet_NaN() : u(rng);
        }
        Tape<double> t1;
        auto out = model.forward(t1, dirty);
        EXPECT_EQ(out.output.energy.value(), ref.output.energy.value());
        EXPECT_EQ(out.output.forces.value(), ref.output.forces.value());
        for (std::size_t b = 0; b < out.readouts.size(); ++b)
            EXPECT_EQ(out.readouts[b].edge.value(), ref.readouts[b].edge.value());
    }
}

TEST(Model, MaskedEdgeReadoutRowsAreZero) {
    std::mt19937_64 rng(42);
    auto model = micro_model();
    auto s = random_cluster(6, rng, 2.5);
    auto attrs = compute_attributes(s, model.attribute_config());
    Tape<double> tape;
    auto fv = model.forward(tape, attrs);
    for (const auto& r : fv.readouts) {
        const std::size_t w = r.edge.shape()[2];
        for (std::size_t slot = 0; slot < attrs.graph.valid_mask.size(); ++slot) {
            if (attrs.graph.valid_mask[slot]) continue;
            for (std::size_t j = 0; j < w; ++j) EXPECT_EQ(r.edge.value()[slot * w + j], 0.0);
        }
    }
}

TEST(Model, ReadoutShapesAcrossConfigs) {
    std::mt19937_64 rng(43);
    for (int t = 0; t < 5; ++t) {
        ModelConfig c = micro_config();
        c.num_blocks = 1 + rng() % 3;
        c.readout_width = 2 + rng() % 5;
        c.max_neighbors = 2 + rng() % 5;
        auto model = Model<double>::create(c, t);
        auto s = random_cluster(5, rng, 2.0);
        Tape<double> tape;
        auto fv = model.forward(tape, compute_attributes(s, model.attribute_config()));
        std::vector<Var<double>> nodes, edges;
        for (const auto& r : fv.readouts) {
            nodes.push_back(r.node);
            edges.push_back(r.edge);
        }
        EXPECT_EQ(concat(nodes).shape(), (Shape{5, c.num_blocks * c.readout_width}));
        EXPECT_EQ(concat(edges).shape(), (Shape{5, c.max_neighbors, c.num_blocks * c.readout_width}));
    }
}

TEST(Model, CentrosymmetricCancellationWithConstantDirectionHead) {
    auto model = micro_model();
    ModelConfig c = micro_config();
    // The last layer of FFN_d outputs exactly (1, 1, 1).
    auto& w = model.params[model.params.id_of("output.direction.1.weight")].value;
    auto& b = model.params[model.params.id_of("output.direction.1.bias")].value;
    w.fill(0.0);
    b.fill(1.0);
    AtomicSystem s{{18, 18, 18, 18, 18, 18, 18},
                   {{0, 0, 0}, {1.1, 0, 0}, {-1.1, 0, 0}, {0, 1.1, 0}, {0, -1.1, 0}, {0, 0, 1.1}, {0, 0, -1.1}},
                   {},
                   {},
                   {}};
    ModelConfig wide = c;
    wide.max_neighbors = 6;
    ASSERT_EQ(model.config.max_neighbors, 4u);
    auto m6 = Model<double>::create(wide, 1);
    for (std::size_t i = 0; i < m6.params.size(); ++i)
        if (m6.params[i].value.shape() == model.params[i].value.shape()) m6.params[i].value = model.params[i].value;
    Tape<double> tape;
    auto fv = m6.forward(tape, compute_attributes(s, m6.attribute_config()));
    for (int d = 0; d < 3; ++d) {
        EXPECT_NEAR(fv.output.raw_direction.value()[d], 0.0, 1e-12);
        EXPECT_NEAR(fv.output.forces.value()[d], 0.0, 1e-4);
    }
}

TEST(Model, ForceNormEqualsMagnitude) {
    std::mt19937_64 rng(44);
    auto model = micro_model(3);
    for (int t = 0; t < 5; ++t) {
        auto s = random_cluster(6, rng, 2.3);
        Tape<double> tape;
        auto fv = model.forward(tape, compute_attributes(s, model.attribute_config()));
        const auto f = forces_of(fv.output);
        for (std::size_t v = 0; v < f.size(); ++v) {
            const auto& g = fv.output.raw_direction.value();
            const double gn = std::sqrt(g[v * 3] * g[v * 3] + g[v * 3 + 1] * g[v * 3 + 1] + g[v * 3 + 2] * g[v * 3 + 2]);
            if (gn < OutputBlock::kDirectionEps) continue;
            EXPECT_NEAR(norm(f[v]), std::abs(fv.output.magnitude.value()[v]) * model.config.force_scale, 1e-6);
        }
    }
}

TEST(Model, PermutationSymmetry) {
    std::mt19937_64 rng(45);
    auto model = micro_model(5);
    auto s = random_cluster(8, rng, 2.4);
    std::vector<std::size_t> order{3, 7, 0, 5, 1, 6, 2, 4};
    auto a = model.predict(s);
    auto b = model.predict(permute_atoms(s, order));
    EXPECT_NEAR(a.energy, b.energy, 1e-10);
    for (std::size_t k = 0; k < order.size(); ++k)
        for (int d = 0; d < 3; ++d) EXPECT_NEAR(b.forces[k][d], a.forces[order[k]][d], 1e-10);
}

TEST(Model, TranslationInvariance) {
    std::mt19937_64 rng(46);
    auto model = micro_model(6);
    auto s = random_cluster(8, rng, 2.4);
    auto a = model.predict(s);
    auto b = model.predict(translate(s, {3.7, -12.5, 0.25}));
    EXPECT_NEAR(a.energy, b.energy, 1e-10);
    for (std::size_t k = 0; k < a.forces.size(); ++k)
        for (int d = 0; d < 3; ++d) EXPECT_NEAR(a.forces[k][d], b.forces[k][d], 1e-10);
}

TEST(Model, RotationEquivarianceIsNotArchitectural) {
    std::mt19937_64 rng(47);
    auto model = micro_model(7);
    auto s = random_cluster(8, rng, 2.4);
    const Rotation r = random_rotation(rng);
    auto a = model.predict(s);
    auto b = model.predict(apply_rotation(s, r));
    double worst = 1.0;
    for (std::size_t v = 0; v < s.size(); ++v) {
        const Vec3 ra = r.apply(a.forces[v]);
        if (norm(ra) < 1e-10 || norm(b.forces[v]) < 1e-10) continue;
        worst = std::min(worst, dot(ra, b.forces[v]) / (norm(ra) * norm(b.forces[v])));
    }
    EXPECT_LT(worst, 0.999);
    EXPECT_NEAR(a.energy, b.energy, 1e-9);
}

TEST(Model, ForcesAreNotEnergyGradient) {
    std::mt19937_64 rng(48);
    auto model = micro_model(8);
    auto s = random_cluster(5, rng, 2.0);
    auto p = model.predict(s);
    double diff = 0;
    const double h = 1e-5;
    for (std::size_t v = 0; v < s.size(); ++v)
        for (int d = 0; d < 3; ++d) {
            auto sp = s, sm = s;
            sp.positions[v][d] += h;
            sm.positions[v][d] -= h;
            const double grad = (model.predict(sp).energy - model.predict(sm).energy) / (2 * h);
            diff = std::max(diff, std::abs(-grad - p.forces[v][d]));
        }
    EXPECT_GT(diff, 1e-3);
}

TEST(Model, SpeciesOutsideTableIsDataError) {
    auto model = micro_model();
    AtomicSystem s{{21, 18}, {{0, 0, 0}, {1, 0, 0}}, {}, {}, {}};
    EXPECT_THROW(model.predict(s), DataError);
}

TEST(Model, MismatchedAttributesAreConfigError) {
    auto model = micro_model();
    AtomicSystem s{{18, 18}, {{0, 0, 0}, {1, 0, 0}}, {}, {}, {}};
    auto cfg = model.attribute_config();
    cfg.max_neighbors += 1;
    EXPECT_THROW(model.predict(compute_attributes(s, cfg)), ConfigError);
}

TEST(Model, FullGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(49);
    auto model = micro_model(9);
    auto s = random_cluster(5, rng, 2.0);
    const auto attrs = compute_attributes(s, model.attribute_config());
    Tensor<double> wf = random_tensor(Shape{5, 3}, rng);
    auto loss_of = [&](const Model<double>& m, Tape<double>& tape) {
        auto fv = m.forward(tape, attrs);
        return add(fv.output.energy, sum(mul(fv.output.forces, tape.constant(wf))));
    };
    Tape<double> tape;
    tape.backward(loss_of(model, tape));
    const auto grads = tape.gradients(model.params);
    std::map<std::string, std::pair<double, double>> group_err;   // (|a - n|^2, |n|^2)
    double worst_elem = 0;
    const double h = 1e-5;
    for (std::size_t p = 0; p < model.params.size(); ++p)
        for (std::size_t k = 0; k < model.params[p].value.size(); ++k) {
            auto& x = model.params[p].value[k];
            const double x0 = x;
            x = x0 + h;
            Tape<double> tp;
            const double fp = loss_of(model, tp).value()[0];
            x = x0 - h;
            Tape<double> tm;
            const double fm = loss_of(model, tm).value()[0];
            x = x0;
            const double num = (fp - fm) / (2 * h), ana = grads[p][k];
            auto& e = group_err[model.params[p].group];
            e.first += (num - ana) * (num - ana);
            e.second += num * num;
            if (std::abs(ana) > 1e-6) worst_elem = std::max(worst_elem, std::abs(num - ana) / std::abs(ana));
        }
    EXPECT_EQ(group_err.size(), 5u);
    for (const auto& [g, e] : group_err) EXPECT_LE(std::sqrt(e.first / e.second), 1e-6) << g;
    EXPECT_LE(worst_elem, 1e-4);
}

TEST(Model, CastPreservesPredictions) {
    std::mt19937_64 rng(50);
    auto fm = Model<float>::create(micro_config(), 10);
    auto dm = fm.cast<double>();
    auto s = random_cluster(6, rng, 2.3);
    auto a = fm.predict(s), b = dm.predict(s);
    EXPECT_NEAR(a.energy, b.energy, 1e-4 * (1 + std::abs(b.energy)));
}

TEST(ParameterAudit, LinearLayerCount) { EXPECT_EQ(nn::Linear::count(4, 3), 15u); }

TEST(ParameterAudit, HeadCountDoesNotChangeAttentionParameters) {
    ModelConfig a = ModelConfig::tiny(), b = a;
    b.num_heads = a.num_heads * 2;
    EXPECT_EQ(parameter_audit(a).groups.at("attention"), parameter_audit(b).groups.at("attention"));
}

TEST(ParameterAudit, MatchesParameterTreeWalk) {
    std::mt19937_64 rng(51);
    std::vector<ModelConfig> configs{ModelConfig::tiny(), ModelConfig::small_toy(), micro_config()};
    for (int t = 0; t < 5; ++t) {
        ModelConfig c = micro_config();
        c.num_blocks = 1 + rng() % 4;
        c.num_heads = 1 + rng() % 3;
        c.message_size = c.num_heads * (2 + rng() % 4);
        c.node_width = 3 + rng() % 9;
        c.ffn_width = 3 + rng() % 20;
        c.l_max = static_cast<int>(rng() % 7);
        configs.push_back(c);
    }
    for (const auto& c : configs) {
        auto model = Model<float>::create(c, 0);
        std::map<std::string, std::size_t> walk;
        for (const auto& p : model.params) walk[p.group] += p.value.size();
        const auto audit = parameter_audit(c);
        EXPECT_EQ(audit.groups, walk);
        EXPECT_EQ(audit.total, model.params.scalar_count());
    }
}

TEST(ModelConfig, JsonRoundTripAndErrors) {
    ModelConfig c = ModelConfig::small_toy();
    c.energy_shift = -1.25;
    nlohmann::json j = c;
    EXPECT_EQ(j.get<ModelConfig>(), c);
    ModelConfig d;
    update_from_json(d, nlohmann::json{{"preset", "small_toy"}, {"num_blocks", 7}});
    EXPECT_EQ(d.num_blocks, 7u);
    EXPECT_EQ(d.message_size, ModelConfig::small_toy().message_size);
    EXPECT_THROW(update_from_json(d, nlohmann::json{{"bogus", 1}}), ConfigError);
    EXPECT_THROW(update_from_json(d, nlohmann::json{{"preset", "huge"}}), ConfigError);
    EXPECT_THROW(update_from_json(d, nlohmann::json{{"num_blocks", "two"}}), ConfigError);
    ModelConfig bad;
    bad.message_size = 30;
    bad.num_heads = 4;
    EXPECT_THROW(bad.validate(), ConfigError);
}
