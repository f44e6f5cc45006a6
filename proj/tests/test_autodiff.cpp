#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"

using namespace escaip;
using namespace testutil;

namespace {

Tensor<double> vals(Shape s, std::initializer_list<double> v) { return Tensor<double>(std::move(s), v); }

}  // namespace

TEST(Tensor, ShapeAndSizeAgree) {
    Tensor<double> t(Shape{2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_EQ(t.rank(), 3u);
    EXPECT_THROW(Tensor<double>(Shape{2, 2}, {1.0, 2.0, 3.0}), DimensionError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    std::mt19937_64 rng(1);
    Tape<double> tape;
    auto x = random_tensor(Shape{3, 5}, rng);
    auto eye = vals(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto y = matmul(tape.constant(eye), tape.constant(x));
    EXPECT_EQ(y.value(), x);
}

TEST(Matmul, HandArithmetic) {
    Tape<double> tape;
    auto y = matmul(tape.constant(vals(Shape{2, 2}, {1, 2, 3, 4})), tape.constant(vals(Shape{2, 1}, {1, 1})));
    EXPECT_EQ(y.shape(), (Shape{2, 1}));
    EXPECT_DOUBLE_EQ(y.value()[0], 3.0);
    EXPECT_DOUBLE_EQ(y.value()[1], 7.0);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(2);
    auto r = check_gradients([](Tape<double>&, const std::vector<Var<double>>& v) { return sum(matmul(v[0], v[1])); },
                             {random_tensor(Shape{5, 4}, rng), random_tensor(Shape{4, 6}, rng)});
    EXPECT_LE(r.max_rel, 1e-5);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
    Tape<double> tape;
    EXPECT_THROW(matmul(tape.constant(Tensor<double>(Shape{2, 3})), tape.constant(Tensor<double>(Shape{2, 3}))),
                 DimensionError);
}

TEST(MaskedSoftmax, EqualLogitsGiveUniformWeights) {
    Tape<double> tape;
    std::vector<std::uint8_t> mask(4, 1);
    auto p = masked_softmax(tape.constant(Tensor<double>(Shape{4}, 0.7)), std::span<const std::uint8_t>(mask));
    for (double v : p.value().values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(MaskedSoftmax, SingleSurvivorTakesAllWeight) {
    Tape<double> tape;
    std::vector<std::uint8_t> mask{1, 0};
    auto p = masked_softmax(tape.constant(Tensor<double>(Shape{2}, 0.0)), std::span<const std::uint8_t>(mask));
    EXPECT_EQ(p.value()[0], 1.0);
    EXPECT_EQ(p.value()[1], 0.0);
}

TEST(MaskedSoftmax, MatchesNegativeInfinityOracle) {
    std::mt19937_64 rng(3);
    auto logits = random_tensor(Shape{8}, rng, 3.0);
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1, 0, 1};
    Tape<double> tape;
    auto p = masked_softmax(tape.constant(logits), std::span<const std::uint8_t>(mask));
    std::vector<double> z(8);
    double total = 0;
    for (int i = 0; i < 8; ++i) {
        const double l = mask[i] ? logits[i] : -std::numeric_limits<double>::infinity();
        z[i] = std::exp(l);
        total += z[i];
    }
    for (int i = 0; i < 8; ++i) EXPECT_NEAR(p.value()[i], z[i] / total, 1e-7);
}

TEST(MaskedSoftmax, InvariantToMaskedLogits) {
    std::mt19937_64 rng(4);
    auto logits = random_tensor(Shape{3, 6}, rng);
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 1, 0, 1, 0, 0, 0, 0, 1};
    Tape<double> t1, t2;
    auto a = masked_softmax(t1.constant(logits), std::span<const std::uint8_t>(mask));
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (!mask[i]) logits[i] = i % 2 ? std::numeric_limits<double>::quiet_NaN() : 1e300;
    auto b = masked_softmax(t2.constant(logits), std::span<const std::uint8_t>(mask));
    EXPECT_EQ(a.value(), b.value());
}

TEST(MaskedSoftmax, AllMaskedRowIsZeroAndFlagged) {
    Tape<double> tape;
    std::vector<std::uint8_t> mask{0, 0, 0, 1, 1, 0};
    auto p = masked_softmax(tape.constant(Tensor<double>(Shape{2, 3}, 1.0)), std::span<const std::uint8_t>(mask));
    for (int j = 0; j < 3; ++j) EXPECT_EQ(p.value()[j], 0.0);
    EXPECT_DOUBLE_EQ(p.value()[3] + p.value()[4], 1.0);
    EXPECT_EQ(tape.empty_softmax_rows, 1u);
}

TEST(MaskedSoftmax, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 1, 1};
    auto r = check_gradients(
        [&](Tape<double>& t, const std::vector<Var<double>>& v) {
            return probe(t, masked_softmax(v[0], std::span<const std::uint8_t>(mask)));
        },
        {random_tensor(Shape{3, 4}, rng)});
    EXPECT_LE(r.max_rel, 1e-4);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    Tape<double> tape;
    auto y = layer_norm(tape.constant(Tensor<double>(Shape{1, 4}, 3.0)), tape.constant(Tensor<double>(Shape{4}, 1.0)),
                        tape.constant(Tensor<double>(Shape{4}, 0.0)));
    for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizedRowIsNearlyUnchanged) {
    Tape<double> tape;
    auto y = layer_norm(tape.constant(vals(Shape{1, 2}, {1, -1})), tape.constant(Tensor<double>(Shape{2}, 1.0)),
                        tape.constant(Tensor<double>(Shape{2}, 0.0)));
    // eps = 1e-5 inside the square root
    EXPECT_NEAR(y.value()[0], 1.0, 1e-5);
    EXPECT_NEAR(y.value()[1], -1.0, 1e-5);
}

TEST(LayerNorm, MomentsOfRandomRow) {
    std::mt19937_64 rng(6);
    Tape<double> tape;
    auto y = layer_norm(tape.constant(random_tensor(Shape{1, 64}, rng, 5.0)), tape.constant(Tensor<double>(Shape{64}, 1.0)),
                        tape.constant(Tensor<double>(Shape{64}, 0.0)));
    double mean = 0, var = 0;
    for (double v : y.value().values()) mean += v / 64;
    for (double v : y.value().values()) var += (v - mean) * (v - mean) / 64;
    EXPECT_LE(std::abs(mean), 1e-6);
    EXPECT_LE(std::abs(var - 1), 1e-3);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    auto r = check_gradients([](Tape<double>& t, const std::vector<Var<double>>& v) { return probe(t, layer_norm(v[0], v[1], v[2])); },
                             {random_tensor(Shape{3, 5}, rng), random_tensor(Shape{5}, rng), random_tensor(Shape{5}, rng)});
    EXPECT_LE(r.max_rel, 1e-4);
}

TEST(Backward, SumGivesOnes) {
    Tape<double> tape;
    auto p = tape.push(Tensor<double>(Shape{2, 3}, 0.5), true, nullptr);
    tape.backward(sum(p));
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(tape.grad(p.id)[k], 1.0);
}

TEST(Backward, HalfSquaredNormGivesInput) {
    std::mt19937_64 rng(8);
    auto x = random_tensor(Shape{4, 2}, rng);
    Tape<double> tape;
    auto p = tape.push(x, true, nullptr);
    tape.backward(scale(sum(mul(p, p)), 0.5));
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_DOUBLE_EQ(tape.grad(p.id)[k], x[k]);
}

TEST(Backward, NonScalarLossIsContractError) {
    Tape<double> tape;
    auto p = tape.push(Tensor<double>(Shape{3}), true, nullptr);
    EXPECT_THROW(tape.backward(p), ContractError);
}

TEST(Backward, ParametersOffTapeGetZeroGradient) {
    ParamStore<double> store;
    store.add("used", "g", Tensor<double>(Shape{2}, 1.0));
    store.add("unused", "g", Tensor<double>(Shape{3}, 1.0));
    Tape<double> tape;
    tape.backward(sum(tape.parameter(store, 0)));
    auto g = tape.gradients(store);
    EXPECT_EQ(g[0], Tensor<double>(Shape{2}, 1.0));
    EXPECT_EQ(g[1], Tensor<double>(Shape{3}, 0.0));
}

TEST(Backward, RepeatedPassesAreIdentical) {
    std::mt19937_64 rng(9);
    Tape<double> tape;
    auto p = tape.push(random_tensor(Shape{3, 3}, rng), true, nullptr);
    auto loss = sum(silu(matmul(p, p)));
    tape.backward(loss);
    std::vector<double> first(tape.grad(p.id), tape.grad(p.id) + 9);
    tape.backward(loss);
    for (int k = 0; k < 9; ++k) EXPECT_EQ(first[k], tape.grad(p.id)[k]);
}

TEST(Elementwise, TrivialValues) {
    Tape<double> tape;
    auto a = tape.constant(vals(Shape{2, 2}, {1, 2, 3, 4}));
    auto b = tape.constant(vals(Shape{2}, {10, 20}));
    EXPECT_EQ(add(a, b).value(), vals(Shape{2, 2}, {11, 22, 13, 24}));
    EXPECT_EQ(sub(a, b).value(), vals(Shape{2, 2}, {-9, -18, -7, -16}));
    EXPECT_EQ(mul(a, b).value(), vals(Shape{2, 2}, {10, 40, 30, 80}));
    EXPECT_DOUBLE_EQ(silu(tape.constant(vals(Shape{1}, {0}))).value()[0], 0.0);
    EXPECT_EQ(abs(tape.constant(vals(Shape{2}, {-2, 3}))).value(), vals(Shape{2}, {2, 3}));
    EXPECT_DOUBLE_EQ(mean(a).value()[0], 2.5);
    EXPECT_THROW(add(a, tape.constant(Tensor<double>(Shape{3}))), DimensionError);
}

TEST(Elementwise, SmoothL1Branches) {
    Tape<double> tape;
    auto y = smooth_l1(tape.constant(vals(Shape{3}, {0.05, -0.3, 2.0})), 0.1);
    EXPECT_NEAR(y.value()[0], 0.5 * 0.05 * 0.05 / 0.1, 1e-15);
    EXPECT_NEAR(y.value()[1], 0.3 - 0.05, 1e-15);
    EXPECT_NEAR(y.value()[2], 2.0 - 0.05, 1e-15);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(10);
    auto a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{4}, rng), c = random_tensor(Shape{3, 4}, rng);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, add(v[0], v[1])); }, {a, b}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, sub(v[0], v[1])); }, {a, b}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, mul(v[0], v[1])); }, {a, c}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, mul(v[0], v[1])); }, {a, b}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, scale(v[0], 1.7)); }, {a}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, silu(v[0])); }, {a}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, abs(v[0])); }, {a}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, smooth_l1(v[0], 0.5)); }, {a}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>&, const auto& v) { return mean(v[0]); }, {a}).max_rel, 1e-4);
    auto s = random_tensor(Shape{3, 1}, rng);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, mul_rows(v[0], v[1])); }, {a, s}).max_rel, 1e-4);
}

TEST(Structural, ConcatGatherBroadcastValues) {
    Tape<double> tape;
    auto a = tape.constant(vals(Shape{2, 1}, {1, 2}));
    auto b = tape.constant(vals(Shape{2, 2}, {3, 4, 5, 6}));
    EXPECT_EQ(concat<double>({a, b}).value(), vals(Shape{2, 3}, {1, 3, 4, 2, 5, 6}));
    auto g = gather_rows(b, {1, -1, 0});
    EXPECT_EQ(g.value(), vals(Shape{3, 2}, {5, 6, 0, 0, 3, 4}));
    EXPECT_EQ(broadcast_rows(a, 2).value(), vals(Shape{2, 2, 1}, {1, 1, 2, 2}));
    EXPECT_THROW(gather_rows(b, {2}), DimensionError);
}

TEST(Structural, MaskedOpsIgnoreGarbage) {
    Tape<double> tape;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto x = tape.constant(vals(Shape{2, 2, 1}, {1, nan, 3, 4}));
    std::vector<std::uint8_t> mask{1, 0, 1, 1};
    EXPECT_EQ(mask_select(x, std::span<const std::uint8_t>(mask)).value(), vals(Shape{2, 2, 1}, {1, 0, 3, 4}));
    EXPECT_EQ(masked_sum(x, std::span<const std::uint8_t>(mask)).value(), vals(Shape{2, 1}, {1, 7}));
}

TEST(Structural, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(11);
    auto a = random_tensor(Shape{3, 2}, rng), b = random_tensor(Shape{3, 4}, rng);
    auto x3 = random_tensor(Shape{3, 4, 2}, rng);
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0, 0, 0, 1, 0, 1, 1};
    const std::span<const std::uint8_t> ms(mask);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, concat<double>({v[0], v[1]})); }, {a, b}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, gather_rows(v[0], {2, 0, -1, 2, 1})); }, {b}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, broadcast_rows(v[0], 3)); }, {a}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([&](Tape<double>& t, const auto& v) { return probe(t, mask_select(v[0], ms)); }, {x3}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([&](Tape<double>& t, const auto& v) { return probe(t, masked_sum(v[0], ms)); }, {x3}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, reshape(v[0], Shape{4, 3})); }, {b}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, permute(v[0], {2, 0, 1})); }, {x3}).max_rel, 1e-4);
}

TEST(Batched, BmmAndPermuteMatchLoops) {
    std::mt19937_64 rng(12);
    auto a = random_tensor(Shape{2, 3, 4}, rng), b = random_tensor(Shape{2, 5, 4}, rng);
    Tape<double> tape;
    auto c = bmm(tape.constant(a), tape.constant(b), true);
    ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
    for (int s = 0; s < 2; ++s)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 5; ++j) {
                double ref = 0;
                for (int k = 0; k < 4; ++k) ref += a[(s * 3 + i) * 4 + k] * b[(s * 5 + j) * 4 + k];
                EXPECT_NEAR(c.value()[(s * 3 + i) * 5 + j], ref, 1e-12);
            }
    auto p = permute(tape.constant(a), {2, 0, 1});
    ASSERT_EQ(p.shape(), (Shape{4, 2, 3}));
    EXPECT_EQ(p.value()[(1 * 2 + 1) * 3 + 2], a[(1 * 3 + 2) * 4 + 1]);
    auto bt = random_tensor(Shape{2, 4, 5}, rng);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, bmm(v[0], v[1], true)); }, {a, b}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, bmm(v[0], v[1])); }, {a, bt}).max_rel, 1e-4);
}

TEST(Norms, NormalizeRowsGuardsZeroRows) {
    Tape<double> tape;
    auto y = normalize_rows(tape.constant(vals(Shape{2, 3}, {3, 0, 4, 0, 0, 0})), 1e-8);
    EXPECT_EQ(y.value(), vals(Shape{2, 3}, {0.6, 0, 0.8, 0, 0, 0}));
    EXPECT_EQ(tape.guarded_norms, 1u);
    auto n = row_norms(tape.constant(vals(Shape{1, 3}, {3, 0, 4})));
    EXPECT_DOUBLE_EQ(n.value()[0], 5.0);
    std::mt19937_64 rng(13);
    auto x = random_tensor(Shape{4, 3}, rng);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, normalize_rows(v[0], 1e-8)); }, {x}).max_rel, 1e-4);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, row_norms(v[0])); }, {x}).max_rel, 1e-4);
}

TEST(Linear, AnyRankInput) {
    std::mt19937_64 rng(14);
    auto x = random_tensor(Shape{2, 3, 4}, rng), w = random_tensor(Shape{4, 5}, rng), b = random_tensor(Shape{5}, rng);
    EXPECT_LE(check_gradients([](Tape<double>& t, const auto& v) { return probe(t, linear(v[0], v[1], v[2])); }, {x, w, b}).max_rel, 1e-4);
}
