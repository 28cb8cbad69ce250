#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "actionpp/losses.hpp"
#include "test_support.hpp"

using namespace actionpp;
using namespace actionpp::testing;

namespace {

    Tensor with_flat(const Tensor& like, std::span<const double> x) {
        return Tensor(like.shape(), std::vector<double>(x.begin(), x.end()));
    }

    std::vector<int> random_labels(Rng& rng, std::size_t n, int k) {
        std::vector<int> y(n);
        for (int& v : y) v = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
        return y;
    }

} // namespace

// --- relational distribution / instance discrimination --------------------

TEST(RelationalDistribution, IdenticalMinedViewsGiveUniform) {
    Rng rng(1);
    auto w = random_unit_vector(rng, 8);
    auto v = random_unit_vector(rng, 8);
    Tensor mined({5, 8});
    for (std::size_t n = 0; n < 5; ++n) std::copy(v.begin(), v.end(), mined.row(n).begin());
    auto dist = relational_distribution(w, mined, 0.3);
    for (double lp : dist.log_probs) EXPECT_NEAR(lp, -std::log(5.0), 1e-12);
}

TEST(RelationalDistribution, TwoViewClosedForm) {
    const std::vector<double> w{1.0, 0.0};
    Tensor mined({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    auto dist = relational_distribution(w, mined, 1.0);
    const double e = std::exp(1.0);
    EXPECT_NEAR(std::exp(dist.log_probs[0]), e / (e + 1.0), 1e-12);
    EXPECT_NEAR(std::exp(dist.log_probs[1]), 1.0 / (e + 1.0), 1e-12);
    EXPECT_NEAR(std::exp(dist.log_probs[0]), 0.7311, 1e-4);
}

TEST(RelationalDistribution, QueryScaleInvariant) {
    Rng rng(2);
    auto w = random_unit_vector(rng, 6);
    Tensor mined = random_unit_rows(rng, 4, 6);
    auto a = relational_distribution(w, mined, 0.2);
    for (double& x : w) x *= 5.0;
    auto b = relational_distribution(w, mined, 0.2);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.log_probs[i], b.log_probs[i], 1e-12);
}

TEST(RelationalDistribution, RejectsSingleViewAndZeroQuery) {
    Tensor one({1, 2}, std::vector<double>{1.0, 0.0});
    EXPECT_THROW(relational_distribution(std::vector<double>{1.0, 0.0}, one, 1.0), InvalidArgument);
    Tensor two({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    EXPECT_THROW(relational_distribution(std::vector<double>{0.0, 0.0}, two, 1.0), ZeroVector);
}

TEST(InstanceDiscrimination, ZeroForEqualDistributions) {
    const std::vector<double> z{0.3, -1.2, 2.0};
    auto lp = stable_log_softmax(z);
    auto loss = instance_discrimination_loss(z, lp);
    EXPECT_NEAR(loss.value, 0.0, 1e-12);
    for (double g : loss.grad("student_logits").flat()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(InstanceDiscrimination, ClosedFormExample) {
    const std::vector<double> zs{std::log(0.8), std::log(0.2)};
    const std::vector<double> lt{std::log(0.5), std::log(0.5)};
    auto loss = instance_discrimination_loss(zs, lt);
    const double expected = 0.8 * std::log(1.6) + 0.2 * std::log(0.4);
    EXPECT_NEAR(loss.value, expected, 1e-14);
    EXPECT_NEAR(loss.value, 0.19274, 1e-5);
}

TEST(InstanceDiscrimination, NonNegativeAndGradientsMatchFiniteDifferences) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.below(8);
        std::vector<double> zs(n), zt(n);
        for (double& v : zs) v = rng.uniform(-3, 3);
        for (double& v : zt) v = rng.uniform(-3, 3);
        const auto lt = stable_log_softmax(zt);
        auto loss = instance_discrimination_loss(zs, lt);
        EXPECT_GE(loss.value, 0.0);
        auto fd = finite_diff_gradient(
            [&](std::span<const double> x) { return instance_discrimination_loss(x, lt).value; }, zs, 1e-6);
        EXPECT_LT(max_relative_error(loss.grad("student_logits").flat(), fd), 1e-6);
    }
}

TEST(InstanceDiscrimination, QueryGradientThroughCosine) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        auto w = random_unit_vector(rng, 8);
        Tensor mined = random_unit_rows(rng, 6, 8);
        auto teacher_q = random_unit_vector(rng, 8);
        const auto lt = relational_distribution(teacher_q, mined, 1.0).log_probs;
        const double tau = rng.uniform(0.1, 1.0);
        auto loss = relational_instance_loss(w, mined, lt, tau);
        auto fd = finite_diff_gradient(
            [&](std::span<const double> x) { return relational_instance_loss(x, mined, lt, tau).value; }, w, 1e-6);
        EXPECT_LT(max_relative_error(loss.grad("query").flat(), fd), 1e-6);
    }
}

// --- query/key sets and AnCo ----------------------------------------------

TEST(QueryKeySets, PartitionCounts) {
    Rng rng(5);
    Tensor reps = random_unit_rows(rng, 8, 4);
    std::vector<int> y{1, 1, 1, 1, 2, 2, 2, 2};
    auto sets = select_query_key_sets(reps, y, 64, rng);
    ASSERT_EQ(sets.classes.size(), 2u);
    for (const auto& c : sets.classes) {
        EXPECT_EQ(c.queries.size(), 4u);
        EXPECT_EQ(c.negatives.size(), 4u);
        for (auto q : c.queries) EXPECT_EQ(y[q], c.class_id);
        for (auto k : c.negatives) EXPECT_NE(y[k], c.class_id);
    }
}

TEST(QueryKeySets, SingleClassHasNoNegatives) {
    Rng rng(6);
    Tensor reps = random_unit_rows(rng, 5, 3);
    std::vector<int> y(5, 3);
    auto sets = select_query_key_sets(reps, y, 64, rng);
    ASSERT_EQ(sets.classes.size(), 1u);
    EXPECT_EQ(sets.classes[0].class_id, 3);
    EXPECT_TRUE(sets.classes[0].negatives.empty());
}

TEST(QueryKeySets, PositiveKeyOfIdenticalFeatures) {
    Rng rng(7);
    auto u = random_unit_vector(rng, 5);
    Tensor reps({6, 5});
    for (std::size_t i = 0; i < 3; ++i) std::copy(u.begin(), u.end(), reps.row(i).begin());
    for (std::size_t i = 3; i < 6; ++i) {
        auto v = random_unit_vector(rng, 5);
        std::copy(v.begin(), v.end(), reps.row(i).begin());
    }
    std::vector<int> y{1, 1, 1, 2, 2, 2};
    auto sets = select_query_key_sets(reps, y, 64, rng);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(sets.find(1)->positive_key[j], u[j], 1e-12);
}

TEST(QueryKeySets, CapSubsamplesButPositiveUsesAllMembers) {
    Rng rng(8);
    Tensor reps = random_unit_rows(rng, 40, 4);
    std::vector<int> y(40, 1);
    for (std::size_t i = 30; i < 40; ++i) y[i] = 2;
    auto sets = select_query_key_sets(reps, y, 5, rng);
    EXPECT_EQ(sets.find(1)->queries.size(), 5u);
    EXPECT_EQ(sets.find(1)->members.size(), 30u);
    auto full = class_positive_key(reps, sets.find(1)->members);
    EXPECT_EQ(full, sets.find(1)->positive_key);
}

TEST(AncoLoss, DegenerateDenominatorIsZero) {
    Tensor reps({1, 2}, std::vector<double>{0.6, 0.8});
    std::vector<int> y{1};
    Rng rng(0);
    auto sets = select_query_key_sets(reps, y, 64, rng);
    EXPECT_NEAR(anco_loss(sets, reps, 1.0).value, 0.0, 1e-15);
}

TEST(AncoLoss, OneQueryOneNegative) {
    // Query q = r+ = e1, negative -e1: -log(e / (e + e^-1)).
    Tensor reps({2, 2}, std::vector<double>{1.0, 0.0, -1.0, 0.0});
    QueryKeySets sets;
    ClassQueryKeys cls;
    cls.class_id = 1;
    cls.members = {0};
    cls.queries = {0};
    cls.negatives = {1};
    cls.positive_key = {1.0, 0.0};
    sets.classes.push_back(cls);
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0)));
    EXPECT_NEAR(anco_loss(sets, reps, 1.0).value, expected, 1e-14);
    EXPECT_NEAR(expected, 0.12693, 1e-5);
}

TEST(AncoLoss, GradientMatchesFiniteDifferences) {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 12;
        Tensor reps = random_unit_rows(rng, n, 5);
        auto y = random_labels(rng, n, 3);
        auto sets = select_query_key_sets(reps, y, 3, rng);
        const double tau = rng.uniform(0.1, 1.0);
        auto loss = anco_loss(sets, reps, tau);
        auto fd = finite_diff_gradient(
            [&](std::span<const double> x) { return anco_loss(sets, with_flat(reps, x), tau).value; }, reps.flat(),
            1e-6);
        EXPECT_LT(max_relative_error(loss.grad("reps").flat(), fd), 1e-6) << "trial " << trial;
    }
}

TEST(AncoLoss, InvariantUnderCommonRotation) {
    Rng rng(10);
    Tensor reps = random_unit_rows(rng, 15, 6);
    auto y = random_labels(rng, 15, 3);
    Rng pick(1);
    auto sets = select_query_key_sets(reps, y, 64, pick);
    const auto q = random_rotation(rng, 6);
    EXPECT_NEAR(anco_loss(sets, reps, 0.3).value, anco_loss(sets, rotate_rows(reps, q), 0.3).value, 1e-9);
}

// --- AACO -----------------------------------------------------------------

namespace {

    AacoBatch random_aaco_batch(Rng& rng, std::size_t n, int k, std::size_t d) {
        AacoBatch b;
        b.features = random_unit_rows(rng, n, d);
        b.labels = random_labels(rng, n, k);
        b.pixel_ids.resize(n);
        for (std::size_t i = 0; i < n; ++i) b.pixel_ids[i] = 1000 + 7 * i;
        b.class_centers = random_unit_rows(rng, static_cast<std::size_t>(k), d);
        b.lambda_a = 0.2;
        b.tau = rng.uniform(0.1, 1.0);
        b.positives_per_anchor = 3;
        b.seed = rng.next_u64();
        b.iteration = rng.below(1000);
        return b;
    }

} // namespace

TEST(AacoLoss, TwoIdenticalPointsAtTheirCenter) {
    AacoBatch b;
    b.features = Tensor({2, 2}, std::vector<double>{1.0, 0.0, 1.0, 0.0});
    b.labels = {1, 1};
    b.pixel_ids = {0, 1};
    b.class_centers = Tensor({1, 2}, std::vector<double>{1.0, 0.0});
    b.tau = 1.0;
    EXPECT_NEAR(aaco_loss(b).value, 0.0, 1e-15);
}

TEST(AacoLoss, ZeroWeightReducesToSupervisedContrast) {
    Rng rng(11);
    AacoBatch b = random_aaco_batch(rng, 10, 3, 4);
    b.lambda_a = 0.0;
    // Plain supervised contrastive term evaluated from the sampled positives.
    const auto pos = sample_positives(b);
    double expected = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        std::vector<double> s;
        for (std::size_t j = 0; j < 10; ++j)
            if (j != i) s.push_back(dot(b.features.row(i), b.features.row(j)) / b.tau);
        const double lse = log_sum_exp(s);
        for (std::size_t p : pos[i]) expected -= dot(b.features.row(i), b.features.row(p)) / b.tau - lse;
    }
    expected /= 10.0;
    EXPECT_NEAR(aaco_loss(b).value, expected, 1e-12);
}

TEST(AacoLoss, GradientMatchesFiniteDifferences) {
    Rng rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        AacoBatch b = random_aaco_batch(rng, 32, 4, 6);
        auto loss = aaco_loss(b);
        auto fd = finite_diff_gradient(
            [&](std::span<const double> x) {
                AacoBatch p = b;
                p.features = with_flat(b.features, x);
                return aaco_loss(p).value;
            },
            b.features.flat(), 1e-6);
        EXPECT_LT(max_relative_error(loss.grad("features").flat(), fd), 1e-6) << "trial " << trial;
    }
}

TEST(AacoLoss, PermutationInvariant) {
    Rng rng(13);
    AacoBatch b = random_aaco_batch(rng, 20, 3, 5);
    auto perm = rng.sample_without_replacement(20, 20);
    AacoBatch p = b;
    for (std::size_t i = 0; i < 20; ++i) {
        auto src = b.features.row(perm[i]);
        std::copy(src.begin(), src.end(), p.features.row(i).begin());
        p.labels[i] = b.labels[perm[i]];
        p.pixel_ids[i] = b.pixel_ids[perm[i]];
    }
    EXPECT_NEAR(aaco_loss(b).value, aaco_loss(p).value, 1e-12);
}

TEST(AacoLoss, InvariantUnderCommonRotation) {
    Rng rng(14);
    AacoBatch b = random_aaco_batch(rng, 16, 3, 6);
    const auto q = random_rotation(rng, 6);
    AacoBatch r = b;
    r.features = rotate_rows(b.features, q);
    r.class_centers = rotate_rows(b.class_centers, q);
    EXPECT_NEAR(aaco_loss(b).value, aaco_loss(r).value, 1e-9);
}

TEST(AacoLoss, AnchorsWithoutPositivesKeepCenterTerm) {
    AacoBatch b;
    b.features = Tensor({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    b.labels = {1, 2};
    b.pixel_ids = {0, 1};
    b.class_centers = Tensor({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    b.tau = 1.0;
    b.lambda_a = 0.5;
    // Each anchor: -0.5 * (1 - 0) since the only other feature is orthogonal.
    EXPECT_NEAR(aaco_loss(b).value, -0.5, 1e-15);
}

TEST(AacoLoss, BatchTooSmall) {
    AacoBatch b;
    b.features = Tensor({1, 2}, std::vector<double>{1.0, 0.0});
    b.labels = {1};
    b.pixel_ids = {0};
    b.class_centers = Tensor({1, 2}, std::vector<double>{1.0, 0.0});
    EXPECT_THROW(aaco_loss(b), BatchTooSmall);
}

TEST(AacoLoss, UnitNormSquaredDistanceIdentity) {
    Rng rng(15);
    for (int trial = 0; trial < 1000; ++trial) {
        auto a = random_unit_vector(rng, 16);
        auto b = random_unit_vector(rng, 16);
        const double tau = rng.uniform(0.05, 2.0);
        EXPECT_NEAR(-dot(a, b) / tau, squared_distance(a, b) / (2.0 * tau) - 1.0 / tau, 1e-9);
    }
}

// --- Dice + CE, pseudo-label CE --------------------------------------------

TEST(DiceCe, PerfectOneHotPrediction) {
    const std::size_t k = 3, h = 4, w = 4;
    std::vector<int> y(h * w);
    for (std::size_t p = 0; p < y.size(); ++p) y[p] = 1 + static_cast<int>(p % k);
    Tensor logits({k, h, w}, -40.0);
    for (std::size_t p = 0; p < y.size(); ++p) logits[static_cast<std::size_t>(y[p] - 1) * h * w + p] = 40.0;
    EXPECT_LE(dice_ce_loss(logits, y).value, 1e-4);
}

TEST(DiceCe, TwoPixelHalfProbabilities) {
    Tensor logits({2, 1, 2}, 0.0);
    std::vector<int> y{1, 1};
    DiceCeParts parts;
    auto loss = dice_ce_loss(logits, y, &parts);
    const double dice = (2.0 * 1.0 + kDiceSmoothing) / (1.0 + 2.0 + kDiceSmoothing);
    EXPECT_NEAR(parts.dice, 1.0 - dice, 1e-15);
    EXPECT_NEAR(parts.dice, 1.0 / 3.0, 1e-5);
    EXPECT_NEAR(parts.ce, std::log(2.0), 1e-15);
    EXPECT_NEAR(loss.value, 0.5 * (1.0 - dice) + 0.5 * std::log(2.0), 1e-15);
}

TEST(DiceCe, GradientMatchesFiniteDifferences) {
    Rng rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits = random_normal(rng, {2, 3, 3, 4});
        auto y = random_labels(rng, 2 * 3 * 4, 3);
        auto loss = dice_ce_loss(logits, y);
        auto fd = finite_diff_gradient(
            [&](std::span<const double> x) { return dice_ce_loss(with_flat(logits, x), y).value; }, logits.flat(), 1e-6);
        EXPECT_LT(max_relative_error(loss.grad("logits").flat(), fd), 1e-6);
    }
}

TEST(PseudoLabelCe, UniformTeacherMasksEverything) {
    Rng rng(17);
    Tensor student = random_normal(rng, {3, 2, 2});
    Tensor teacher({3, 2, 2}, 1.0 / 3.0);
    auto loss = pseudo_label_ce_loss(student, teacher, 0.9);
    EXPECT_EQ(loss.value, 0.0);
    for (double g : loss.grad("student_logits").flat()) EXPECT_EQ(g, 0.0);
}

TEST(PseudoLabelCe, StudentMatchingOneHotTeacher) {
    Tensor teacher({2, 1, 3}, std::vector<double>{1, 0, 1, 0, 1, 0});
    Tensor student({2, 1, 3}, std::vector<double>{30, -30, 30, -30, 30, -30});
    EXPECT_LE(pseudo_label_ce_loss(student, teacher, 0.5).value, 1e-6);
}

TEST(PseudoLabelCe, ZeroThresholdIsPlainCrossEntropy) {
    Rng rng(18);
    Tensor student = random_normal(rng, {3, 2, 3});
    Tensor teacher = channel_softmax(random_normal(rng, {3, 2, 3}));
    auto loss = pseudo_label_ce_loss(student, teacher, 0.0);
    auto probs = channel_softmax(student);
    double expected = 0.0;
    for (std::size_t p = 0; p < 6; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < 3; ++c)
            if (teacher[c * 6 + p] > teacher[best * 6 + p]) best = c;
        expected -= std::log(probs[best * 6 + p]);
    }
    EXPECT_NEAR(loss.value, expected / 6.0, 1e-12);
}

TEST(PseudoLabelCe, GradientMatchesFiniteDifferences) {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor student = random_normal(rng, {2, 4, 3, 3});
        Tensor teacher = channel_softmax(random_normal(rng, {2, 4, 3, 3}, 2.0));
        auto loss = pseudo_label_ce_loss(student, teacher, 0.5);
        auto fd = finite_diff_gradient(
            [&](std::span<const double> x) { return pseudo_label_ce_loss(with_flat(student, x), teacher, 0.5).value; },
            student.flat(), 1e-6);
        EXPECT_LT(max_relative_error(loss.grad("student_logits").flat(), fd), 1e-6);
    }
}
