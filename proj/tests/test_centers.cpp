#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "actionpp/centers.hpp"
#include "test_support.hpp"

using namespace actionpp;
using namespace actionpp::testing;

TEST(UniformityLoss, SingleCenterIsOneAtUnitTemperature) {
    Tensor psi({1, 3}, std::vector<double>{0.0, 1.0, 0.0});
    EXPECT_NEAR(uniformity_loss_and_grad(psi, 1.0).loss, 1.0, 1e-15);
}

TEST(UniformityLoss, AntipodalPair) {
    Tensor psi({2, 2}, std::vector<double>{1.0, 0.0, -1.0, 0.0});
    const double expected = 2.0 * std::log(std::exp(1.0) + std::exp(-1.0));
    EXPECT_NEAR(uniformity_loss_and_grad(psi, 1.0).loss, expected, 1e-14);
    EXPECT_NEAR(expected, 2.25386, 1e-5);
}

TEST(UniformityLoss, GradientMatchesFiniteDifferences) {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor psi = random_unit_rows(rng, 4, 8);
        const double tau = rng.uniform(0.1, 2.0);
        auto [loss, grad] = uniformity_loss_and_grad(psi, tau);
        auto fd = finite_diff_gradient(
            [&](std::span<const double> x) {
                Tensor p({4, 8}, std::vector<double>(x.begin(), x.end()));
                return uniformity_loss_and_grad(p, tau).loss;
            },
            psi.flat(), 1e-6);
        EXPECT_LT(max_relative_error(grad.flat(), fd), 1e-6) << "trial " << trial;
    }
}

TEST(UniformityLoss, InvariantUnderRotation) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor psi = random_unit_rows(rng, 5, 6);
        const auto q = random_rotation(rng, 6);
        const double a = uniformity_loss_and_grad(psi, 0.5).loss;
        const double b = uniformity_loss_and_grad(rotate_rows(psi, q), 0.5).loss;
        EXPECT_NEAR(a, b, 1e-9);
    }
}

TEST(PrecomputeCenters, AntipodalForTwoClassesInTwoDimensions) {
    auto c = precompute_centers(2, 2, {});
    EXPECT_NEAR(dot(c.center(0), c.center(1)), -1.0, 1e-3);
}

TEST(PrecomputeCenters, RegularSimplexInHighDimension) {
    for (int k : {3, 4}) {
        auto c = precompute_centers(k, 128, {});
        for (int a = 0; a < k; ++a) {
            EXPECT_NEAR(l2_norm(c.center(a)), 1.0, 1e-9);
            for (int b = a + 1; b < k; ++b) EXPECT_NEAR(dot(c.center(a), c.center(b)), -1.0 / (k - 1), 1e-3);
        }
    }
}

TEST(PrecomputeCenters, EquiangularForAllSmallK) {
    for (int k = 2; k <= 8; ++k) {
        auto c = precompute_centers(k, 128, {});
        double lo = 2.0, hi = -2.0;
        for (int a = 0; a < k; ++a)
            for (int b = a + 1; b < k; ++b) {
                lo = std::min(lo, dot(c.center(a), c.center(b)));
                hi = std::max(hi, dot(c.center(a), c.center(b)));
            }
        EXPECT_LT(hi - lo, 1e-3) << "K=" << k;
        EXPECT_NEAR(c.max_pairwise_inner_product(), hi, 0.0);
    }
}

TEST(PrecomputeCenters, DeterministicGivenSeed) {
    UniformityConfig cfg;
    cfg.seed = 99;
    auto a = precompute_centers(5, 32, cfg);
    auto b = precompute_centers(5, 32, cfg);
    EXPECT_EQ(a.centers, b.centers);
    cfg.seed = 100;
    auto c = precompute_centers(5, 32, cfg);
    EXPECT_NE(a.centers, c.centers);
}

TEST(PrecomputeCenters, NotConvergedCarriesGradientNorm) {
    UniformityConfig cfg;
    cfg.max_iters = 3;
    try {
        precompute_centers(4, 16, cfg);
        FAIL() << "expected NotConverged";
    } catch (const NotConverged& e) {
        EXPECT_GT(e.grad_norm(), cfg.grad_tol);
        EXPECT_EQ(e.iterations(), 3);
    }
}

TEST(PrecomputeCenters, RejectsBadArguments) {
    EXPECT_THROW(precompute_centers(1, 8, {}), InvalidArgument);
    UniformityConfig bad;
    bad.tau = 0.0;
    EXPECT_THROW(precompute_centers(3, 8, bad), InvalidArgument);
}

namespace {

    Tensor rows_of(const std::vector<std::vector<double>>& v) {
        Tensor t({v.size(), v[0].size()});
        for (std::size_t i = 0; i < v.size(); ++i) std::copy(v[i].begin(), v[i].end(), t.row(i).begin());
        return t;
    }

} // namespace

TEST(EmpiricalMeans, FullRateReplacesWithBatchMean) {
    EmpiricalMeans m(2, 2, 1.0);
    Tensor f1 = rows_of({{1, 0}, {0, 1}});
    std::vector<int> y1{1, 2};
    m = update_empirical_means(m, f1, y1);
    Tensor f2 = rows_of({{0, 1}, {0, 1}, {1, 0}});
    std::vector<int> y2{1, 1, 2};
    m = update_empirical_means(m, f2, y2);
    EXPECT_NEAR(m.mean(1)[0], 0.0, 1e-15);
    EXPECT_NEAR(m.mean(1)[1], 1.0, 1e-15);
    EXPECT_NEAR(m.mean(2)[0], 1.0, 1e-15);
}

TEST(EmpiricalMeans, FixedPointAndAbsentClassUntouched) {
    EmpiricalMeans m(3, 2, 0.5);
    Tensor f = rows_of({{1, 0}, {0, 1}, {-1, 0}});
    std::vector<int> y{1, 2, 3};
    m = update_empirical_means(m, f, y);
    const Tensor before = m.means;

    Tensor g = rows_of({{1, 0}, {0.6, 0.8}});
    std::vector<int> y2{1, 2};
    m = update_empirical_means(m, g, y2);
    EXPECT_NEAR(m.mean(1)[0], 1.0, 1e-15);
    EXPECT_NEAR(m.mean(1)[1], 0.0, 1e-15);
    // Class 3 was absent: bitwise unchanged.
    EXPECT_EQ(m.mean(3)[0], before.at(2, 0));
    EXPECT_EQ(m.mean(3)[1], before.at(2, 1));
}

TEST(EmpiricalMeans, FirstObservationSetsMeanDirectly) {
    EmpiricalMeans m(2, 2, 0.1);
    Tensor f = rows_of({{0.6, 0.8}, {0.6, 0.8}});
    std::vector<int> y{2, 2};
    m = update_empirical_means(m, f, y);
    EXPECT_FALSE(m.initialized[0]);
    EXPECT_TRUE(m.initialized[1]);
    EXPECT_NEAR(m.mean(2)[0], 0.6, 1e-15);
    EXPECT_EQ(m.missing_classes(), std::vector<int>{1});
}

TEST(EmpiricalMeans, PreservesUnitNorm) {
    Rng rng(4);
    EmpiricalMeans m(4, 16, 0.3);
    for (int step = 0; step < 50; ++step) {
        Tensor f = random_unit_rows(rng, 20, 16);
        std::vector<int> y(20);
        for (int& v : y) v = 1 + static_cast<int>(rng.below(4));
        m = update_empirical_means(m, f, y);
        for (int c = 1; c <= 4; ++c) {
            if (m.initialized[static_cast<std::size_t>(c - 1)]) {
                EXPECT_NEAR(l2_norm(m.mean(c)), 1.0, 1e-9);
            }
        }
    }
}

TEST(EmpiricalMeans, DegenerateBatchMean) {
    EmpiricalMeans m(2, 2, 0.5);
    Tensor f = rows_of({{1, 0}, {-1, 0}});
    std::vector<int> y{1, 1};
    EXPECT_THROW(update_empirical_means(m, f, y), DegenerateBatchMean);
    std::vector<int> bad{1, 3};
    EXPECT_THROW(update_empirical_means(m, f, bad), InvalidArgument);
    EXPECT_THROW(EmpiricalMeans(2, 2, 0.0), InvalidArgument);
}

namespace {

    // Centers with the means set to centers[perm[c]] exactly.
    std::pair<ClassCenters, EmpiricalMeans> planted(int k, int d, const std::vector<int>& perm, Rng& rng) {
        ClassCenters c;
        c.num_classes = k;
        c.dim = d;
        c.centers = random_unit_rows(rng, static_cast<std::size_t>(k), static_cast<std::size_t>(d));
        EmpiricalMeans m(k, d, 0.1);
        for (int cls = 0; cls < k; ++cls) {
            auto src = c.center(perm[static_cast<std::size_t>(cls)]);
            std::copy(src.begin(), src.end(), m.means.row(static_cast<std::size_t>(cls)).begin());
            m.initialized[static_cast<std::size_t>(cls)] = 1;
        }
        return {c, m};
    }

} // namespace

TEST(AllocateCenters, RecoversPlantedPermutation) {
    Rng rng(12);
    auto [c, m] = planted(3, 8, {2, 0, 1}, rng);
    auto a = allocate_centers(c, m);
    EXPECT_EQ(a.pi, (std::vector<int>{2, 0, 1}));
    EXPECT_NEAR(a.cost, 0.0, 1e-12);
    auto h = allocate_centers(c, m, AllocationMethod::Hungarian);
    EXPECT_EQ(h.pi, a.pi);
}

TEST(AllocateCenters, SingleClassIsIdentity) {
    Rng rng(1);
    auto [c, m] = planted(1, 4, {0}, rng);
    EXPECT_EQ(allocate_centers(c, m).pi, std::vector<int>{0});
}

TEST(AllocateCenters, MatchesBruteForceForSmallK) {
    Rng rng(77);
    for (int k = 2; k <= 7; ++k) {
        for (int trial = 0; trial < 20; ++trial) {
            ClassCenters c;
            c.num_classes = k;
            c.dim = 6;
            c.centers = random_unit_rows(rng, static_cast<std::size_t>(k), 6);
            EmpiricalMeans m(k, 6, 0.1);
            m.means = random_unit_rows(rng, static_cast<std::size_t>(k), 6);
            std::fill(m.initialized.begin(), m.initialized.end(), 1);
            const auto table = allocation_cost_table(c, m);
            const double oracle = brute_force_assignment_cost(table, k);
            EXPECT_EQ(allocate_centers(c, m, AllocationMethod::Exhaustive).cost, oracle);
            EXPECT_NEAR(allocate_centers(c, m, AllocationMethod::Hungarian).cost, oracle, 1e-12);
        }
    }
}

TEST(AllocateCenters, HungarianBeatsRandomPermutationsForLargeK) {
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const int k = 12;
        ClassCenters c;
        c.num_classes = k;
        c.dim = 16;
        c.centers = random_unit_rows(rng, k, 16);
        EmpiricalMeans m(k, 16, 0.1);
        m.means = random_unit_rows(rng, k, 16);
        std::fill(m.initialized.begin(), m.initialized.end(), 1);
        auto a = allocate_centers(c, m);
        const auto table = allocation_cost_table(c, m);
        for (int r = 0; r < 1000; ++r) {
            auto perm = rng.sample_without_replacement(k, k);
            std::vector<int> pi(perm.begin(), perm.end());
            EXPECT_LE(a.cost, assignment_cost(table, pi) + 1e-12);
        }
    }
}

TEST(AllocateCenters, TiesResolveToLexicographicallySmallest) {
    // Every mean equidistant from both centers.
    ClassCenters c;
    c.num_classes = 2;
    c.dim = 2;
    c.centers = rows_of({{1, 0}, {-1, 0}});
    EmpiricalMeans m(2, 2, 0.1);
    m.means = rows_of({{0, 1}, {0, -1}});
    m.initialized = {1, 1};
    EXPECT_EQ(allocate_centers(c, m).pi, (std::vector<int>{0, 1}));
}

TEST(AllocateCenters, UninitializedMeansListed) {
    ClassCenters c;
    c.num_classes = 3;
    c.dim = 2;
    c.centers = rows_of({{1, 0}, {0, 1}, {-1, 0}});
    EmpiricalMeans m(3, 2, 0.1);
    m.initialized = {1, 0, 0};
    try {
        allocate_centers(c, m);
        FAIL() << "expected UninitializedMeans";
    } catch (const UninitializedMeans& e) {
        EXPECT_EQ(e.missing(), (std::vector<int>{2, 3}));
    }
}
