#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "numerics.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace actionpp {

    inline constexpr int kMaxClasses = 64;

    // With tau = 0.1 the self term swamps the softmax and fixed-step descent
    // stalls far from the simplex; tau = 1 converges in a few hundred steps.
    struct UniformityConfig {
        double tau = 1.0;
        double learning_rate = 0.1;
        int max_iters = 20000;
        double grad_tol = 1e-7;
        std::uint64_t seed = 0;

        void validate() const {
            if (!(tau > 0.0)) throw InvalidArgument("uniformity tau must be positive");
            if (!(learning_rate > 0.0)) throw InvalidArgument("uniformity learning_rate must be positive");
            if (max_iters < 1) throw InvalidArgument("uniformity max_iters must be >= 1");
            if (!(grad_tol >= 0.0)) throw InvalidArgument("uniformity grad_tol must be non-negative");
        }
    };

    // K unit-norm rows on S^{d-1}.
    struct ClassCenters {
        int num_classes = 0;
        int dim = 0;
        Tensor centers;  // K x d
        double tau = 1.0;
        double final_loss = 0.0;
        double final_grad_norm = 0.0;
        int iterations = 0;

        std::span<const double> center(int index) const { return centers.row(static_cast<std::size_t>(index)); }

        double max_pairwise_inner_product() const {
            double best = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < num_classes; ++a)
                for (int b = a + 1; b < num_classes; ++b) best = std::max(best, dot(center(a), center(b)));
            return best;
        }
    };

    struct UniformityResult {
        double loss = 0.0;
        Tensor grad;  // Euclidean gradient, K x d
    };

    // sum_c log sum_c' exp(psi_c . psi_c' / tau), self term included. The
    // gradient w.r.t. psi_c is sum_c' (P_cc' + P_c'c) psi_c' / tau with P the
    // row-wise softmax of the Gram matrix.
    inline UniformityResult uniformity_loss_and_grad(const Tensor& centers, double tau) {
        if (centers.rank() != 2) throw ShapeMismatch("centers must be K x d");
        if (!(tau > 0.0)) throw InvalidArgument("tau must be positive");
        const std::size_t k = centers.dim(0);
        const std::size_t d = centers.dim(1);

        std::vector<double> logits(k * k);
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) logits[a * k + b] = dot(centers.row(a), centers.row(b)) / tau;

        double loss = 0.0;
        std::vector<double> prob(k * k);
        for (std::size_t a = 0; a < k; ++a) {
            std::span<const double> row(logits.data() + a * k, k);
            const double lse = log_sum_exp(row);
            loss += lse;
            for (std::size_t b = 0; b < k; ++b) prob[a * k + b] = std::exp(row[b] - lse);
        }

        Tensor grad({k, d});
        for (std::size_t a = 0; a < k; ++a) {
            auto g = grad.row(a);
            for (std::size_t b = 0; b < k; ++b) {
                const double w = (prob[a * k + b] + prob[b * k + a]) / tau;
                auto other = centers.row(b);
                for (std::size_t i = 0; i < d; ++i) g[i] += w * other[i];
            }
        }
        return {loss, std::move(grad)};
    }

    // Removes the radial component of each gradient row: g - (g . psi) psi.
    inline Tensor project_to_tangent(const Tensor& centers, const Tensor& grad) {
        Tensor out = grad;
        for (std::size_t a = 0; a < centers.dim(0); ++a) {
            auto g = out.row(a);
            auto p = centers.row(a);
            const double radial = dot(g, p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= radial * p[i];
        }
        return out;
    }

    // Offline projected gradient descent on the uniformity loss: tangent
    // projection, fixed step, per-row renormalization. The start point is K
    // Gaussian directions drawn from config.seed.
    inline ClassCenters precompute_centers(int num_classes, int dim, const UniformityConfig& config) {
        config.validate();
        if (num_classes < 2) throw InvalidArgument("precompute_centers needs K >= 2");
        if (num_classes > kMaxClasses) throw InvalidArgument("K > 64 is not supported");
        if (dim < 1) throw InvalidArgument("latent dimension must be positive");
        if (dim < num_classes - 1) {
            std::clog << "warning: d=" << dim << " < K-1=" << num_classes - 1
                      << "; the regular simplex is not reachable\n";
        }

        const auto k = static_cast<std::size_t>(num_classes);
        const auto d = static_cast<std::size_t>(dim);
        Rng rng = Rng::derive(config.seed, {0x63656e74ULL, k, d});
        Tensor psi({k, d});
        for (std::size_t a = 0; a < k; ++a) {
            auto v = random_unit_vector(rng, d);
            std::copy(v.begin(), v.end(), psi.row(a).begin());
        }

        ClassCenters out;
        out.num_classes = num_classes;
        out.dim = dim;
        out.tau = config.tau;

        double grad_norm = std::numeric_limits<double>::infinity();
        int iter = 0;
        for (; iter < config.max_iters; ++iter) {
            auto [loss, grad] = uniformity_loss_and_grad(psi, config.tau);
            Tensor tangent = project_to_tangent(psi, grad);
            grad_norm = l2_norm(tangent.flat());
            out.final_loss = loss;
            if (grad_norm <= config.grad_tol) break;
            for (std::size_t a = 0; a < k; ++a) {
                auto p = psi.row(a);
                auto g = tangent.row(a);
                for (std::size_t i = 0; i < d; ++i) p[i] -= config.learning_rate * g[i];
                normalize_in_place(p);
            }
        }
        if (iter == config.max_iters) {
            auto [loss, grad] = uniformity_loss_and_grad(psi, config.tau);
            grad_norm = l2_norm(project_to_tangent(psi, grad).flat());
            out.final_loss = loss;
            if (grad_norm > config.grad_tol) throw NotConverged(grad_norm, iter);
        }
        out.centers = std::move(psi);
        out.final_grad_norm = grad_norm;
        out.iterations = iter;
        return out;
    }

    // Moving-average, unit-normalized per-class feature means.
    struct EmpiricalMeans {
        int num_classes = 0;
        int dim = 0;
        double eta = 0.1;
        Tensor means;                       // K x d; rows meaningful only when initialized
        std::vector<std::uint8_t> initialized;

        EmpiricalMeans() = default;
        EmpiricalMeans(int k, int d, double eta_)
            : num_classes(k), dim(d), eta(eta_),
              means({static_cast<std::size_t>(k), static_cast<std::size_t>(d)}),
              initialized(static_cast<std::size_t>(k), 0) {
            if (!(eta > 0.0 && eta <= 1.0)) throw InvalidArgument("eta must lie in (0, 1]");
        }

        bool all_initialized() const {
            return std::all_of(initialized.begin(), initialized.end(), [](std::uint8_t f) { return f != 0; });
        }

        std::vector<int> missing_classes() const {
            std::vector<int> out;
            for (int c = 0; c < num_classes; ++c)
                if (!initialized[static_cast<std::size_t>(c)]) out.push_back(c + 1);
            return out;
        }

        std::span<const double> mean(int class_id) const { return means.row(static_cast<std::size_t>(class_id - 1)); }

        friend bool operator==(const EmpiricalMeans&, const EmpiricalMeans&) = default;
    };

    // labels are 1-based class ids aligned with the rows of features (n x d).
    inline EmpiricalMeans update_empirical_means(EmpiricalMeans means, const Tensor& features,
                                                 std::span<const int> labels) {
        if (features.rank() != 2 || features.dim(1) != static_cast<std::size_t>(means.dim)) {
            throw ShapeMismatch("features must be n x " + std::to_string(means.dim));
        }
        if (features.dim(0) != labels.size()) throw ShapeMismatch("features and labels differ in length");
        const auto k = static_cast<std::size_t>(means.num_classes);
        const auto d = static_cast<std::size_t>(means.dim);

        std::vector<double> sums(k * d, 0.0);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const int y = labels[i];
            if (y < 1 || y > means.num_classes) throw InvalidArgument("label " + std::to_string(y) + " out of range");
            const auto c = static_cast<std::size_t>(y - 1);
            auto f = features.row(i);
            for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += f[j];
            ++counts[c];
        }

        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            std::span<double> batch_mean(sums.data() + c * d, d);
            if (l2_norm(batch_mean) < kZeroNormThreshold) {
                throw DegenerateBatchMean("class " + std::to_string(c + 1) + " features sum to zero");
            }
            normalize_in_place(batch_mean);
            auto m = means.means.row(c);
            if (!means.initialized[c]) {
                std::copy(batch_mean.begin(), batch_mean.end(), m.begin());
                means.initialized[c] = 1;
                continue;
            }
            for (std::size_t j = 0; j < d; ++j) m[j] = (1.0 - means.eta) * m[j] + means.eta * batch_mean[j];
            if (l2_norm(m) < kZeroNormThreshold) {
                throw DegenerateBatchMean("class " + std::to_string(c + 1) + " moving average collapsed");
            }
            normalize_in_place(m);
        }
        return means;
    }

    // pi[c] is the 0-based center index allocated to class c+1.
    struct Assignment {
        std::vector<int> pi;
        double cost = 0.0;

        std::uint64_t hash() const {
            std::uint64_t h = 0xcbf29ce484222325ULL;
            for (int v : pi) {
                h ^= static_cast<std::uint64_t>(v);
                h *= 0x100000001b3ULL;
            }
            return h;
        }

        friend bool operator==(const Assignment& a, const Assignment& b) { return a.pi == b.pi; }
    };

    // cost[c][j] = || psi_j - mean_c ||_2, row-major K x K.
    inline std::vector<double> allocation_cost_table(const ClassCenters& centers, const EmpiricalMeans& means) {
        const int k = centers.num_classes;
        std::vector<double> cost(static_cast<std::size_t>(k * k));
        for (int c = 0; c < k; ++c)
            for (int j = 0; j < k; ++j)
                cost[static_cast<std::size_t>(c * k + j)] =
                    std::sqrt(squared_distance(centers.center(j), means.means.row(static_cast<std::size_t>(c))));
        return cost;
    }

    inline double assignment_cost(std::span<const double> cost, std::span<const int> pi) {
        const std::size_t k = pi.size();
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += cost[c * k + static_cast<std::size_t>(pi[c])];
        return s;
    }

    // Exhaustive search in lexicographic order; strict improvement keeps the
    // lexicographically smallest permutation among exact ties.
    inline std::vector<int> solve_assignment_exhaustive(std::span<const double> cost, int k) {
        std::vector<int> perm(static_cast<std::size_t>(k));
        std::iota(perm.begin(), perm.end(), 0);
        std::vector<int> best = perm;
        double best_cost = assignment_cost(cost, perm);
        while (std::next_permutation(perm.begin(), perm.end())) {
            const double c = assignment_cost(cost, perm);
            if (c < best_cost) {
                best_cost = c;
                best = perm;
            }
        }
        return best;
    }

    // Hungarian method with row/column potentials, O(K^3).
    inline std::vector<int> solve_assignment_hungarian(std::span<const double> cost, int k) {
        const auto n = static_cast<std::size_t>(k);
        const double inf = std::numeric_limits<double>::infinity();
        std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
        std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
        std::vector<char> used(n + 1);
        for (std::size_t row = 1; row <= n; ++row) {
            match[0] = row;
            std::size_t col0 = 0;
            std::fill(minv.begin(), minv.end(), inf);
            std::fill(used.begin(), used.end(), 0);
            do {
                used[col0] = 1;
                const std::size_t r0 = match[col0];
                double delta = inf;
                std::size_t col1 = 0;
                for (std::size_t j = 1; j <= n; ++j) {
                    if (used[j]) continue;
                    const double cur = cost[(r0 - 1) * n + (j - 1)] - u[r0] - v[j];
                    if (cur < minv[j]) {
                        minv[j] = cur;
                        way[j] = col0;
                    }
                    if (minv[j] < delta) {
                        delta = minv[j];
                        col1 = j;
                    }
                }
                for (std::size_t j = 0; j <= n; ++j) {
                    if (used[j]) {
                        u[match[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                col0 = col1;
            } while (match[col0] != 0);
            do {
                const std::size_t col1 = way[col0];
                match[col0] = match[col1];
                col0 = col1;
            } while (col0 != 0);
        }
        std::vector<int> pi(n);
        for (std::size_t j = 1; j <= n; ++j) pi[match[j] - 1] = static_cast<int>(j - 1);
        return pi;
    }

    enum class AllocationMethod { Auto, Exhaustive, Hungarian };

    inline constexpr int kExhaustiveAllocationLimit = 8;

    // argmin over permutations of sum_c || psi_{pi(c)} - mean_c ||_2.
    inline Assignment allocate_centers(const ClassCenters& centers, const EmpiricalMeans& means,
                                       AllocationMethod method = AllocationMethod::Auto) {
        if (centers.num_classes != means.num_classes || centers.dim != means.dim) {
            throw ShapeMismatch("centers and empirical means disagree on K or d");
        }
        if (!means.all_initialized()) throw UninitializedMeans(means.missing_classes());
        const int k = centers.num_classes;
        const auto cost = allocation_cost_table(centers, means);
        Assignment out;
        const bool exhaustive = method == AllocationMethod::Exhaustive ||
                                (method == AllocationMethod::Auto && k <= kExhaustiveAllocationLimit);
        out.pi = exhaustive ? solve_assignment_exhaustive(cost, k) : solve_assignment_hungarian(cost, k);
        out.cost = assignment_cost(cost, out.pi);
        return out;
    }

} // namespace actionpp
