#pragma once

#include <functional>
#include <string>
#include <vector>

#include "centers.hpp"
#include "losses.hpp"
#include "numerics.hpp"
#include "rng.hpp"

namespace actionpp {

    // Finite-difference audit of every hand-derived loss gradient on random
    // instances. Used by the `gradcheck` subcommand and the acceptance suite.
    struct GradcheckResult {
        std::string loss;
        int instances = 0;
        double max_relative_error = 0.0;
    };

    struct GradcheckOptions {
        int instances = 100;
        double step = 1e-6;
        std::uint64_t seed = 0;
    };

    namespace detail {

        inline Tensor unit_rows(Rng& rng, std::size_t n, std::size_t d) {
            Tensor t({n, d});
            for (std::size_t i = 0; i < n; ++i) {
                auto v = random_unit_vector(rng, d);
                std::copy(v.begin(), v.end(), t.row(i).begin());
            }
            return t;
        }

        inline Tensor normal_tensor(Rng& rng, Shape shape, double scale = 1.0) {
            Tensor t(std::move(shape));
            for (double& v : t.flat()) v = scale * rng.normal();
            return t;
        }

        inline std::vector<int> uniform_labels(Rng& rng, std::size_t n, int k) {
            std::vector<int> y(n);
            for (int& v : y) v = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
            return y;
        }

        inline Tensor reshaped(const Tensor& like, std::span<const double> x) {
            return Tensor(like.shape(), std::vector<double>(x.begin(), x.end()));
        }

        inline std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

        // One random instance: returns the analytic gradient and fills `fd`.
        using Instance = std::function<double(Rng&, double)>;

        inline double check(std::span<const double> analytic, const std::function<double(std::span<const double>)>& f,
                            std::span<const double> x, double h) {
            return max_relative_error(analytic, finite_diff_gradient(f, x, h));
        }

    } // namespace detail

    inline std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opt = {}) {
        using detail::check;
        using detail::draw;
        const double h = opt.step;
        std::vector<std::pair<std::string, detail::Instance>> cases;

        cases.emplace_back("uniformity", [](Rng& rng, double step) {
            const auto k = draw(rng, 2, 8), d = draw(rng, 2, 16);
            Tensor psi = detail::unit_rows(rng, k, d);
            const double tau = rng.uniform(0.1, 2.0);
            auto r = uniformity_loss_and_grad(psi, tau);
            return check(r.grad.flat(),
                         [&](std::span<const double> x) { return uniformity_loss_and_grad(detail::reshaped(psi, x), tau).loss; },
                         psi.flat(), step);
        });

        cases.emplace_back("instance_discrimination", [](Rng& rng, double step) {
            const auto n = draw(rng, 2, 10), d = draw(rng, 2, 16);
            auto w = random_unit_vector(rng, d);
            Tensor mined = detail::unit_rows(rng, n, d);
            const auto lt = relational_distribution(random_unit_vector(rng, d), mined, rng.uniform(0.1, 1.0)).log_probs;
            const double tau = rng.uniform(0.1, 1.0);
            auto loss = relational_instance_loss(w, mined, lt, tau);
            return check(loss.grad("query").flat(),
                         [&](std::span<const double> x) { return relational_instance_loss(x, mined, lt, tau).value; }, w, step);
        });

        cases.emplace_back("anco", [](Rng& rng, double step) {
            const auto n = draw(rng, 4, 16), d = draw(rng, 2, 8);
            const int k = static_cast<int>(draw(rng, 2, 4));
            Tensor reps = detail::unit_rows(rng, n, d);
            auto y = detail::uniform_labels(rng, n, k);
            auto sets = select_query_key_sets(reps, y, draw(rng, 1, 4), rng);
            const double tau = rng.uniform(0.1, 1.0);
            auto loss = anco_loss(sets, reps, tau);
            return check(loss.grad("reps").flat(),
                         [&](std::span<const double> x) { return anco_loss(sets, detail::reshaped(reps, x), tau).value; },
                         reps.flat(), step);
        });

        cases.emplace_back("aaco", [](Rng& rng, double step) {
            const auto n = draw(rng, 4, 24), d = draw(rng, 2, 8);
            const int k = static_cast<int>(draw(rng, 2, 4));
            AacoBatch b;
            b.features = detail::unit_rows(rng, n, d);
            b.labels = detail::uniform_labels(rng, n, k);
            for (std::size_t i = 0; i < n; ++i) b.pixel_ids.push_back(1000 + 7 * i);
            b.class_centers = detail::unit_rows(rng, static_cast<std::size_t>(k), d);
            b.lambda_a = rng.uniform(0.0, 1.0);
            b.tau = rng.uniform(0.1, 1.0);
            b.positives_per_anchor = draw(rng, 1, 4);
            b.seed = rng.next_u64();
            auto loss = aaco_loss(b);
            return check(loss.grad("features").flat(),
                         [&](std::span<const double> x) {
                             AacoBatch p = b;
                             p.features = detail::reshaped(b.features, x);
                             return aaco_loss(p).value;
                         },
                         b.features.flat(), step);
        });

        cases.emplace_back("dice_ce", [](Rng& rng, double step) {
            const auto b = draw(rng, 1, 2), k = draw(rng, 2, 4), hh = draw(rng, 2, 4), ww = draw(rng, 2, 4);
            Tensor logits = detail::normal_tensor(rng, {b, k, hh, ww});
            auto y = detail::uniform_labels(rng, b * hh * ww, static_cast<int>(k));
            auto loss = dice_ce_loss(logits, y);
            return check(loss.grad("logits").flat(),
                         [&](std::span<const double> x) { return dice_ce_loss(detail::reshaped(logits, x), y).value; },
                         logits.flat(), step);
        });

        cases.emplace_back("pseudo_label_ce", [](Rng& rng, double step) {
            const auto b = draw(rng, 1, 2), k = draw(rng, 2, 4), hh = draw(rng, 2, 4), ww = draw(rng, 2, 4);
            Tensor student = detail::normal_tensor(rng, {b, k, hh, ww});
            Tensor teacher = channel_softmax(detail::normal_tensor(rng, {b, k, hh, ww}, 2.0));
            const double threshold = rng.uniform(0.0, 0.8);
            auto loss = pseudo_label_ce_loss(student, teacher, threshold);
            return check(loss.grad("student_logits").flat(),
                         [&](std::span<const double> x) {
                             return pseudo_label_ce_loss(detail::reshaped(student, x), teacher, threshold).value;
                         },
                         student.flat(), step);
        });

        std::vector<GradcheckResult> out;
        for (std::size_t c = 0; c < cases.size(); ++c) {
            GradcheckResult r{cases[c].first, opt.instances, 0.0};
            for (int i = 0; i < opt.instances; ++i) {
                Rng rng = Rng::derive(opt.seed, {0x67726164ULL, c, static_cast<std::uint64_t>(i)});
                r.max_relative_error = std::max(r.max_relative_error, cases[c].second(rng, h));
            }
            out.push_back(r);
        }
        return out;
    }

} // namespace actionpp
