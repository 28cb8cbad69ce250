#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace actionpp {

    inline constexpr double kZeroNormThreshold = 1e-12;

    inline double dot(std::span<const double> a, std::span<const double> b) {
        if (a.size() != b.size()) {
            throw ShapeMismatch("dot of length " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
        }
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    }

    inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

    inline double squared_distance(std::span<const double> a, std::span<const double> b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double t = a[i] - b[i];
            s += t * t;
        }
        return s;
    }

    // A point on S^{d-1}. Construction goes through normalize_to_sphere or
    // from_normalized (which verifies the norm), so every instance satisfies
    // | ||v|| - 1 | <= 1e-9.
    class UnitVector {
    public:
        static constexpr double kTolerance = 1e-9;

        static UnitVector from_normalized(std::vector<double> values) {
            const double n = l2_norm(values);
            if (std::abs(n - 1.0) > kTolerance) {
                throw InvalidArgument("vector norm " + std::to_string(n) + " is not 1");
            }
            return UnitVector(std::move(values));
        }

        std::size_t dim() const noexcept { return values_.size(); }
        std::span<const double> values() const noexcept { return values_; }
        double operator[](std::size_t i) const noexcept { return values_[i]; }

        friend bool operator==(const UnitVector&, const UnitVector&) = default;

    private:
        explicit UnitVector(std::vector<double> v) : values_(std::move(v)) {}
        friend UnitVector normalize_to_sphere(std::span<const double> v);

        std::vector<double> values_;
    };

    inline UnitVector normalize_to_sphere(std::span<const double> v) {
        const double n = l2_norm(v);
        if (!std::isfinite(n)) throw NonFiniteInput("normalize_to_sphere");
        if (n < kZeroNormThreshold) throw ZeroVector("cannot normalize a vector of norm " + std::to_string(n));
        std::vector<double> out(v.begin(), v.end());
        for (double& x : out) x /= n;
        return UnitVector(std::move(out));
    }

    // In-place retraction used by the optimizers and heads; returns the norm
    // before normalization.
    inline double normalize_in_place(std::span<double> v) {
        const double n = l2_norm(v);
        if (n < kZeroNormThreshold) throw ZeroVector("cannot normalize a vector of norm " + std::to_string(n));
        for (double& x : v) x /= n;
        return n;
    }

    inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
        const double na = l2_norm(a);
        const double nb = l2_norm(b);
        if (na < kZeroNormThreshold || nb < kZeroNormThreshold) {
            throw ZeroVector("cosine_similarity of a zero-norm vector");
        }
        return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
    }

    // d cos(a, b) / d a, written into out. Unclamped derivative; the clamp only
    // ever bites at |cos| == 1 where the derivative is zero anyway.
    inline void cosine_similarity_grad(std::span<const double> a, std::span<const double> b, std::span<double> out) {
        const double na = l2_norm(a);
        const double nb = l2_norm(b);
        if (na < kZeroNormThreshold || nb < kZeroNormThreshold) {
            throw ZeroVector("cosine_similarity of a zero-norm vector");
        }
        const double c = dot(a, b) / (na * nb);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = b[i] / (na * nb) - c * a[i] / (na * na);
    }

    inline double log_sum_exp(std::span<const double> x) {
        if (x.empty()) throw InvalidArgument("log_sum_exp of an empty vector");
        const double m = *std::max_element(x.begin(), x.end());
        double s = 0.0;
        for (double v : x) s += std::exp(v - m);
        return m + std::log(s);
    }

    inline std::vector<double> stable_log_softmax(std::span<const double> logits) {
        if (logits.empty()) throw InvalidArgument("stable_log_softmax needs at least one logit");
        for (double v : logits) {
            if (!std::isfinite(v)) throw NonFiniteInput("stable_log_softmax");
        }
        const double m = *std::max_element(logits.begin(), logits.end());
        double s = 0.0;
        for (double v : logits) s += std::exp(v - m);
        const double log_s = std::log(s);
        std::vector<double> out(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) out[i] = (logits[i] - m) - log_s;
        return out;
    }

    inline std::vector<double> softmax(std::span<const double> logits) {
        auto out = stable_log_softmax(logits);
        for (double& v : out) v = std::exp(v);
        return out;
    }

    // Central differences, one coordinate at a time. x is copied; f sees the
    // perturbed copy.
    inline std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)>& f,
                                                    std::span<const double> x, double h) {
        if (!(h > 0.0)) throw InvalidArgument("finite difference step must be positive");
        std::vector<double> probe(x.begin(), x.end());
        std::vector<double> grad(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = probe[i];
            probe[i] = orig + h;
            const double fp = f(probe);
            probe[i] = orig - h;
            const double fm = f(probe);
            probe[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NonFiniteEvaluation("probe at coordinate " + std::to_string(i));
            }
            grad[i] = (fp - fm) / (2.0 * h);
        }
        return grad;
    }

    // max_i |a_i - b_i| / max(1, max_i |b_i|). The denominator keeps the
    // measure meaningful when the reference gradient is tiny.
    inline double max_relative_error(std::span<const double> analytic, std::span<const double> reference) {
        double scale = 1.0;
        for (double v : reference) scale = std::max(scale, std::abs(v));
        double err = 0.0;
        for (std::size_t i = 0; i < analytic.size(); ++i) err = std::max(err, std::abs(analytic[i] - reference[i]));
        return err / scale;
    }

    inline std::vector<double> random_unit_vector(Rng& rng, std::size_t dim) {
        std::vector<double> v(dim);
        double n = 0.0;
        while (n < 1e-6) {
            for (double& x : v) x = rng.normal();
            n = l2_norm(v);
        }
        for (double& x : v) x /= n;
        return v;
    }

} // namespace actionpp
