#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

namespace actionpp {

    // SplitMix64 (Steele, Lea & Flood 2014). The whole generator state is one
    // 64-bit counter, advanced by the golden-ratio increment 0x9E3779B97F4A7C15
    // and finalized with the Stafford "Mix13" variant:
    //   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    //   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    //   z =  z ^ (z >> 31)
    // Only integer arithmetic is involved, so draw sequences are identical on
    // every platform. Floating-point helpers below are built from those words
    // with fixed formulas (no std:: distributions, whose output is
    // implementation-defined).
    class Rng {
    public:
        static constexpr std::uint64_t kIncrement = 0x9E3779B97F4A7C15ULL;

        explicit constexpr Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

        static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
            return z ^ (z >> 31);
        }

        // Independent substream keyed by (seed, tags...). Used wherever a draw
        // must not depend on how many numbers were consumed elsewhere.
        static constexpr Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept {
            std::uint64_t h = mix(seed + kIncrement);
            for (std::uint64_t t : tags) h = mix(h ^ mix(t + kIncrement));
            return Rng(h);
        }

        constexpr std::uint64_t next_u64() noexcept {
            state_ += kIncrement;
            return mix(state_);
        }

        // Uniform in [0, 1) with 53 random bits.
        double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

        double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

        // Uniform integer in [0, n). Rejection sampling, unbiased.
        std::uint64_t below(std::uint64_t n) noexcept {
            if (n <= 1) return 0;
            const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
            std::uint64_t x;
            do {
                x = next_u64();
            } while (x >= limit);
            return x % n;
        }

        // Standard normal via Box-Muller; the sine branch is discarded so the
        // state stays a single counter.
        double normal() noexcept {
            double u1 = uniform();
            while (u1 <= 0.0) u1 = uniform();
            const double u2 = uniform();
            return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
        }

        double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

        // k distinct indices from [0, n) in draw order (partial Fisher-Yates).
        std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
            std::vector<std::size_t> pool(n);
            for (std::size_t i = 0; i < n; ++i) pool[i] = i;
            if (k > n) k = n;
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(below(n - i));
                std::swap(pool[i], pool[j]);
            }
            pool.resize(k);
            return pool;
        }

        constexpr std::uint64_t state() const noexcept { return state_; }
        constexpr void set_state(std::uint64_t s) noexcept { state_ = s; }

        friend constexpr bool operator==(const Rng&, const Rng&) = default;

    private:
        std::uint64_t state_;
    };

} // namespace actionpp
