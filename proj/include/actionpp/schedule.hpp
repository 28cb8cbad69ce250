#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "errors.hpp"
#include "rng.hpp"

namespace actionpp {

    enum class ScheduleKind { Cosine, Fixed, Step, Random, Oscillating };

    inline std::string to_string(ScheduleKind kind) {
        switch (kind) {
            case ScheduleKind::Cosine: return "cosine";
            case ScheduleKind::Fixed: return "fixed";
            case ScheduleKind::Step: return "step";
            case ScheduleKind::Random: return "random";
            case ScheduleKind::Oscillating: return "oscillating";
        }
        return "cosine";
    }

    inline ScheduleKind schedule_kind_from_string(const std::string& name) {
        if (name == "cosine") return ScheduleKind::Cosine;
        if (name == "fixed") return ScheduleKind::Fixed;
        if (name == "step") return ScheduleKind::Step;
        if (name == "random") return ScheduleKind::Random;
        if (name == "oscillating") return ScheduleKind::Oscillating;
        throw InvalidArgument("unknown schedule kind '" + name + "'");
    }

    // Temperature as a function of the iteration t in [0, T].
    //
    //  cosine       tau- + 0.5 (1 + cos(2 pi t / P)) (tau+ - tau-),  P = T * period_multiplier
    //  fixed        tau+
    //  step         staircase from tau+ down to tau- in step_count equal plateaus over [0, T]
    //  random       uniform in [tau-, tau+], drawn from a substream keyed by (seed, t)
    //  oscillating  triangle wave with period P: tau+ at t = 0, tau- at t = P/2
    struct TemperatureSchedule {
        ScheduleKind kind = ScheduleKind::Cosine;
        double tau_minus = 0.1;
        double tau_plus = 1.0;
        std::int64_t total_iters = 1;
        double period_multiplier = 1.0;
        std::uint64_t seed = 0;
        int step_count = 4;

        void validate() const {
            if (!(tau_minus > 0.0) || !(tau_minus <= tau_plus)) {
                throw InvalidArgument("temperature bounds must satisfy 0 < tau- <= tau+");
            }
            if (total_iters < 1) throw InvalidArgument("schedule needs total_iters >= 1");
            if (!(period_multiplier > 0.0)) throw InvalidArgument("period_multiplier must be positive");
            if (step_count < 1) throw InvalidArgument("step_count must be >= 1");
        }

        double at(std::int64_t t) const {
            if (t < 0 || t > total_iters) {
                throw OutOfRange("iteration " + std::to_string(t) + " outside [0, " + std::to_string(total_iters) + "]");
            }
            const double span = tau_plus - tau_minus;
            const double period = static_cast<double>(total_iters) * period_multiplier;
            double tau = tau_plus;
            switch (kind) {
                case ScheduleKind::Cosine:
                    tau = tau_minus + 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * static_cast<double>(t) / period)) * span;
                    break;
                case ScheduleKind::Fixed:
                    tau = tau_plus;
                    break;
                case ScheduleKind::Step: {
                    if (step_count == 1) {
                        tau = tau_plus;
                        break;
                    }
                    const auto plateau = std::min<std::int64_t>(
                        step_count - 1, (t * step_count) / total_iters);
                    tau = tau_plus - span * static_cast<double>(plateau) / static_cast<double>(step_count - 1);
                    break;
                }
                case ScheduleKind::Random: {
                    Rng rng = Rng::derive(seed, {0x74656d70ULL, static_cast<std::uint64_t>(t)});
                    tau = rng.uniform(tau_minus, tau_plus);
                    break;
                }
                case ScheduleKind::Oscillating: {
                    const double phase = std::fmod(static_cast<double>(t), period) / period;  // [0, 1)
                    const double tri = phase < 0.5 ? 1.0 - 2.0 * phase : 2.0 * phase - 1.0;   // 1 -> 0 -> 1
                    tau = tau_minus + tri * span;
                    break;
                }
            }
            return std::clamp(tau, tau_minus, tau_plus);
        }
    };

    inline double temperature_at(const TemperatureSchedule& schedule, std::int64_t t) { return schedule.at(t); }

} // namespace actionpp
