#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace actionpp {

    // Base of every error raised by the library. Callers that only care about
    // "something in actionpp failed" can catch this one type.
    class Error : public std::runtime_error {
    public:
        using std::runtime_error::runtime_error;
    };

#define ACTIONPP_DEFINE_ERROR(Name)                                    \
    class Name : public Error {                                        \
    public:                                                            \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    }

    ACTIONPP_DEFINE_ERROR(ZeroVector);
    ACTIONPP_DEFINE_ERROR(NonFiniteInput);
    ACTIONPP_DEFINE_ERROR(NonFiniteEvaluation);
    ACTIONPP_DEFINE_ERROR(ShapeMismatch);
    ACTIONPP_DEFINE_ERROR(InvalidArgument);
    ACTIONPP_DEFINE_ERROR(DegenerateBatchMean);
    ACTIONPP_DEFINE_ERROR(BatchTooSmall);
    ACTIONPP_DEFINE_ERROR(OutOfRange);
    ACTIONPP_DEFINE_ERROR(NonFiniteGradient);
    ACTIONPP_DEFINE_ERROR(InfeasibleProfile);
    ACTIONPP_DEFINE_ERROR(PoolTooSmall);
    ACTIONPP_DEFINE_ERROR(EmptyMask);
    ACTIONPP_DEFINE_ERROR(MissingClass);
    ACTIONPP_DEFINE_ERROR(ConfigError);
    ACTIONPP_DEFINE_ERROR(DataError);
    ACTIONPP_DEFINE_ERROR(IoError);
    ACTIONPP_DEFINE_ERROR(VersionMismatch);
    ACTIONPP_DEFINE_ERROR(CorruptFile);

#undef ACTIONPP_DEFINE_ERROR

    class NotConverged : public Error {
    public:
        NotConverged(double grad_norm, int iterations)
            : Error("NotConverged: gradient norm " + std::to_string(grad_norm) + " after " +
                    std::to_string(iterations) + " iterations"),
              grad_norm_(grad_norm), iterations_(iterations) {}

        double grad_norm() const noexcept { return grad_norm_; }
        int iterations() const noexcept { return iterations_; }

    private:
        double grad_norm_;
        int iterations_;
    };

    class UninitializedMeans : public Error {
    public:
        explicit UninitializedMeans(std::vector<int> missing)
            : Error("UninitializedMeans: classes without an empirical mean: " + join(missing)),
              missing_(std::move(missing)) {}

        // 1-based class ids.
        const std::vector<int>& missing() const noexcept { return missing_; }

    private:
        static std::string join(const std::vector<int>& ids) {
            std::string out;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (i) out += ", ";
                out += std::to_string(ids[i]);
            }
            return out;
        }
        std::vector<int> missing_;
    };

    class NonFiniteLoss : public Error {
    public:
        NonFiniteLoss(std::int64_t iteration, const std::string& component)
            : Error("NonFiniteLoss: " + component + " at iteration " + std::to_string(iteration)),
              iteration_(iteration) {}

        std::int64_t iteration() const noexcept { return iteration_; }

    private:
        std::int64_t iteration_;
    };

} // namespace actionpp
