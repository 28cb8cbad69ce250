#include <gtest/gtest.h>

#include "actionpp/schedule.hpp"

using namespace actionpp;

namespace {

    TemperatureSchedule make(ScheduleKind kind, std::int64_t total = 1000) {
        TemperatureSchedule s;
        s.kind = kind;
        s.total_iters = total;
        s.seed = 17;
        return s;
    }

    constexpr ScheduleKind kAllKinds[] = {ScheduleKind::Cosine, ScheduleKind::Fixed, ScheduleKind::Step,
                                          ScheduleKind::Random, ScheduleKind::Oscillating};

} // namespace

TEST(Schedule, CosineClosedForm) {
    auto s = make(ScheduleKind::Cosine, 1000);
    EXPECT_NEAR(s.at(0), 1.0, 1e-12);
    EXPECT_NEAR(s.at(250), 0.55, 1e-12);
    EXPECT_NEAR(s.at(500), 0.1, 1e-12);
    EXPECT_NEAR(s.at(1000), 1.0, 1e-12);
    EXPECT_NEAR(s.at(0), s.at(1000), 1e-12);
}

TEST(Schedule, CosinePeriodMultiplier) {
    auto s = make(ScheduleKind::Cosine, 1000);
    s.period_multiplier = 0.5;
    EXPECT_NEAR(s.at(250), 0.1, 1e-12);
    EXPECT_NEAR(s.at(500), 1.0, 1e-12);
}

TEST(Schedule, FixedStepOscillating) {
    EXPECT_EQ(make(ScheduleKind::Fixed).at(321), 1.0);

    auto step = make(ScheduleKind::Step, 1000);
    EXPECT_DOUBLE_EQ(step.at(0), 1.0);
    EXPECT_DOUBLE_EQ(step.at(249), 1.0);
    EXPECT_DOUBLE_EQ(step.at(250), 0.7);
    EXPECT_DOUBLE_EQ(step.at(999), 0.1);
    EXPECT_DOUBLE_EQ(step.at(1000), 0.1);

    auto osc = make(ScheduleKind::Oscillating, 1000);
    EXPECT_DOUBLE_EQ(osc.at(0), 1.0);
    EXPECT_NEAR(osc.at(250), 0.55, 1e-12);
    EXPECT_NEAR(osc.at(500), 0.1, 1e-12);
    EXPECT_NEAR(osc.at(750), 0.55, 1e-12);
}

TEST(Schedule, RandomIsSeedDeterministic) {
    auto a = make(ScheduleKind::Random), b = make(ScheduleKind::Random), c = make(ScheduleKind::Random);
    c.seed = 18;
    bool differs = false;
    for (std::int64_t t = 0; t <= 1000; ++t) {
        EXPECT_EQ(a.at(t), b.at(t));
        differs |= a.at(t) != c.at(t);
    }
    EXPECT_TRUE(differs);
}

TEST(Schedule, RangeHoldsForEveryKind) {
    Rng rng(1);
    for (ScheduleKind kind : kAllKinds) {
        auto s = make(kind, 5000);
        s.period_multiplier = 0.37;
        for (int i = 0; i < 10000; ++i) {
            const auto t = static_cast<std::int64_t>(rng.below(5001));
            const double tau = s.at(t);
            EXPECT_GE(tau, s.tau_minus);
            EXPECT_LE(tau, s.tau_plus);
        }
    }
}

TEST(Schedule, DegenerateBoundsAreConstant) {
    for (ScheduleKind kind : kAllKinds) {
        auto s = make(kind, 100);
        s.tau_minus = s.tau_plus = 0.3;
        for (std::int64_t t = 0; t <= 100; ++t) EXPECT_EQ(s.at(t), 0.3);
    }
}

TEST(Schedule, OutOfRangeAndValidation) {
    auto s = make(ScheduleKind::Cosine, 10);
    EXPECT_THROW(s.at(-1), OutOfRange);
    EXPECT_THROW(s.at(11), OutOfRange);
    s.tau_minus = 2.0;
    EXPECT_THROW(s.validate(), InvalidArgument);
    EXPECT_EQ(schedule_kind_from_string("oscillating"), ScheduleKind::Oscillating);
    EXPECT_THROW(schedule_kind_from_string("linear"), InvalidArgument);
}
