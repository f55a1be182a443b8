#include "cbvp/dynamics.hpp"
#include "cbvp/errors.hpp"
#include "cbvp/integrator.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace cbvp;

namespace {

constexpr double kMu = 3.00348e-6;

VectorField oscillator()
{
    return [](double, std::span<const double> y, std::span<double> d) {
        d[0] = y[2];
        d[1] = y[3];
        d[2] = -y[0];
        d[3] = -y[1];
    };
}

// A planar state near Earth at roughly lunar distance.
State6 cislunar_state()
{
    return State6{{1 - kMu + 0.0025, 0.0, 0.0, 0.0, 0.035, 0.0}};
}

double day_nd()
{
    return 86400.0 / SystemConstants{}.time_unit_s;
}

} // namespace

TEST_CASE("zero field returns the initial state exactly")
{
    const VectorField zero = [](double, std::span<const double>, std::span<double> d) {
        std::fill(d.begin(), d.end(), 0.0);
    };
    const std::vector<double> y0{1.5, -2.25, 3.0};
    for (RkMethod m : {RkMethod::Dop853, RkMethod::Dopri5}) {
        IntegratorConfig cfg;
        cfg.method = m;
        CHECK(integrate(zero, 0.0, y0, 7.0, cfg) == y0);
        CHECK(integrate(zero, 0.0, y0, -3.0, cfg) == y0);
    }
}

TEST_CASE("harmonic oscillator over one period")
{
    const std::vector<double> y0{1.0, 0.0, 0.0, 0.5};
    for (RkMethod m : {RkMethod::Dop853, RkMethod::Dopri5}) {
        IntegratorConfig cfg;
        cfg.method = m;
        const auto y = integrate(oscillator(), 0.0, y0, 2 * std::numbers::pi, cfg);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(std::abs(y[i] - y0[i]) < 1e-9);
    }
}

TEST_CASE("forward then backward is the identity")
{
    IntegratorConfig cfg;
    const State6 s0 = cislunar_state();
    const double span = 5 * day_nd();
    const State6 s1 = propagate(s0, 0.0, span, kMu, cfg);
    const State6 back = propagate(s1, span, 0.0, kMu, cfg);
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(std::abs(back[i] - s0[i]) < 1e-8);
}

TEST_CASE("step limit")
{
    IntegratorConfig cfg;
    cfg.max_steps = 3;
    CHECK_THROWS_AS(propagate(cislunar_state(), 0.0, 10 * day_nd(), kMu, cfg), StepLimitError);
}

TEST_CASE("config validation")
{
    IntegratorConfig cfg;
    cfg.rel_tol = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = IntegratorConfig{};
    cfg.abs_tol = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = IntegratorConfig{};
    cfg.max_steps = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("tighter tolerance never increases the error")
{
    const State6 s0 = cislunar_state();
    const double span = 3 * day_nd();
    IntegratorConfig ref;
    ref.rel_tol = ref.abs_tol = 1e-13;
    const State6 truth = propagate(s0, 0.0, span, kMu, ref);
    double previous = INFINITY;
    for (double tol : {1e-6, 5e-7, 2.5e-7, 1.25e-7}) {
        IntegratorConfig cfg;
        cfg.rel_tol = cfg.abs_tol = tol;
        const State6 s = propagate(s0, 0.0, span, kMu, cfg);
        double err = 0;
        for (std::size_t i = 0; i < 6; ++i)
            err = std::max(err, std::abs(s[i] - truth[i]));
        CHECK(err <= previous);
        previous = err;
    }
}

TEST_CASE("uniform sampling")
{
    IntegratorConfig cfg;
    const State6 s0 = cislunar_state();
    const double dt = 420.0 / SystemConstants{}.time_unit_s;

    SUBCASE("single sample")
    {
        const Trajectory t = sample_uniform(s0, 0.25, dt, 1, Direction::Forward, kMu, cfg);
        REQUIRE(t.size() == 1);
        CHECK(t.front() == s0);
        CHECK(t.t0 == 0.25);
    }

    SUBCASE("backward arc is chronological and reversible")
    {
        const Trajectory t = sample_uniform(s0, 0.0, dt, 512, Direction::Backward, kMu, cfg);
        REQUIRE(t.size() == 512);
        CHECK(t.back() == s0);
        CHECK(t.meta.backward);
        CHECK(t.meta.anchor_epoch == 0.0);
        CHECK(t.t0 == doctest::Approx(-511 * dt));
        const State6 again = propagate(t.front(), t.t0, 0.0, kMu, cfg);
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(std::abs(again[i] - s0[i]) < 1e-8);
    }

    SUBCASE("samples agree with one-shot propagation")
    {
        const Trajectory t = sample_uniform(s0, 0.0, dt, 20, Direction::Forward, kMu, cfg);
        const State6 direct = propagate(s0, 0.0, 19 * dt, kMu, cfg);
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(std::abs(t.back()[i] - direct[i]) < 1e-11);
    }

    SUBCASE("deterministic")
    {
        const Trajectory a = sample_uniform(s0, 0.0, dt, 50, Direction::Forward, kMu, cfg);
        const Trajectory b = sample_uniform(s0, 0.0, dt, 50, Direction::Forward, kMu, cfg);
        CHECK(a.states == b.states);
    }
}

TEST_CASE("sample count for a duration")
{
    // 90 days at 7 minutes: 18,514.29 intervals.
    CHECK(samples_for_duration(90 * 86400.0, 420.0) == 18514);
    CHECK(samples_for_duration(10 * 86400.0, 420.0) == 2057);
    CHECK(samples_for_duration(3600.0, 600.0) == 6);
}

TEST_CASE("Jacobi drift over 90 days")
{
    IntegratorConfig cfg;
    const State6 s0 = cislunar_state();
    const double c0 = jacobi_constant(s0, kMu);
    const Trajectory t = sample_uniform(s0, 0.0, day_nd(), 91, Direction::Forward, kMu, cfg);
    double drift = 0;
    for (const auto& s : t.states)
        drift = std::max(drift, std::abs(jacobi_constant(s, kMu) - c0));
    CHECK(drift < 1e-9);
}
