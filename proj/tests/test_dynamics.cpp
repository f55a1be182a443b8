#include "cbvp/dynamics.hpp"
#include "cbvp/errors.hpp"
#include "cbvp/integrator.hpp"
#include "cbvp/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace cbvp;

namespace {

constexpr double kMu = 3.00348e-6;

// Effective potential used as an independent oracle for the accelerations.
double potential(double x, double y, double z, double mu)
{
    const double r1 = std::sqrt((x + mu) * (x + mu) + y * y + z * z);
    const double r2 = std::sqrt((x - 1 + mu) * (x - 1 + mu) + y * y + z * z);
    return 0.5 * (x * x + y * y) + (1 - mu) / r1 + mu / r2;
}

} // namespace

TEST_CASE("position derivative is the velocity")
{
    const State6 s{{0.9, 0.05, 0.01, 0.1, 0.2, 0.3}};
    const State6 d = eom(s, kMu);
    CHECK(d[0] == 0.1);
    CHECK(d[1] == 0.2);
    CHECK(d[2] == 0.3);
}

TEST_CASE("libration points are equilibria")
{
    const auto xs = collinear_libration_points(kMu);
    CHECK(xs[0] < 1 - kMu);
    CHECK(xs[1] > 1 - kMu);
    CHECK(xs[2] < -kMu);
    for (double x : xs) {
        const State6 d = eom(State6{{x, 0, 0, 0, 0, 0}}, kMu);
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(std::abs(d[i]) < 1e-12);
    }
}

TEST_CASE("accelerations match finite differences of the potential")
{
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const double x = rng.uniform(0.95, 1.05);
        const double y = rng.uniform(-0.05, 0.05);
        const double vx = rng.uniform(-0.1, 0.1);
        const double vy = rng.uniform(-0.1, 0.1);
        const State6 d = eom(State6{{x, y, 0, vx, vy, 0}}, kMu);
        const double h = 1e-6;
        const double ux = (potential(x + h, y, 0, kMu) - potential(x - h, y, 0, kMu)) / (2 * h);
        const double uy = (potential(x, y + h, 0, kMu) - potential(x, y - h, 0, kMu)) / (2 * h);
        const double ax = 2 * vy + ux;
        const double ay = -2 * vx + uy;
        CHECK(std::abs(d[3] - ax) <= 1e-6 * std::max(1.0, std::abs(ax)));
        CHECK(std::abs(d[4] - ay) <= 1e-6 * std::max(1.0, std::abs(ay)));
        CHECK(d[5] == 0.0);
    }
}

TEST_CASE("planar states stay planar")
{
    const State6 d = eom(State6{{0.99, 0.003, 0, 0.001, 0.01, 0}}, kMu);
    CHECK(d[2] == 0.0);
    CHECK(d[5] == 0.0);
}

TEST_CASE("singularity guard")
{
    CHECK_THROWS_AS(eom(State6{{-kMu, 0, 0, 0, 0, 0}}, kMu), SingularityError);
    CHECK_THROWS_AS(eom(State6{{1 - kMu, 0, 0, 0, 0, 0}}, kMu), SingularityError);
    CHECK_THROWS_AS(jacobi_constant(State6{{1 - kMu, 0, 0, 0, 0, 0}}, kMu), SingularityError);
}

TEST_CASE("Jacobi constant")
{
    const State6 s{{0.98, 0.01, 0.002, 0, 0, 0}};
    const auto r = primary_distances(s, kMu);
    const double expected = 0.98 * 0.98 + 0.01 * 0.01 + 2 * (1 - kMu) / r[0] + 2 * kMu / r[1];
    CHECK(jacobi_constant(s, kMu) == expected);

    const State6 a{{0.98, 0.01, 0.002, 0.01, -0.02, 0.003}};
    const State6 b{{0.98, 0.01, 0.002, -0.01, 0.02, -0.003}};
    CHECK(jacobi_constant(a, kMu) == jacobi_constant(b, kMu));
    const State6 c{{0.98, 0.01, 0.002, 0.02, 0.01, 0.003}};
    CHECK(jacobi_constant(a, kMu) == doctest::Approx(jacobi_constant(c, kMu)).epsilon(1e-15));
}

TEST_CASE("unit conversions")
{
    const SystemConstants c;
    CHECK(c.time_unit_s == doctest::Approx(5.0226757e6).epsilon(1e-5));

    Trajectory t;
    t.dt = 0.01;
    t.states = {State6{{1, 0, 0, 0, 0, 0}}, State6{{0.5, -0.25, 0, 0.01, 0.02, 0}}};
    const Trajectory d = to_dimensional(t, c);
    CHECK(d.units == Units::Dimensional);
    CHECK(d.states[0][0] == c.length_unit_km);
    CHECK(d.states[0][1] == 0.0);
    CHECK(d.dt == doctest::Approx(0.01 * c.time_unit_s));
    const Trajectory back = to_nondimensional(d, c);
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (std::size_t k = 0; k < 6; ++k)
            CHECK(std::abs(back.states[i][k] - t.states[i][k]) <= 1e-14 * std::max(1.0, std::abs(t.states[i][k])));
    }

    const double vu = c.length_unit_km / c.time_unit_s;
    CHECK(kms_to_nd(1.2, c) == doctest::Approx(1.2 / vu).epsilon(1e-15));
}

TEST_CASE("constants validation")
{
    SystemConstants c;
    c.mu = 0.7;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SystemConstants{};
    c.length_unit_km = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("mirror symmetry maps solutions to solutions")
{
    IntegratorConfig cfg;
    const State6 s0{{0.99, 0.002, 0, 0.003, 0.012, 0}};
    const State6 s1 = propagate(s0, 0.0, 0.3, kMu, cfg);
    // Time reverses under the mirror, so the mirrored end state flows
    // forward onto the mirror of the start state.
    const State6 m1{{s1[0], -s1[1], 0, -s1[3], s1[4], 0}};
    const State6 m0 = propagate(m1, -0.3, 0.0, kMu, cfg);
    CHECK(std::abs(m0[0] - s0[0]) < 1e-9);
    CHECK(std::abs(m0[1] + s0[1]) < 1e-9);
    CHECK(std::abs(m0[3] + s0[3]) < 1e-9);
    CHECK(std::abs(m0[4] - s0[4]) < 1e-9);
}
