#include "cbvp/errors.hpp"
#include "cbvp/evalstats.hpp"
#include "cbvp/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numbers>

using namespace cbvp;

namespace {

Trajectory planar(std::size_t n, double phase)
{
    Trajectory t;
    t.t0 = 0.01;
    t.dt = 0.001;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = phase + 0.01 * static_cast<double>(i);
        t.states.push_back(State6{{std::cos(a), std::sin(a), 0.0, -std::sin(a), std::cos(a), 0.0}});
    }
    return t;
}

ErrorSeries constant_series(std::size_t n, double value)
{
    ErrorSeries s;
    s.dt_s = 60;
    s.position_km.assign(n, {value, value, value});
    s.velocity_kms.assign(n, {value, value, value});
    return s;
}

// Box-Muller on the portable stream.
double normal(Rng& rng)
{
    const double u1 = 1.0 - rng.uniform();
    const double u2 = rng.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::filesystem::path scratch(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("cbvp_test_evalstats_" + name);
    std::filesystem::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("error series")
{
    const SystemConstants c;
    const Trajectory truth = planar(20, 0.3);

    const ErrorSeries zero = error_series(truth, truth, c);
    CHECK(zero.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
        for (std::size_t k = 0; k < 6; ++k)
            CHECK(zero.component(i, k) == 0.0);
    }
    CHECK(zero.dt_s == doctest::Approx(0.001 * c.time_unit_s));
    CHECK(zero.t0_s == doctest::Approx(0.01 * c.time_unit_s));

    const Trajectory pred = planar(20, 0.35);
    const ErrorSeries e = error_series(pred, truth, c);
    const ErrorSeries swapped = error_series(truth, pred, c);
    const double vu = c.length_unit_km / c.time_unit_s;
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(e.component(i, 2) == 0.0);
        CHECK(e.component(i, 5) == 0.0);
        for (std::size_t k = 0; k < 6; ++k)
            CHECK(swapped.component(i, k) == -e.component(i, k));
        CHECK(e.component(i, 0) == doctest::Approx((pred.states[i][0] - truth.states[i][0]) * c.length_unit_km));
        CHECK(e.component(i, 4) == doctest::Approx((pred.states[i][4] - truth.states[i][4]) * vu));
    }

    Trajectory shifted = truth;
    for (auto& s : shifted.states)
        s[0] += 1.0;
    const ErrorSeries x = error_series(shifted, truth, c);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(x.component(i, 0) == doctest::Approx(c.length_unit_km).epsilon(1e-12));
        CHECK(x.component(i, 1) == 0.0);
    }

    CHECK_THROWS_AS(error_series(planar(19, 0.3), truth, c), LengthMismatchError);
    Trajectory other_dt = truth;
    other_dt.dt = 0.002;
    CHECK_THROWS_AS(error_series(other_dt, truth, c), LengthMismatchError);
}

TEST_CASE("percentile rule")
{
    const std::vector<double> two{-1.0, 1.0};
    CHECK(percentile_sorted(two, 0.025) == -1.0);
    CHECK(percentile_sorted(two, 0.975) == 1.0);
    CHECK(percentile_sorted(two, 0.5) == 0.0);
    const std::vector<double> four{1, 2, 3, 4};
    // Position n*p + 0.5 = 1.5 for p = 0.25.
    CHECK(percentile_sorted(four, 0.25) == 1.5);
    CHECK(percentile_sorted(four, 0.5) == 2.5);
    CHECK(percentile_sorted(four, 0.0) == 1.0);
    CHECK(percentile_sorted(four, 1.0) == 4.0);
}

TEST_CASE("ensemble band")
{
    SUBCASE("identical series")
    {
        const std::vector<ErrorSeries> s{constant_series(5, 2.5), constant_series(5, 2.5), constant_series(5, 2.5)};
        const EnsembleBand b = ensemble_band(s);
        for (const auto& step : b.steps) {
            for (const auto& p : step) {
                CHECK(p.mean == 2.5);
                CHECK(p.lo == 2.5);
                CHECK(p.hi == 2.5);
            }
        }
    }

    SUBCASE("two-point example")
    {
        const std::vector<ErrorSeries> s{constant_series(4, -1.0), constant_series(4, 1.0)};
        const EnsembleBand b = ensemble_band(s, 0.95);
        CHECK(b.size() == 4);
        for (const auto& step : b.steps) {
            for (const auto& p : step) {
                CHECK(p.mean == 0.0);
                CHECK(p.lo == -1.0);
                CHECK(p.hi == 1.0);
            }
        }
    }

    SUBCASE("Monte Carlo normal quantiles")
    {
        Rng rng(99);
        std::vector<ErrorSeries> s(10000);
        for (auto& e : s) {
            e.dt_s = 1;
            e.position_km.push_back({normal(rng), normal(rng), 0.0});
            e.velocity_kms.push_back({normal(rng), 0.0, 0.0});
        }
        const EnsembleBand b = ensemble_band(s, 0.95);
        for (std::size_t c : {0u, 1u, 3u}) {
            // Sort-and-interpolate oracle on the same draws.
            std::vector<double> v;
            for (const auto& e : s)
                v.push_back(e.component(0, c));
            std::sort(v.begin(), v.end());
            const auto hazen = [&](double p) {
                const double pos = static_cast<double>(v.size()) * p + 0.5;
                const auto l = static_cast<std::size_t>(std::floor(pos));
                return v[l - 1] + (pos - static_cast<double>(l)) * (v[l] - v[l - 1]);
            };
            CHECK(b.steps[0][c].lo == doctest::Approx(hazen(0.025)).epsilon(1e-12));
            CHECK(b.steps[0][c].hi == doctest::Approx(hazen(0.975)).epsilon(1e-12));

            CHECK(std::abs(b.steps[0][c].lo + 1.96) < 0.05);
            CHECK(std::abs(b.steps[0][c].hi - 1.96) < 0.05);
        }
        CHECK(b.steps[0][2].lo == 0.0);
        CHECK(b.steps[0][2].hi == 0.0);

        // Gaussian mode: mean +/- 1.96 standard errors.
        const EnsembleBand g = ensemble_band(s, 0.95, BandMethod::Gaussian);
        const double half = g.steps[0][0].hi - g.steps[0][0].mean;
        CHECK(half == doctest::Approx(1.96 / 100.0).epsilon(0.05));
    }

    SUBCASE("wider level contains the narrower band")
    {
        Rng rng(5);
        std::vector<ErrorSeries> s(200);
        for (auto& e : s) {
            e.dt_s = 1;
            for (int i = 0; i < 3; ++i) {
                e.position_km.push_back({normal(rng), normal(rng) * 3, 0.0});
                e.velocity_kms.push_back({normal(rng), normal(rng), 0.0});
            }
        }
        for (BandMethod m : {BandMethod::Percentile, BandMethod::Gaussian}) {
            const EnsembleBand b95 = ensemble_band(s, 0.95, m);
            const EnsembleBand b99 = ensemble_band(s, 0.99, m);
            for (std::size_t i = 0; i < 3; ++i) {
                for (std::size_t c = 0; c < 6; ++c) {
                    CHECK(b99.steps[i][c].lo <= b95.steps[i][c].lo);
                    CHECK(b99.steps[i][c].hi >= b95.steps[i][c].hi);
                    CHECK(b95.steps[i][c].lo <= b95.steps[i][c].hi);
                }
            }
        }
    }

    SUBCASE("errors")
    {
        const std::vector<ErrorSeries> one{constant_series(3, 1.0)};
        CHECK_THROWS_AS(ensemble_band(one), InsufficientDataError);
        const std::vector<ErrorSeries> uneven{constant_series(3, 1.0), constant_series(4, 1.0)};
        CHECK_THROWS_AS(ensemble_band(uneven), LengthMismatchError);
    }
}

TEST_CASE("export and import")
{
    const auto dir = scratch("export");
    Rng rng(3);
    std::vector<ErrorSeries> s(3);
    for (auto& e : s) {
        e.t0_s = 420;
        e.dt_s = 420;
        for (int i = 0; i < 7; ++i) {
            e.position_km.push_back({rng.uniform(-1e4, 1e4), rng.uniform(-1e4, 1e4), 0.0});
            e.velocity_kms.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0});
        }
    }
    const EnsembleBand band = ensemble_band(s);
    export_stats(band, s, dir);

    std::ifstream f(dir / "band.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "t_sec,comp,mean,lo,hi");
    std::size_t rows = 0;
    for (std::string line; std::getline(f, line);)
        ++rows;
    CHECK(rows == 7 * 6);

    const EnsembleBand back = import_band(dir / "band.csv");
    REQUIRE(back.size() == band.size());
    for (std::size_t i = 0; i < band.size(); ++i) {
        for (std::size_t c = 0; c < 6; ++c) {
            CHECK(back.steps[i][c].mean == band.steps[i][c].mean);
            CHECK(back.steps[i][c].lo == band.steps[i][c].lo);
            CHECK(back.steps[i][c].hi == band.steps[i][c].hi);
        }
    }

    CHECK(std::filesystem::exists(dir / "series_0002.csv"));
    const ErrorSeries e = import_series(dir / "series_0001.csv");
    REQUIRE(e.size() == 7);
    for (std::size_t i = 0; i < 7; ++i) {
        for (std::size_t c = 0; c < 6; ++c)
            CHECK(e.component(i, c) == s[1].component(i, c));
    }
    CHECK(e.dt_s == 420);

    const auto empty_dir = scratch("empty");
    CHECK_THROWS_AS(export_stats(band, std::span<const ErrorSeries>{}, empty_dir), InsufficientDataError);
    CHECK_FALSE(std::filesystem::exists(empty_dir / "band.csv"));
    std::filesystem::remove_all(dir);
}
