#pragma once

#include "cbvp/dynamics.hpp"
#include "cbvp/trajectory.hpp"

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cbvp {

/// Signed errors (predicted − truth) in km and km/s, sampled at t0_s + i·dt_s.
struct ErrorSeries {
    double t0_s = 0.0;
    double dt_s = 0.0;
    std::vector<Vec3> position_km;
    std::vector<Vec3> velocity_kms;

    std::size_t size() const { return position_km.size(); }
    /// Component c in 0..5 (x, y, z, vx, vy, vz) at step i.
    double component(std::size_t i, std::size_t c) const
    {
        return c < 3 ? position_km[i][c] : velocity_kms[i][c - 3];
    }
    double position_norm(std::size_t i) const { return norm(position_km[i]); }
};

/// Both trajectories must share length, dt and units. Non-dimensional
/// inputs are converted with the given constants.
ErrorSeries error_series(const Trajectory& predicted, const Trajectory& truth, const SystemConstants& constants);

enum class BandMethod { Percentile, Gaussian };

const char* band_method_name(BandMethod m);
BandMethod parse_band_method(const std::string& s);

struct BandPoint {
    double mean = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

struct EnsembleBand {
    double t0_s = 0.0;
    double dt_s = 0.0;
    double level = 0.95;
    BandMethod method = BandMethod::Percentile;
    std::vector<std::array<BandPoint, 6>> steps;

    std::size_t size() const { return steps.size(); }
};

/// Empirical percentile of sorted data with the midpoint plotting rule:
/// position n·p + 0.5 (1-based), linear between order statistics, clamped
/// to the first and last values.
double percentile_sorted(std::span<const double> sorted, double p);

/// Per step and component: mean and either the (1−level)/2, (1+level)/2
/// percentiles or mean ± z·SE. Throws InsufficientDataError for fewer than
/// two series and LengthMismatchError for unequal lengths.
EnsembleBand ensemble_band(std::span<const ErrorSeries> series, double level = 0.95,
                           BandMethod method = BandMethod::Percentile);

inline constexpr std::array<const char*, 6> kComponentNames{"x", "y", "z", "vx", "vy", "vz"};

/// Writes band.csv (t_sec, comp, mean, lo, hi; n_steps × 6 rows) and
/// series_NNNN.csv per trajectory (t_sec, x, y, z, vx, vy, vz). Nothing is
/// written when `series` is empty.
void export_stats(const EnsembleBand& band, std::span<const ErrorSeries> series, const std::filesystem::path& dir);

EnsembleBand import_band(const std::filesystem::path& band_csv);
ErrorSeries import_series(const std::filesystem::path& series_csv);

} // namespace cbvp
