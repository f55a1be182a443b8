#include "cbvp/evalstats.hpp"

#include "cbvp/errors.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cbvp {

namespace {

std::string fmt17(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& s)
{
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw FormatError("not a number: '" + s + "'");
    return v;
}

std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
        out.push_back(cell);
    return out;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const std::string& header)
{
    std::ifstream f(path);
    if (!f)
        throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line) || line != header)
        throw FormatError(path.string() + ": expected header '" + header + "'");
    std::vector<std::vector<std::string>> rows;
    while (std::getline(f, line)) {
        if (!line.empty())
            rows.push_back(split_csv(line));
    }
    return rows;
}

void write_file(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f)
        throw IoError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f)
        throw IoError("write failed for " + path.string());
}

constexpr const char* kBandHeader = "t_sec,comp,mean,lo,hi";
constexpr const char* kSeriesHeader = "t_sec,x,y,z,vx,vy,vz";

} // namespace

ErrorSeries error_series(const Trajectory& predicted, const Trajectory& truth, const SystemConstants& c)
{
    if (predicted.size() != truth.size())
        throw LengthMismatchError("error_series: predicted has " + std::to_string(predicted.size()) +
                                  " samples, truth has " + std::to_string(truth.size()));
    if (predicted.units != truth.units)
        throw LengthMismatchError("error_series: trajectories use different units");
    if (std::abs(predicted.dt - truth.dt) > 1e-12 * std::max(std::abs(truth.dt), 1.0))
        throw LengthMismatchError("error_series: trajectories use different sampling intervals");

    const bool nd = truth.units == Units::NonDimensional;
    const double lu = nd ? c.length_unit_km : 1.0;
    const double vu = nd ? c.velocity_unit_kms() : 1.0;
    const double tu = nd ? c.time_unit_s : 1.0;

    ErrorSeries e;
    e.t0_s = truth.t0 * tu;
    e.dt_s = truth.dt * tu;
    e.position_km.resize(truth.size());
    e.velocity_kms.resize(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        for (std::size_t k = 0; k < 3; ++k) {
            e.position_km[i][k] = (predicted.states[i][k] - truth.states[i][k]) * lu;
            e.velocity_kms[i][k] = (predicted.states[i][k + 3] - truth.states[i][k + 3]) * vu;
        }
    }
    return e;
}

const char* band_method_name(BandMethod m)
{
    return m == BandMethod::Percentile ? "percentile" : "gaussian";
}

BandMethod parse_band_method(const std::string& s)
{
    if (s == "percentile")
        return BandMethod::Percentile;
    if (s == "gaussian")
        return BandMethod::Gaussian;
    throw ConfigError("unknown band method '" + s + "' (expected percentile or gaussian)");
}

double percentile_sorted(std::span<const double> sorted, double p)
{
    if (sorted.empty())
        throw InsufficientDataError("percentile of no data");
    if (!(p >= 0.0 && p <= 1.0))
        throw DomainError("percentile level must lie in [0, 1]");
    const double n = static_cast<double>(sorted.size());
    const double pos = n * p + 0.5;
    if (pos <= 1.0)
        return sorted.front();
    if (pos >= n)
        return sorted.back();
    const auto lower = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(lower);
    return sorted[lower - 1] + frac * (sorted[lower] - sorted[lower - 1]);
}

EnsembleBand ensemble_band(std::span<const ErrorSeries> series, double level, BandMethod method)
{
    if (series.size() < 2)
        throw InsufficientDataError("ensemble_band needs at least two series, got " + std::to_string(series.size()));
    if (!(level > 0.0 && level < 1.0))
        throw DomainError("band level must lie in (0, 1)");
    const std::size_t n = series.front().size();
    for (const auto& s : series) {
        if (s.size() != n)
            throw LengthMismatchError("ensemble_band: series lengths differ");
    }

    EnsembleBand band;
    band.t0_s = series.front().t0_s;
    band.dt_s = series.front().dt_s;
    band.level = level;
    band.method = method;
    band.steps.resize(n);

    const double m = static_cast<double>(series.size());
    const double z = boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);
    std::vector<double> values(series.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 6; ++c) {
            double sum = 0.0;
            for (std::size_t k = 0; k < series.size(); ++k) {
                values[k] = series[k].component(i, c);
                sum += values[k];
            }
            BandPoint& bp = band.steps[i][c];
            bp.mean = sum / m;
            if (method == BandMethod::Percentile) {
                std::sort(values.begin(), values.end());
                bp.lo = percentile_sorted(values, 0.5 - 0.5 * level);
                bp.hi = percentile_sorted(values, 0.5 + 0.5 * level);
            } else {
                double ss = 0.0;
                for (double v : values)
                    ss += (v - bp.mean) * (v - bp.mean);
                const double se = std::sqrt(ss / (m - 1.0)) / std::sqrt(m);
                bp.lo = bp.mean - z * se;
                bp.hi = bp.mean + z * se;
            }
        }
    }
    return band;
}

void export_stats(const EnsembleBand& band, std::span<const ErrorSeries> series, const std::filesystem::path& dir)
{
    if (series.empty())
        throw InsufficientDataError("export_stats: no trajectories to export");
    std::filesystem::create_directories(dir);

    std::string text = std::string(kBandHeader) + "\n";
    for (std::size_t i = 0; i < band.size(); ++i) {
        const std::string t = fmt17(band.t0_s + static_cast<double>(i) * band.dt_s);
        for (std::size_t c = 0; c < 6; ++c) {
            const BandPoint& bp = band.steps[i][c];
            text += t + "," + kComponentNames[c] + "," + fmt17(bp.mean) + "," + fmt17(bp.lo) + "," + fmt17(bp.hi) + "\n";
        }
    }
    write_file(dir / "band.csv", text);

    for (std::size_t k = 0; k < series.size(); ++k) {
        const ErrorSeries& s = series[k];
        std::string body = std::string(kSeriesHeader) + "\n";
        for (std::size_t i = 0; i < s.size(); ++i) {
            body += fmt17(s.t0_s + static_cast<double>(i) * s.dt_s);
            for (std::size_t c = 0; c < 6; ++c)
                body += "," + fmt17(s.component(i, c));
            body += "\n";
        }
        char name[32];
        std::snprintf(name, sizeof name, "series_%04zu.csv", k);
        write_file(dir / name, body);
    }
}

EnsembleBand import_band(const std::filesystem::path& band_csv)
{
    const auto rows = read_csv(band_csv, kBandHeader);
    if (rows.size() % 6 != 0)
        throw FormatError(band_csv.string() + ": row count is not a multiple of 6");
    EnsembleBand band;
    band.steps.resize(rows.size() / 6);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() != 5 || row[1] != kComponentNames[r % 6])
            throw FormatError(band_csv.string() + ": malformed row " + std::to_string(r + 2));
        const double t = parse_double(row[0]);
        if (r == 0)
            band.t0_s = t;
        if (r == 6)
            band.dt_s = t - band.t0_s;
        band.steps[r / 6][r % 6] = {parse_double(row[2]), parse_double(row[3]), parse_double(row[4])};
    }
    return band;
}

ErrorSeries import_series(const std::filesystem::path& series_csv)
{
    const auto rows = read_csv(series_csv, kSeriesHeader);
    ErrorSeries s;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() != 7)
            throw FormatError(series_csv.string() + ": malformed row " + std::to_string(r + 2));
        const double t = parse_double(row[0]);
        if (r == 0)
            s.t0_s = t;
        if (r == 1)
            s.dt_s = t - s.t0_s;
        s.position_km.push_back({parse_double(row[1]), parse_double(row[2]), parse_double(row[3])});
        s.velocity_kms.push_back({parse_double(row[4]), parse_double(row[5]), parse_double(row[6])});
    }
    return s;
}

} // namespace cbvp
