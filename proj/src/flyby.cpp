#include "cbvp/flyby.hpp"

#include "cbvp/errors.hpp"
#include "cbvp/parallel.hpp"
#include "cbvp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <tuple>

namespace cbvp {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Vec3 rotate_z(const Vec3& v, double angle_rad)
{
    const double c = std::cos(angle_rad);
    const double s = std::sin(angle_rad);
    return {c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]};
}

} // namespace

std::vector<double> default_incoming_magnitudes()
{
    std::vector<double> mags;
    for (int m = 8; m <= 14; ++m)
        mags.push_back(static_cast<double>(m) / 10.0);
    return mags;
}

std::vector<double> default_incoming_directions()
{
    std::vector<double> dirs;
    for (int d = 0; d < 360; ++d)
        dirs.push_back(static_cast<double>(d));
    return dirs;
}

std::vector<VinfCandidate> FlybyConfig::incoming_grid() const
{
    std::vector<VinfCandidate> grid;
    grid.reserve(incoming_mags_kms.size() * incoming_dirs_deg.size());
    for (double m : incoming_mags_kms) {
        for (double d : incoming_dirs_deg)
            grid.push_back({m, d});
    }
    return grid;
}

void FlybyConfig::validate() const
{
    if (vinf_mags_kms.empty())
        throw ConfigError("flyby.vinf_mags_kms must not be empty");
    for (double v : vinf_mags_kms) {
        if (!(v > 0.0) || !std::isfinite(v))
            throw ConfigError("flyby.vinf_mags_kms entries must be positive");
    }
    if (!(angle_min_deg >= -180.0 && angle_max_deg <= 180.0 && angle_min_deg <= angle_max_deg))
        throw ConfigError("flyby angle interval must lie within [-180, 180] with min <= max");
    if (n_per_vinf == 0)
        throw ConfigError("flyby.n_per_vinf must be >= 1");
    if (context_steps == 0)
        throw ConfigError("flyby.context_steps must be >= 1");
    const std::array<std::pair<const char*, double>, 5> positive{{
        {"forward_days", forward_days},
        {"dt_minutes", dt_minutes},
        {"min_periapsis_alt_km", min_periapsis_alt_km},
        {"earth_approach_radius_km", earth_approach_radius_km},
        {"earth_min_radius_km", earth_min_radius_km},
    }};
    for (const auto& [name, value] : positive) {
        if (!(value > 0.0) || !std::isfinite(value))
            throw ConfigError(std::string("flyby.") + name + " must be positive");
    }
    if (earth_min_radius_km >= earth_approach_radius_km)
        throw ConfigError("flyby.earth_min_radius_km must be below earth_approach_radius_km");
    if (incoming_mags_kms.empty() || incoming_dirs_deg.empty())
        throw ConfigError("flyby incoming magnitude and direction grids must not be empty");
    for (double v : incoming_mags_kms) {
        if (!(v > 0.0) || !std::isfinite(v))
            throw ConfigError("flyby.incoming_mags_kms entries must be positive");
    }
    for (double d : incoming_dirs_deg) {
        if (!std::isfinite(d))
            throw ConfigError("flyby.incoming_dirs_deg entries must be finite");
    }
    double sum = 0.0;
    for (double r : split_ratios) {
        if (!(r >= 0.0))
            throw ConfigError("flyby.split_ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-12)
        throw ConfigError("flyby.split_ratios must sum to 1");
}

std::size_t FlybyConfig::forward_steps() const
{
    return samples_for_duration(forward_days * 86400.0, dt_minutes * 60.0);
}

State6 moon_state(const SystemConstants& c, double approach_angle_deg)
{
    const double r = c.moon_orbit_radius_km / c.length_unit_km;
    const double n_moon = std::sqrt(c.mu / (r * r * r));
    const double th = approach_angle_deg * kDeg;
    const double ct = std::cos(th);
    const double st = std::sin(th);
    const double rate = n_moon - 1.0; // inertial mean motion minus frame rotation
    return State6{{1.0 - c.mu + r * ct, r * st, 0.0, -rate * r * st, rate * r * ct, 0.0}};
}

State6 apply_vinf(const State6& moon, const Vec3& vinf_kms, const SystemConstants& c)
{
    State6 s = moon;
    for (int i = 0; i < 3; ++i)
        s[3 + i] += kms_to_nd(vinf_kms[i], c);
    return s;
}

double max_deflection_deg(double vinf_kms, double r_pi_km, double mu_moon)
{
    if (!(vinf_kms > 0.0) || !(r_pi_km > 0.0) || !(mu_moon > 0.0))
        throw DomainError("max_deflection: inputs must be positive");
    const double s = 1.0 / (1.0 + r_pi_km * vinf_kms * vinf_kms / mu_moon);
    return 2.0 * std::asin(s) / kDeg;
}

Vec3 vinf_vector(const VinfCandidate& c)
{
    const double a = c.direction_deg * kDeg;
    return {c.magnitude_kms * std::cos(a), c.magnitude_kms * std::sin(a), 0.0};
}

namespace {

std::optional<double> min_earth_distance_km(const VinfCandidate& cand, const FlybyConfig& cfg,
                                            const SystemConstants& c, const IntegratorConfig& icfg)
{
    const State6 start = apply_vinf(moon_state(c, cfg.approach_angle_deg), vinf_vector(cand), c);
    try {
        const Trajectory back =
            sample_uniform(start, 0.0, cfg.dt_nd(c), cfg.context_steps, Direction::Backward, c.mu, icfg);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& s : back.states)
            best = std::min(best, primary_distances(s, c.mu)[1]);
        return best * c.length_unit_km;
    } catch (const SingularityError&) {
        return std::nullopt;
    } catch (const StepLimitError&) {
        return std::nullopt;
    }
}

} // namespace

IncomingSolution find_incoming_vinf(const FlybyConfig& cfg, const SystemConstants& c, const IntegratorConfig& icfg,
                                    std::span<const VinfCandidate> grid, std::size_t threads)
{
    if (grid.empty())
        throw DomainError("find_incoming_vinf: empty grid");
    for (const auto& g : grid) {
        if (!(g.magnitude_kms > 0.0))
            throw DomainError("find_incoming_vinf: grid magnitudes must be positive");
    }

    std::vector<std::optional<double>> dist(grid.size());
    parallel_for(grid.size(), threads, [&](std::size_t i) { dist[i] = min_earth_distance_km(grid[i], cfg, c, icfg); });

    std::optional<std::size_t> best;
    auto key = [&](std::size_t i) {
        return std::make_tuple(*dist[i], grid[i].magnitude_kms, grid[i].direction_deg);
    };
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!dist[i] || *dist[i] >= cfg.earth_approach_radius_km || *dist[i] < cfg.earth_min_radius_km)
            continue;
        if (!best || key(i) < key(*best))
            best = i;
    }
    if (!best)
        throw NoSolutionError("no incoming V-infinity candidate approaches Earth within " +
                              std::to_string(cfg.earth_approach_radius_km) + " km");
    return IncomingSolution{grid[*best], vinf_vector(grid[*best]), *dist[*best]};
}

Trajectory generate_reference_context(const Vec3& vinf_in_kms, const FlybyConfig& cfg, const SystemConstants& c,
                                      const IntegratorConfig& icfg)
{
    const State6 flyby = apply_vinf(moon_state(c, cfg.approach_angle_deg), vinf_in_kms, c);
    Trajectory ctx = sample_uniform(flyby, 0.0, cfg.dt_nd(c), cfg.context_steps, Direction::Backward, c.mu, icfg);
    ctx.meta.vinf_kms = norm(vinf_in_kms);
    ctx.meta.seed = cfg.seed;
    return ctx;
}

Family generate_family(const FlybyConfig& cfg, const SystemConstants& c, const IntegratorConfig& icfg,
                       std::size_t threads)
{
    cfg.validate();
    std::vector<IncomingSolution> incoming;
    if (cfg.context_per_vinf) {
        for (double mag : cfg.vinf_mags_kms) {
            std::vector<VinfCandidate> grid;
            for (double dir : cfg.incoming_dirs_deg)
                grid.push_back({mag, dir});
            incoming.push_back(find_incoming_vinf(cfg, c, icfg, grid, threads));
        }
    } else {
        incoming.push_back(find_incoming_vinf(cfg, c, icfg, cfg.incoming_grid(), threads));
    }
    return generate_family(cfg, c, icfg, incoming, threads);
}

Family generate_family(const FlybyConfig& cfg, const SystemConstants& c, const IntegratorConfig& icfg,
                       std::span<const IncomingSolution> incoming, std::size_t threads)
{
    cfg.validate();
    const std::size_t n_classes = cfg.vinf_mags_kms.size();
    if (incoming.size() != (cfg.context_per_vinf ? n_classes : 1))
        throw DomainError("generate_family: expected one incoming solution per context");

    Family fam;
    fam.incoming.assign(incoming.begin(), incoming.end());
    for (const auto& inc : incoming)
        fam.contexts.push_back(generate_reference_context(inc.vinf_kms, cfg, c, icfg));

    const double r_pi = cfg.periapsis_radius_km(c);
    const double dt = cfg.dt_nd(c);
    const std::size_t n_fwd = cfg.forward_steps();
    const State6 moon = moon_state(c, cfg.approach_angle_deg);

    struct Job {
        std::size_t class_index;
        double angle_deg;
    };
    std::vector<Job> jobs;
    for (std::size_t k = 0; k < n_classes; ++k) {
        for (std::size_t i = 0; i < cfg.n_per_vinf; ++i) {
            const double angle = cfg.n_per_vinf == 1
                                     ? 0.5 * (cfg.angle_min_deg + cfg.angle_max_deg)
                                     : cfg.angle_min_deg + (cfg.angle_max_deg - cfg.angle_min_deg) *
                                                               static_cast<double>(i) /
                                                               static_cast<double>(cfg.n_per_vinf - 1);
            jobs.push_back({k, angle});
        }
    }

    std::vector<std::optional<FamilySample>> results(jobs.size());
    std::vector<std::string> failures(jobs.size());
    parallel_for(jobs.size(), threads, [&](std::size_t j) {
        const Job& job = jobs[j];
        const double mag = cfg.vinf_mags_kms[job.class_index];
        const double phi_max = max_deflection_deg(mag, r_pi, c.mu_moon);
        const double turn = std::abs(job.angle_deg);
        if (turn > phi_max) {
            failures[j] = "turn angle exceeds max deflection";
            return;
        }
        const std::size_t ctx_index = cfg.context_per_vinf ? job.class_index : 0;
        const Vec3& vin = incoming[ctx_index].vinf_kms;
        const double vin_mag = norm(vin);
        const Vec3 u_in{vin[0] / vin_mag, vin[1] / vin_mag, vin[2] / vin_mag};
        const Vec3 u_out = rotate_z(u_in, job.angle_deg * kDeg);
        const Vec3 vout{mag * u_out[0], mag * u_out[1], mag * u_out[2]};
        const State6 start = apply_vinf(moon, vout, c);
        try {
            Trajectory fwd = sample_uniform(start, 0.0, dt, n_fwd + 1, Direction::Forward, c.mu, icfg);
            fwd.states.erase(fwd.states.begin());
            fwd.t0 = dt;
            fwd.meta.vinf_kms = mag;
            fwd.meta.post_flyby_angle_deg = job.angle_deg;
            fwd.meta.seed = derive_seed(cfg.seed, j);

            const Trajectory& ctx = fam.contexts[ctx_index];
            FamilySample sample;
            sample.prefix.r0 = ctx.front().position();
            sample.prefix.v0 = ctx.front().velocity();
            sample.prefix.rf = fwd.back().position();
            sample.prefix.vf = fwd.back().velocity();
            sample.forward = std::move(fwd);
            sample.context_index = ctx_index;
            sample.turn_angle_deg = turn;
            results[j] = std::move(sample);
        } catch (const Error& e) {
            failures[j] = std::string("propagation failed: ") + e.what();
        }
    });

    for (std::size_t k = 0; k < n_classes; ++k)
        fam.classes.push_back({cfg.vinf_mags_kms[k], max_deflection_deg(cfg.vinf_mags_kms[k], r_pi, c.mu_moon), 0, 0});
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        auto& summary = fam.classes[jobs[j].class_index];
        if (results[j]) {
            fam.samples.push_back(std::move(*results[j]));
            ++summary.emitted;
        } else {
            fam.rejections.push_back({summary.vinf_kms, jobs[j].angle_deg, failures[j]});
            ++summary.rejected;
        }
    }
    return fam;
}

SplitSizes split_sizes(std::size_t n, const std::array<double, 3>& ratios)
{
    double sum = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0))
            throw DomainError("split ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-12)
        throw DomainError("split ratios must sum to 1");
    // The small slack absorbs representation error such as 150 * 0.7 = 104.99999999999999.
    auto take = [n](double r) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
    };
    SplitSizes s;
    s.train = std::min(n, take(ratios[0]));
    s.validation = std::min(n - s.train, take(ratios[1]));
    s.test = n - s.train - s.validation;
    return s;
}

std::array<std::vector<std::size_t>, 3> shuffle_split(std::size_t n, const std::array<double, 3>& ratios,
                                                      std::uint64_t seed)
{
    const SplitSizes sizes = split_sizes(n, ratios);
    if (sizes.train == 0 || sizes.validation == 0 || sizes.test == 0)
        throw EmptySplitError("split of " + std::to_string(n) + " samples leaves an empty split");

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i)
        perm[i] = i;
    Rng rng(seed);
    rng.shuffle(perm);

    std::array<std::vector<std::size_t>, 3> out;
    out[0].assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(sizes.train));
    out[1].assign(perm.begin() + static_cast<std::ptrdiff_t>(sizes.train),
                  perm.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.validation));
    out[2].assign(perm.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.validation), perm.end());
    return out;
}

double Normalizer::apply(std::size_t ch, double value) const
{
    if (constant[ch])
        return 0.0;
    return (value - mean[ch]) / scale[ch];
}

double Normalizer::invert(std::size_t ch, double value) const
{
    if (constant[ch])
        return mean[ch];
    return value * scale[ch] + mean[ch];
}

State6 Normalizer::apply(const State6& s) const
{
    State6 out;
    for (std::size_t i = 0; i < 6; ++i)
        out[i] = apply(i, s[i]);
    return out;
}

State6 Normalizer::invert(const State6& s) const
{
    State6 out;
    for (std::size_t i = 0; i < 6; ++i)
        out[i] = invert(i, s[i]);
    return out;
}

BoundaryPrefix Normalizer::apply(const BoundaryPrefix& p) const
{
    BoundaryPrefix out;
    for (std::size_t i = 0; i < 3; ++i) {
        out.r0[i] = apply(i, p.r0[i]);
        out.rf[i] = apply(i, p.rf[i]);
        out.v0[i] = apply(i + 3, p.v0[i]);
        out.vf[i] = apply(i + 3, p.vf[i]);
    }
    return out;
}

BoundaryPrefix Normalizer::invert(const BoundaryPrefix& p) const
{
    BoundaryPrefix out;
    for (std::size_t i = 0; i < 3; ++i) {
        out.r0[i] = invert(i, p.r0[i]);
        out.rf[i] = invert(i, p.rf[i]);
        out.v0[i] = invert(i + 3, p.v0[i]);
        out.vf[i] = invert(i + 3, p.vf[i]);
    }
    return out;
}

void NormalizerAccumulator::add(const Trajectory& traj)
{
    for (const auto& s : traj.states) {
        if (count_ == 0) {
            min_ = s.v;
            max_ = s.v;
        }
        ++count_;
        const double n = static_cast<double>(count_);
        for (std::size_t i = 0; i < 6; ++i) {
            const double delta = s[i] - mean_[i];
            mean_[i] += delta / n;
            m2_[i] += delta * (s[i] - mean_[i]);
            min_[i] = std::min(min_[i], s[i]);
            max_[i] = std::max(max_[i], s[i]);
        }
    }
}

Normalizer NormalizerAccumulator::finish() const
{
    if (count_ == 0)
        throw InsufficientDataError("fit_normalizer: no samples");
    Normalizer norm;
    for (std::size_t i = 0; i < 6; ++i) {
        norm.constant[i] = min_[i] == max_[i];
        norm.mean[i] = norm.constant[i] ? min_[i] : mean_[i];
        const double sd = std::sqrt(m2_[i] / static_cast<double>(count_));
        norm.scale[i] = norm.constant[i] ? Normalizer::kScaleFloor : std::max(sd, Normalizer::kScaleFloor);
    }
    return norm;
}

Normalizer fit_normalizer(std::span<const Trajectory> series)
{
    NormalizerAccumulator acc;
    for (const auto& t : series)
        acc.add(t);
    return acc.finish();
}

const char* split_name(Split s)
{
    switch (s) {
    case Split::Train:
        return "train";
    case Split::Validation:
        return "validation";
    case Split::Test:
        return "test";
    }
    return "?";
}

Split parse_split(const std::string& name)
{
    if (name == "train")
        return Split::Train;
    if (name == "validation" || name == "val")
        return Split::Validation;
    if (name == "test")
        return Split::Test;
    throw ConfigError("unknown split '" + name + "' (expected train, validation or test)");
}

Dataset build_dataset(Family family, const FlybyConfig& cfg, const SystemConstants& c, const IntegratorConfig& icfg)
{
    Dataset ds;
    const auto parts = shuffle_split(family.samples.size(), cfg.split_ratios, cfg.seed);
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t idx : parts[s])
            ds.splits[s].push_back(std::move(family.samples[idx]));
    }
    ds.contexts = std::move(family.contexts);

    NormalizerAccumulator acc;
    for (const auto& sample : ds.splits[0]) {
        acc.add(ds.contexts.at(sample.context_index));
        acc.add(sample.forward);
    }
    ds.normalizer = acc.finish();

    ds.flyby = cfg;
    ds.constants = c;
    ds.integrator = icfg;
    ds.incoming = std::move(family.incoming);
    ds.classes = std::move(family.classes);
    ds.rejections = std::move(family.rejections);
    return ds;
}

} // namespace cbvp
