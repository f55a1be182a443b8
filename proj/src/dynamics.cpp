#include "cbvp/dynamics.hpp"

#include "cbvp/errors.hpp"

#include <cmath>
#include <string>

namespace cbvp {

bool State6::finite() const
{
    for (double c : v) {
        if (!std::isfinite(c))
            return false;
    }
    return true;
}

void SystemConstants::validate() const
{
    if (!(mu > 0.0 && mu < 0.5))
        throw ConfigError("constants.mu must lie in (0, 0.5)");
    const std::array<std::pair<const char*, double>, 5> positive{{
        {"length_unit_km", length_unit_km},
        {"time_unit_s", time_unit_s},
        {"mu_moon", mu_moon},
        {"moon_orbit_radius_km", moon_orbit_radius_km},
        {"moon_radius_km", moon_radius_km},
    }};
    for (const auto& [name, value] : positive) {
        if (!(value > 0.0) || !std::isfinite(value))
            throw ConfigError(std::string("constants.") + name + " must be positive and finite");
    }
}

std::array<double, 2> primary_distances(const State6& s, double mu)
{
    const double yz2 = s[1] * s[1] + s[2] * s[2];
    const double dx1 = s[0] + mu;
    const double dx2 = s[0] - 1.0 + mu;
    return {std::sqrt(dx1 * dx1 + yz2), std::sqrt(dx2 * dx2 + yz2)};
}

namespace {

void check_guard(const std::array<double, 2>& r, double guard)
{
    if (!(r[0] > guard) || !(r[1] > guard))
        throw SingularityError("state within singularity guard of a primary (r1=" + std::to_string(r[0]) +
                               ", r2=" + std::to_string(r[1]) + ")");
}

} // namespace

State6 eom(const State6& s, double mu, double guard)
{
    const auto r = primary_distances(s, mu);
    check_guard(r, guard);

    const double r1_3 = r[0] * r[0] * r[0];
    const double r2_3 = r[1] * r[1] * r[1];
    const double g1 = (1.0 - mu) / r1_3;
    const double g2 = mu / r2_3;

    State6 d;
    d[0] = s[3];
    d[1] = s[4];
    d[2] = s[5];
    d[3] = 2.0 * s[4] + s[0] - g1 * (s[0] + mu) - g2 * (s[0] - 1.0 + mu);
    d[4] = -2.0 * s[3] + s[1] - g1 * s[1] - g2 * s[1];
    d[5] = -g1 * s[2] - g2 * s[2];
    return d;
}

double jacobi_constant(const State6& s, double mu, double guard)
{
    const auto r = primary_distances(s, mu);
    check_guard(r, guard);
    const double v2 = s[3] * s[3] + s[4] * s[4] + s[5] * s[5];
    return s[0] * s[0] + s[1] * s[1] + 2.0 * (1.0 - mu) / r[0] + 2.0 * mu / r[1] - v2;
}

namespace {

// d/dx of the effective potential on the x axis; zero at collinear points.
double collinear_residual(double x, double mu)
{
    const double d1 = x + mu;
    const double d2 = x - 1.0 + mu;
    return x - (1.0 - mu) * d1 / std::pow(std::abs(d1), 3) - mu * d2 / std::pow(std::abs(d2), 3);
}

double bisect(double lo, double hi, double mu)
{
    double flo = collinear_residual(lo, mu);
    for (int i = 0; i < 400; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi)
            break;
        const double fmid = collinear_residual(mid, mu);
        if ((fmid < 0.0) == (flo < 0.0)) {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

} // namespace

std::array<double, 3> collinear_libration_points(double mu)
{
    if (!(mu > 0.0 && mu < 0.5))
        throw DomainError("mu must lie in (0, 0.5)");
    // Offsets keep the brackets off the singular points where the residual
    // changes sign through infinity.
    const double tiny = 1e-9;
    const double l1 = bisect(-mu + tiny, 1.0 - mu - tiny, mu);
    const double l2 = bisect(1.0 - mu + tiny, 2.0, mu);
    const double l3 = bisect(-2.0, -mu - tiny, mu);
    return {l1, l2, l3};
}

namespace {

Trajectory rescale(const Trajectory& traj, double length, double time, Units to)
{
    Trajectory out = traj;
    const double vel = length / time;
    out.t0 = traj.t0 * time;
    out.dt = traj.dt * time;
    out.meta.anchor_epoch = traj.meta.anchor_epoch * time;
    for (auto& s : out.states) {
        for (int i = 0; i < 3; ++i) {
            s[i] *= length;
            s[i + 3] *= vel;
        }
    }
    out.units = to;
    return out;
}

} // namespace

Trajectory to_dimensional(const Trajectory& traj, const SystemConstants& c)
{
    if (traj.units != Units::NonDimensional)
        throw DomainError("to_dimensional: trajectory is already dimensional");
    return rescale(traj, c.length_unit_km, c.time_unit_s, Units::Dimensional);
}

Trajectory to_nondimensional(const Trajectory& traj, const SystemConstants& c)
{
    if (traj.units != Units::Dimensional)
        throw DomainError("to_nondimensional: trajectory is already non-dimensional");
    return rescale(traj, 1.0 / c.length_unit_km, 1.0 / c.time_unit_s, Units::NonDimensional);
}

double kms_to_nd(double kms, const SystemConstants& c)
{
    return kms / c.velocity_unit_kms();
}

} // namespace cbvp
