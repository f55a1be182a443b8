#pragma once

#include "cbvp/trajectory.hpp"

#include <array>

namespace cbvp {

/// Sun–Earth CR3BP constants and the unit system that maps the
/// non-dimensional rotating frame to km / s.
struct SystemConstants {
    double mu = 3.00348e-6;                   ///< (Earth+Moon) / (Sun+Earth+Moon)
    double length_unit_km = 1.495978707e8;    ///< Sun–Earth distance
    double time_unit_s = 31558149.763545603 / (2.0 * 3.14159265358979323846); ///< sidereal year / 2π
    double mu_moon = 4902.800;                ///< km^3/s^2
    double moon_orbit_radius_km = 384400.0;
    double moon_radius_km = 1737.4;

    double velocity_unit_kms() const { return length_unit_km / time_unit_s; }

    /// Throws ConfigError when an invariant is violated.
    void validate() const;
};

inline constexpr double kSingularityGuard = 1e-12;

/// Right-hand side of the CR3BP equations of motion. Throws SingularityError
/// when the state is within `guard` of either primary.
State6 eom(const State6& state, double mu, double guard = kSingularityGuard);

/// Jacobi constant C = x² + y² + 2(1−μ)/r1 + 2μ/r2 − |v|².
double jacobi_constant(const State6& state, double mu, double guard = kSingularityGuard);

/// Distances to the larger (r1) and smaller (r2) primary.
std::array<double, 2> primary_distances(const State6& state, double mu);

/// x coordinates of L1, L2, L3 found by bisection on the collinear
/// equilibrium condition (monotone on each interval between singularities).
std::array<double, 3> collinear_libration_points(double mu);

Trajectory to_dimensional(const Trajectory& traj, const SystemConstants& constants);
Trajectory to_nondimensional(const Trajectory& traj, const SystemConstants& constants);

/// Velocity in km/s → non-dimensional velocity.
double kms_to_nd(double kms, const SystemConstants& constants);

} // namespace cbvp
