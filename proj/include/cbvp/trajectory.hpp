#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace cbvp {

using Vec3 = std::array<double, 3>;

/// Spacecraft position and velocity in the rotating frame.
struct State6 {
    std::array<double, 6> v{};

    static State6 from(const Vec3& r, const Vec3& vel)
    {
        return State6{{r[0], r[1], r[2], vel[0], vel[1], vel[2]}};
    }

    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    Vec3 position() const { return {v[0], v[1], v[2]}; }
    Vec3 velocity() const { return {v[3], v[4], v[5]}; }

    bool finite() const;

    friend bool operator==(const State6&, const State6&) = default;
};

enum class Units { NonDimensional, Dimensional };

struct TrajectoryMeta {
    double vinf_kms = 0.0;
    double post_flyby_angle_deg = 0.0;
    std::uint64_t seed = 0;
    // Epoch the propagation started from; differs from t0 for backward arcs.
    double anchor_epoch = 0.0;
    bool backward = false;
};

/// Uniformly sampled arc: states[i] is the state at t0 + i*dt, chronological.
/// Dimensional trajectories carry km, km/s and seconds.
struct Trajectory {
    double t0 = 0.0;
    double dt = 0.0;
    std::vector<State6> states;
    TrajectoryMeta meta;
    Units units = Units::NonDimensional;

    std::size_t size() const { return states.size(); }
    double time_at(std::size_t i) const { return t0 + static_cast<double>(i) * dt; }
    const State6& front() const { return states.front(); }
    const State6& back() const { return states.back(); }
};

inline double norm(const Vec3& a)
{
    return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
}

} // namespace cbvp
