#pragma once

#include "cbvp/dynamics.hpp"
#include "cbvp/integrator.hpp"
#include "cbvp/trajectory.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cbvp {

struct VinfCandidate {
    double magnitude_kms = 0.0;
    double direction_deg = 0.0; ///< in-plane, counter-clockwise from the rotating +x axis

    friend bool operator==(const VinfCandidate&, const VinfCandidate&) = default;
};

/// Magnitudes 0.8–1.4 km/s in 0.1 steps.
std::vector<double> default_incoming_magnitudes();
/// Directions 0–359° in 1° steps.
std::vector<double> default_incoming_directions();

struct FlybyConfig {
    std::vector<double> vinf_mags_kms{1.2, 1.3, 1.4};
    double angle_min_deg = -90.0;
    double angle_max_deg = 90.0;
    std::size_t n_per_vinf = 1000;
    std::size_t context_steps = 512;
    double forward_days = 90.0;
    double dt_minutes = 7.0;
    double min_periapsis_alt_km = 200.0;
    double approach_angle_deg = 0.0;
    std::uint64_t seed = 123;

    /// The backward arc must come closer to Earth than this to qualify.
    double earth_approach_radius_km = 1e5;
    /// ...but not closer than this (Earth radius + 200 km); deeper arcs pass
    /// through the planet.
    double earth_min_radius_km = 6578.137;
    /// One reference context per V∞ class instead of a single shared one.
    bool context_per_vinf = false;
    std::vector<double> incoming_mags_kms = default_incoming_magnitudes();
    std::vector<double> incoming_dirs_deg = default_incoming_directions();
    std::array<double, 3> split_ratios{0.7, 0.1, 0.2};

    void validate() const;
    /// Magnitude-major product of the incoming magnitudes and directions.
    std::vector<VinfCandidate> incoming_grid() const;
    double dt_nd(const SystemConstants& c) const { return dt_minutes * 60.0 / c.time_unit_s; }
    /// Forward arc length in samples: round(forward_days / dt).
    std::size_t forward_steps() const;
    double periapsis_radius_km(const SystemConstants& c) const { return c.moon_radius_km + min_periapsis_alt_km; }
};

/// Initial and terminal boundary conditions of one trajectory. The model
/// uses r0 ∥ rf; v0 and vf ride along for the 12-value prefix variant.
struct BoundaryPrefix {
    Vec3 r0{};
    Vec3 rf{};
    Vec3 v0{};
    Vec3 vf{};

    friend bool operator==(const BoundaryPrefix&, const BoundaryPrefix&) = default;
};

/// Moon on a circular orbit about Earth in z = 0, at the given phase from
/// the Sun–Earth line, expressed in the rotating frame.
State6 moon_state(const SystemConstants& constants, double approach_angle_deg);

/// Zero-SOI patch: spacecraft at the Moon's position, velocity offset by V∞.
State6 apply_vinf(const State6& moon, const Vec3& vinf_kms, const SystemConstants& constants);

/// Maximum turn angle (degrees) for a flyby with periapsis radius r_pi:
/// φ = 2·asin(1 / (1 + r_pi·V∞² / μ_moon)).
double max_deflection_deg(double vinf_kms, double r_pi_km, double mu_moon);

Vec3 vinf_vector(const VinfCandidate& c);

struct IncomingSolution {
    VinfCandidate candidate;
    Vec3 vinf_kms{};
    double min_earth_distance_km = 0.0;
};

/// Grid search for the incoming V∞ whose backward arc gets closest to Earth
/// (inside the approach radius, outside the impact floor). Ties go to the
/// smaller magnitude, then the smaller direction. Throws NoSolutionError.
IncomingSolution find_incoming_vinf(const FlybyConfig& config, const SystemConstants& constants,
                                    const IntegratorConfig& icfg, std::span<const VinfCandidate> grid,
                                    std::size_t threads = 1);

/// Backward arc of context_steps samples ending at the flyby state (t = 0).
Trajectory generate_reference_context(const Vec3& vinf_in_kms, const FlybyConfig& config,
                                      const SystemConstants& constants, const IntegratorConfig& icfg);

struct FamilySample {
    Trajectory forward; ///< starts one interval after the flyby
    BoundaryPrefix prefix;
    std::size_t context_index = 0;
    double turn_angle_deg = 0.0;
};

struct Rejection {
    double vinf_kms = 0.0;
    double angle_deg = 0.0;
    std::string reason;
};

struct ClassSummary {
    double vinf_kms = 0.0;
    double max_deflection_deg = 0.0;
    std::size_t emitted = 0;
    std::size_t rejected = 0;
};

struct Family {
    std::vector<Trajectory> contexts;
    std::vector<IncomingSolution> incoming;
    std::vector<FamilySample> samples;
    std::vector<Rejection> rejections;
    std::vector<ClassSummary> classes;
};

/// Runs the incoming grid search(es) and the forward family.
Family generate_family(const FlybyConfig& config, const SystemConstants& constants,
                       const IntegratorConfig& icfg, std::size_t threads = 1);

/// Forward family from already-solved incoming conditions (one shared, or
/// one per V∞ class when context_per_vinf is set).
Family generate_family(const FlybyConfig& config, const SystemConstants& constants,
                       const IntegratorConfig& icfg, std::span<const IncomingSolution> incoming,
                       std::size_t threads = 1);

struct SplitSizes {
    std::size_t train = 0;
    std::size_t validation = 0;
    std::size_t test = 0;

    friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

/// floor(n·ratio) for train and validation, remainder to test.
SplitSizes split_sizes(std::size_t n, const std::array<double, 3>& ratios);

/// Seeded permutation of [0, n) sliced into train / validation / test.
std::array<std::vector<std::size_t>, 3> shuffle_split(std::size_t n, const std::array<double, 3>& ratios,
                                                      std::uint64_t seed);

/// Per-channel z-score statistics. Channels that are exactly constant in
/// the fitted data keep a floored scale and map to / from their mean exactly.
struct Normalizer {
    static constexpr double kScaleFloor = 1e-12;

    std::array<double, 6> mean{};
    std::array<double, 6> scale{1, 1, 1, 1, 1, 1};
    std::array<bool, 6> constant{};

    double apply(std::size_t channel, double value) const;
    double invert(std::size_t channel, double value) const;
    State6 apply(const State6& s) const;
    State6 invert(const State6& s) const;
    /// Positions use the position-channel statistics, velocities the
    /// velocity-channel statistics.
    BoundaryPrefix apply(const BoundaryPrefix& p) const;
    BoundaryPrefix invert(const BoundaryPrefix& p) const;
};

class NormalizerAccumulator {
public:
    void add(const Trajectory& traj);
    Normalizer finish() const;

private:
    std::size_t count_ = 0;
    std::array<double, 6> mean_{};
    std::array<double, 6> m2_{};
    std::array<double, 6> min_{};
    std::array<double, 6> max_{};
};

Normalizer fit_normalizer(std::span<const Trajectory> series);

enum class Split { Train = 0, Validation = 1, Test = 2 };
const char* split_name(Split s);
Split parse_split(const std::string& name);

/// Shuffled, split and normalized family plus the provenance the manifest records.
struct Dataset {
    std::vector<Trajectory> contexts;
    std::array<std::vector<FamilySample>, 3> splits;
    Normalizer normalizer;

    FlybyConfig flyby;
    SystemConstants constants;
    IntegratorConfig integrator;
    std::vector<IncomingSolution> incoming;
    std::vector<ClassSummary> classes;
    std::vector<Rejection> rejections;

    const std::vector<FamilySample>& split(Split s) const { return splits[static_cast<std::size_t>(s)]; }
    const Trajectory& context_of(const FamilySample& s) const { return contexts.at(s.context_index); }
};

/// Shuffles and splits the family, then fits the normalizer on the training
/// split (each sample contributes its context and forward arc).
Dataset build_dataset(Family family, const FlybyConfig& config, const SystemConstants& constants,
                      const IntegratorConfig& icfg);

} // namespace cbvp
