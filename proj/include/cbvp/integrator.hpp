#pragma once

#include "cbvp/trajectory.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace cbvp {

enum class RkMethod { Dop853, Dopri5 };

struct IntegratorConfig {
    double rel_tol = 1e-12;
    double abs_tol = 1e-12;
    double max_step = 0.0;            ///< 0 means unlimited
    std::size_t max_steps = 1'000'000; ///< per advance (propagate call or sample segment)
    RkMethod method = RkMethod::Dop853;

    void validate() const;
};

using VectorField = std::function<void(double t, std::span<const double> y, std::span<double> dydt)>;

/// Adaptive embedded Runge–Kutta session. advance_to() lands exactly on the
/// requested time and keeps the step-size history for the next call, so a
/// sequence of advances behaves like one continuous integration with forced
/// step boundaries.
class Integrator {
public:
    Integrator(VectorField field, std::span<const double> y0, double t0, IntegratorConfig cfg);

    void advance_to(double t_target);

    double time() const { return t_; }
    std::span<const double> state() const { return y_; }
    std::size_t accepted_steps() const { return accepted_; }
    std::size_t rejected_steps() const { return rejected_; }

private:
    double initial_step(double direction) const;
    // Takes one trial step of size h from (t_, y_) into y_new_ and returns
    // the scaled error norm.
    double trial_step(double h);

    VectorField field_;
    IntegratorConfig cfg_;
    std::size_t n_;
    double t_;
    std::vector<double> y_;
    std::vector<double> f0_;
    std::vector<double> y_new_;
    std::vector<double> y_stage_;
    std::vector<std::vector<double>> k_;
    double h_ = 0.0;         // signed proposal for the next step, 0 before first use
    std::size_t accepted_ = 0;
    std::size_t rejected_ = 0;
};

/// One-shot integration of a general system.
std::vector<double> integrate(const VectorField& field, double t0, std::span<const double> y0, double t1,
                              const IntegratorConfig& cfg);

VectorField cr3bp_field(double mu);

/// State at t1 given state0 at t0 (t1 < t0 integrates backward).
State6 propagate(const State6& state0, double t0, double t1, double mu, const IntegratorConfig& cfg);

enum class Direction { Forward, Backward };

/// n samples at t0, t0±dt, ..., t0±(n−1)dt. A backward result is returned in
/// chronological order with meta.anchor_epoch = t0 and meta.backward set.
Trajectory sample_uniform(const State6& state0, double t0, double dt, std::size_t n, Direction direction,
                          double mu, const IntegratorConfig& cfg);

/// Number of sampling intervals in a duration: round(duration / dt).
std::size_t samples_for_duration(double duration, double dt);

} // namespace cbvp
