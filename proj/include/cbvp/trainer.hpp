#pragma once

#include "cbvp/evalstats.hpp"
#include "cbvp/flyby.hpp"
#include "cbvp/model.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cbvp {

enum class Precision { Float64, Float32 };

const char* precision_name(Precision p);
Precision parse_precision(const std::string& s);

struct TrainConfig {
    /// Optimizer steps. 0 is accepted by train() as "no updates".
    std::size_t steps = 16000;
    std::size_t batch_size = 32;
    double learning_rate = 5e-4;
    double eval_fraction = 0.01;
    std::uint64_t seed = 0;
    Precision precision = Precision::Float64;
    /// Validation windows per evaluation; 0 uses every window. A cap keeps
    /// evenly spaced windows so the subset is deterministic.
    std::size_t val_max_windows = 0;
    /// Global gradient-norm clip; 0 disables it.
    double grad_clip = 0.0;

    void validate() const;
    /// Validation cadence: ceil(eval_fraction · steps).
    std::size_t eval_every() const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Normalized teacher-forcing example.
struct TrainSample {
    std::vector<double> context; ///< [context_length][C]
    std::vector<double> target;  ///< [F][C]
    std::vector<double> prefix;  ///< [prefix_values]
};

/// Prefix values in model order: r0 ∥ rf, then v0 ∥ vf for the 12-value variant.
std::vector<double> prefix_vector(const BoundaryPrefix& p, std::size_t prefix_values);

/// Sliding windows with stride F over context ∥ forward (both normalized).
/// Every window carries the same prefix. Throws TooShortError.
std::vector<TrainSample> make_windows(const Trajectory& context, const Trajectory& forward,
                                      const BoundaryPrefix& prefix, const ModelConfig& cfg);

/// Number of windows make_windows would produce for a series length.
std::size_t window_count(std::size_t series_length, const ModelConfig& cfg);

/// Everything a checkpoint carries: weights plus the data geometry needed to
/// run generation without the dataset directory.
struct ModelBundle {
    ModelConfig model;
    TrainConfig train;
    Precision precision = Precision::Float64;
    ModelParams<double> params; ///< float32 weights are held exactly as double
    Normalizer normalizer;
    std::vector<Trajectory> contexts; ///< non-dimensional reference contexts
    SystemConstants constants;
    std::uint64_t step = 0;
    double val_mse = 0.0;
};

void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_bundle(const std::filesystem::path& path);

/// Forward length used for training and evaluation: the largest multiple of
/// F not exceeding the stored forward arc.
std::size_t usable_horizon(const Dataset& ds, const ModelConfig& cfg);

struct MetricRow {
    std::size_t step = 0;
    double train_mse = 0.0; ///< mean training loss since the previous row
    double val_mse = 0.0;
    double wall_ms = 0.0;
};

struct TrainResult {
    ModelBundle final_model;
    ModelBundle best_model;
    std::vector<MetricRow> metrics;
    std::vector<double> step_losses;
    double initial_train_mse = 0.0; ///< eval-mode MSE over every training window before updates
    double final_train_mse = 0.0;   ///< same, after the last update
};

struct TrainOptions {
    /// When set, best.ckpt, final.ckpt and metrics.csv are written here.
    std::optional<std::filesystem::path> out_dir;
    std::size_t threads = 1;
    /// Called after each optimizer step with (step, loss).
    std::function<void(std::size_t, double)> on_step;
};

/// Teacher-forced MSE training with Adam. Resolves model.total_horizon = 0 to
/// the usable horizon of the dataset.
TrainResult train(const Dataset& ds, ModelConfig model, const TrainConfig& tc, const TrainOptions& opts = {});

/// Mean eval-mode MSE over every window of a split.
double split_mse(const ModelBundle& bundle, const Dataset& ds, Split split, std::size_t max_windows = 0);

struct TrajectoryEval {
    Trajectory predicted; ///< non-dimensional
    Trajectory truth;     ///< non-dimensional
    ErrorSeries errors;
    double terminal_position_km = 0.0;
    double mean_position_km = 0.0;
    double terminal_window_position_km = 0.0; ///< mean over the last F steps
};

struct EvalResult {
    std::vector<TrajectoryEval> trajectories;
    double mean_terminal_position_km = 0.0;
    double mean_position_km = 0.0;
    double mean_terminal_window_position_km = 0.0;
};

/// Produces the non-dimensional prediction [horizon][6] for one sample; the
/// default runs the model and denormalizes. Tests inject alternatives.
using Predictor = std::function<std::vector<double>(const FamilySample& sample, std::size_t index)>;

/// Generates every trajectory of a split from its reference context and
/// prefix, denormalizes, and measures errors against the truth.
EvalResult evaluate(const ModelBundle& bundle, const Dataset& ds, Split split, std::size_t threads = 1,
                    const Predictor& predictor = {}, std::size_t max_trajectories = 0);

/// Runs generation for a bundle: normalized context [L][C] and prefix →
/// normalized forecast [horizon][C].
std::vector<double> run_generation(const ModelBundle& bundle, const std::vector<double>& context,
                                   const std::vector<double>& prefix, std::size_t horizon);

/// Normalized [n][C] copy of a trajectory's states.
std::vector<double> normalized_states(const Trajectory& traj, const Normalizer& norm);

} // namespace cbvp
