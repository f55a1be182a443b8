#pragma once

#include "cbvp/flyby.hpp"
#include "cbvp/model.hpp"
#include "cbvp/rng.hpp"
#include "cbvp/trainer.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cbvp {

struct SearchSpace {
    std::vector<std::size_t> patch_sizes{4, 8, 16, 32, 64};
    std::size_t layers_min = 5;
    std::size_t layers_max = 9;
    std::vector<std::size_t> ffn_dims{128, 256, 512, 768, 1024};
    double lr_min = 1e-6;
    double lr_max = 1e-4;

    void validate() const;

    friend bool operator==(const SearchSpace&, const SearchSpace&) = default;
};

struct Candidate {
    std::size_t patch_size = 0;
    std::size_t n_layers = 0;
    std::size_t ffn_dim = 0;
    double learning_rate = 0.0;

    friend bool operator==(const Candidate&, const Candidate&) = default;
};

bool space_contains(const SearchSpace& space, const Candidate& c);

/// Uniform categorical and integer draws; log-uniform learning rate.
Candidate sample_config(const SearchSpace& space, Rng& rng);

struct TrialRecord;

class Sampler {
public:
    virtual ~Sampler() = default;
    /// `history` holds every finished trial so far, in trial order.
    virtual Candidate propose(const SearchSpace& space, Rng& rng, std::span<const TrialRecord> history) = 0;
    virtual std::string name() const = 0;
};

class RandomSampler final : public Sampler {
public:
    Candidate propose(const SearchSpace& space, Rng& rng, std::span<const TrialRecord> history) override;
    std::string name() const override { return "random"; }
};

enum class TrialStatus { Completed, Failed };

struct TrialRecord {
    std::size_t trial_id = 0;
    Candidate config;
    std::optional<double> objective; ///< validation mean terminal-window position error, km
    TrialStatus status = TrialStatus::Completed;
    std::string error;
    std::uint64_t seed = 0;
    double wall_ms = 0.0;
};

std::string trial_to_json_line(const TrialRecord& r);
TrialRecord trial_from_json_line(const std::string& line);

/// Objective for one candidate; throwing marks the trial failed.
using Objective = std::function<double(const Candidate& candidate, std::uint64_t trial_seed)>;

struct SearchOptions {
    std::size_t n_trials = 50;
    std::uint64_t seed = 0;
    /// JSON-lines log. Existing records are reused, so an interrupted search
    /// resumes where it stopped.
    std::optional<std::filesystem::path> log_path;
    Sampler* sampler = nullptr; ///< RandomSampler when null
    /// Stop after this many new trials in this call (simulates interruption).
    std::optional<std::size_t> max_new_trials;
};

struct SearchResult {
    std::optional<TrialRecord> best;
    std::vector<TrialRecord> trials;
};

/// Index of the completed trial with the lowest objective; ties go to the
/// lower trial id.
std::optional<std::size_t> best_trial(std::span<const TrialRecord> trials);

SearchResult run_search(const SearchSpace& space, const SearchOptions& options, const Objective& objective);

/// Applies a candidate to a base model / train configuration.
ModelConfig apply_candidate(ModelConfig model, const Candidate& c);

/// Trains the candidate for the budgeted steps and returns the mean
/// terminal-window position error (km) over the validation split.
Objective training_objective(const Dataset& ds, const ModelConfig& base_model, const TrainConfig& budget,
                             std::size_t threads = 1, std::size_t max_eval_trajectories = 0);

} // namespace cbvp
