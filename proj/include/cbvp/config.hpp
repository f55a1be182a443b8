#pragma once

#include "cbvp/dynamics.hpp"
#include "cbvp/evalstats.hpp"
#include "cbvp/flyby.hpp"
#include "cbvp/hpo.hpp"
#include "cbvp/integrator.hpp"
#include "cbvp/model.hpp"
#include "cbvp/trainer.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace cbvp {

using Json = nlohmann::ordered_json;

// Each reader overlays the keys present in `j` onto `out`, rejecting unknown
// keys and mistyped values with ConfigError. `where` prefixes messages.

Json to_json(const SystemConstants& c);
void read_json(const Json& j, SystemConstants& out, const std::string& where = "constants");

Json to_json(const IntegratorConfig& c);
void read_json(const Json& j, IntegratorConfig& out, const std::string& where = "integrator");

Json to_json(const FlybyConfig& c);
void read_json(const Json& j, FlybyConfig& out, const std::string& where = "flyby");

Json to_json(const ModelConfig& c);
void read_json(const Json& j, ModelConfig& out, const std::string& where = "model");

/// `with_run_fields` adds seed and precision, which a run document keeps at
/// the top level.
Json to_json(const TrainConfig& c, bool with_run_fields = true);
void read_json(const Json& j, TrainConfig& out, const std::string& where = "train", bool with_run_fields = true);

Json to_json(const SearchSpace& s);
void read_json(const Json& j, SearchSpace& out, const std::string& where = "search");

Json to_json(const Candidate& c);
Candidate candidate_from_json(const Json& j);

Json to_json(const Normalizer& n);
Normalizer normalizer_from_json(const Json& j);

Json to_json(const Trajectory& t);
Trajectory trajectory_from_json(const Json& j);

struct HpoConfig {
    std::size_t n_trials = 50;
    std::size_t budget_steps = 500;
    /// Validation trajectories scored per trial; 0 scores all of them.
    std::size_t max_eval_trajectories = 0;
};

struct EvalConfig {
    double level = 0.95;
    BandMethod method = BandMethod::Percentile;
    /// Trajectories evaluated from the split; 0 evaluates all of them.
    std::size_t max_trajectories = 0;
};

/// The single document every subcommand reads.
struct RunConfig {
    std::uint64_t seed = 0;
    Precision precision = Precision::Float64;
    std::optional<std::size_t> threads;
    SystemConstants constants;
    IntegratorConfig integrator;
    FlybyConfig flyby;
    ModelConfig model;
    TrainConfig train;
    SearchSpace search;
    HpoConfig hpo;
    EvalConfig eval;

    /// Training settings with the run-level seed and precision applied.
    TrainConfig train_config() const;
    void validate() const;
};

Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);
/// Parses and validates a config file. Throws ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

Json parse_json_file(const std::filesystem::path& path);
/// Writes pretty-printed JSON with a trailing newline.
void write_json_file(const std::filesystem::path& path, const Json& j);

} // namespace cbvp
