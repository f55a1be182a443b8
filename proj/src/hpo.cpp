#include "cbvp/hpo.hpp"

#include "cbvp/config.hpp"
#include "cbvp/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

namespace cbvp {

void SearchSpace::validate() const
{
    if (patch_sizes.empty() || ffn_dims.empty())
        throw ConfigError("search space choice lists must not be empty");
    for (std::size_t p : patch_sizes) {
        if (p == 0)
            throw ConfigError("search.patch_sizes entries must be >= 1");
    }
    for (std::size_t f : ffn_dims) {
        if (f == 0)
            throw ConfigError("search.ffn_dims entries must be >= 1");
    }
    if (layers_min == 0 || layers_min > layers_max)
        throw ConfigError("search.hidden_layers must be a non-empty range of positive integers");
    if (!(lr_min > 0.0) || !(lr_min < lr_max) || !std::isfinite(lr_max))
        throw ConfigError("search.learning_rate bounds must be positive with lo < hi");
}

bool space_contains(const SearchSpace& space, const Candidate& c)
{
    const auto has = [](const std::vector<std::size_t>& v, std::size_t x) {
        return std::find(v.begin(), v.end(), x) != v.end();
    };
    return has(space.patch_sizes, c.patch_size) && has(space.ffn_dims, c.ffn_dim) && c.n_layers >= space.layers_min &&
           c.n_layers <= space.layers_max && c.learning_rate >= space.lr_min && c.learning_rate <= space.lr_max;
}

Candidate sample_config(const SearchSpace& space, Rng& rng)
{
    Candidate c;
    c.patch_size = space.patch_sizes[rng.below(space.patch_sizes.size())];
    c.n_layers = space.layers_min + rng.below(space.layers_max - space.layers_min + 1);
    c.ffn_dim = space.ffn_dims[rng.below(space.ffn_dims.size())];
    const double lo = std::log(space.lr_min);
    const double hi = std::log(space.lr_max);
    c.learning_rate = std::clamp(std::exp(rng.uniform(lo, hi)), space.lr_min, space.lr_max);
    return c;
}

Candidate RandomSampler::propose(const SearchSpace& space, Rng& rng, std::span<const TrialRecord>)
{
    return sample_config(space, rng);
}

std::string trial_to_json_line(const TrialRecord& r)
{
    Json j;
    j["trial_id"] = r.trial_id;
    j["config"] = to_json(r.config);
    j["objective"] = r.objective ? Json(*r.objective) : Json(nullptr);
    j["status"] = r.status == TrialStatus::Completed ? "completed" : "failed";
    j["error"] = r.error;
    j["seed"] = r.seed;
    j["wall_ms"] = r.wall_ms;
    return j.dump();
}

TrialRecord trial_from_json_line(const std::string& line)
{
    try {
        const Json j = Json::parse(line);
        TrialRecord r;
        r.trial_id = j.at("trial_id").get<std::size_t>();
        r.config = candidate_from_json(j.at("config"));
        if (!j.at("objective").is_null())
            r.objective = j.at("objective").get<double>();
        const auto status = j.at("status").get<std::string>();
        if (status == "completed")
            r.status = TrialStatus::Completed;
        else if (status == "failed")
            r.status = TrialStatus::Failed;
        else
            throw FormatError("unknown trial status '" + status + "'");
        r.error = j.at("error").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.wall_ms = j.at("wall_ms").get<double>();
        if (r.status == TrialStatus::Completed && (!r.objective || !std::isfinite(*r.objective)))
            throw FormatError("completed trial without a finite objective");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed trial record: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("malformed trial config: ") + e.what());
    }
}

std::optional<std::size_t> best_trial(std::span<const TrialRecord> trials)
{
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < trials.size(); ++i) {
        const auto& t = trials[i];
        if (t.status != TrialStatus::Completed || !t.objective)
            continue;
        if (!best) {
            best = i;
            continue;
        }
        const auto& b = trials[*best];
        if (*t.objective < *b.objective || (*t.objective == *b.objective && t.trial_id < b.trial_id))
            best = i;
    }
    return best;
}

SearchResult run_search(const SearchSpace& space, const SearchOptions& options, const Objective& objective)
{
    space.validate();
    if (options.n_trials == 0)
        throw ConfigError("n_trials must be >= 1");
    RandomSampler fallback;
    Sampler& sampler = options.sampler ? *options.sampler : fallback;

    SearchResult result;
    if (options.log_path && std::filesystem::exists(*options.log_path)) {
        std::ifstream in(*options.log_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty())
                continue;
            TrialRecord r = trial_from_json_line(line);
            if (r.trial_id != result.trials.size())
                throw FormatError("trial log is out of order at trial " + std::to_string(r.trial_id));
            if (!space_contains(space, r.config))
                throw FormatError("logged trial " + std::to_string(r.trial_id) + " lies outside the search space");
            result.trials.push_back(std::move(r));
        }
    }

    std::ofstream log;
    if (options.log_path) {
        if (options.log_path->has_parent_path())
            std::filesystem::create_directories(options.log_path->parent_path());
        log.open(*options.log_path, std::ios::app);
        if (!log)
            throw IoError("cannot open trial log " + options.log_path->string());
    }

    std::size_t started = 0;
    for (std::size_t id = result.trials.size(); id < options.n_trials; ++id) {
        if (options.max_new_trials && started >= *options.max_new_trials)
            break;
        ++started;
        TrialRecord r;
        r.trial_id = id;
        r.seed = derive_seed(options.seed, id);
        // Each trial draws from its own stream so a resumed search proposes
        // the same candidates as an uninterrupted one.
        Rng rng(r.seed);
        r.config = sampler.propose(space, rng, result.trials);
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const double value = objective(r.config, r.seed);
            if (!std::isfinite(value))
                throw NonFiniteError("objective is not finite");
            r.objective = value;
            r.status = TrialStatus::Completed;
        } catch (const std::exception& e) {
            r.objective.reset();
            r.status = TrialStatus::Failed;
            r.error = e.what();
        }
        r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (log) {
            log << trial_to_json_line(r) << '\n';
            log.flush();
        }
        result.trials.push_back(std::move(r));
    }

    if (auto b = best_trial(result.trials))
        result.best = result.trials[*b];
    return result;
}

ModelConfig apply_candidate(ModelConfig model, const Candidate& c)
{
    model.patch_length = c.patch_size;
    model.n_layers = c.n_layers;
    model.ffn_dim = c.ffn_dim;
    model.forecast_length = 0;
    model.total_horizon = 0;
    return model;
}

Objective training_objective(const Dataset& ds, const ModelConfig& base_model, const TrainConfig& budget,
                             std::size_t threads, std::size_t max_eval_trajectories)
{
    return [&ds, base_model, budget, threads, max_eval_trajectories](const Candidate& c, std::uint64_t seed) {
        TrainConfig tc = budget;
        tc.learning_rate = c.learning_rate;
        tc.seed = seed;
        const ModelConfig model = apply_candidate(base_model, c);
        TrainOptions opts;
        opts.threads = threads;
        const TrainResult tr = train(ds, model, tc, opts);
        const EvalResult er = evaluate(tr.best_model, ds, Split::Validation, threads, {}, max_eval_trajectories);
        return er.mean_terminal_window_position_km;
    };
}

} // namespace cbvp
