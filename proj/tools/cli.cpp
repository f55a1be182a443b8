#include "cli.hpp"

#include "cbvp/config.hpp"
#include "cbvp/dataset_io.hpp"
#include "cbvp/dynamics.hpp"
#include "cbvp/errors.hpp"
#include "cbvp/evalstats.hpp"
#include "cbvp/flyby.hpp"
#include "cbvp/hpo.hpp"
#include "cbvp/integrator.hpp"
#include "cbvp/parallel.hpp"
#include "cbvp/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

namespace cbvp::cli {

namespace {

std::string fmt17(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<double> parse_numbers(const std::string& text, const std::string& what)
{
    std::vector<double> out;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(cell, &used));
            if (used != cell.size())
                throw std::invalid_argument(cell);
        } catch (const std::exception&) {
            throw ConfigError(what + ": '" + cell + "' is not a number");
        }
    }
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f)
        throw IoError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f)
        throw IoError("write failed for " + path.string());
}

struct Common {
    std::string config_path;
    std::optional<std::size_t> threads;
    std::optional<std::uint64_t> seed;

    RunConfig load() const
    {
        RunConfig rc = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (threads)
            rc.threads = *threads;
        if (seed)
            rc.seed = *seed;
        rc.validate();
        return rc;
    }
};

void add_common(CLI::App* sub, Common& c)
{
    sub->add_option("--config", c.config_path, "Run configuration (JSON)");
    sub->add_option("--threads", c.threads, "Worker threads (falls back to CBVP_THREADS)")->check(CLI::PositiveNumber);
    sub->add_option("--seed", c.seed, "Overrides the run seed");
}

std::size_t threads_of(const RunConfig& rc)
{
    return resolve_threads(rc.threads);
}

void echo_config(const std::filesystem::path& dir, const RunConfig& rc)
{
    write_json_file(dir / "effective_config.json", to_json(rc));
}

// --- propagate ------------------------------------------------------------

struct PropagateArgs {
    Common common;
    std::string state;
    bool km = false;
    double days = 1.0;
    double dt_min = 7.0;
    double t0 = 0.0;
    std::string out;
};

int cmd_propagate(const PropagateArgs& a, std::ostream& out)
{
    const RunConfig rc = a.common.load();
    const auto v = parse_numbers(a.state, "--state");
    if (v.size() != 6)
        throw ConfigError("--state needs 6 comma-separated values");
    if (!(a.days > 0.0) || !(a.dt_min > 0.0))
        throw ConfigError("--days and --dt-min must be positive");
    State6 s0{{v[0], v[1], v[2], v[3], v[4], v[5]}};
    if (a.km) {
        for (std::size_t i = 0; i < 3; ++i) {
            s0[i] /= rc.constants.length_unit_km;
            s0[i + 3] = kms_to_nd(s0[i + 3], rc.constants);
        }
    }
    const double dt = a.dt_min * 60.0 / rc.constants.time_unit_s;
    const std::size_t n = samples_for_duration(a.days * 86400.0, a.dt_min * 60.0) + 1;
    const Trajectory traj = sample_uniform(s0, a.t0, dt, n, Direction::Forward, rc.constants.mu, rc.integrator);

    std::string text = "t,x,y,z,vx,vy,vz,jacobi\n";
    for (std::size_t i = 0; i < traj.size(); ++i) {
        text += fmt17(traj.time_at(i));
        for (double c : traj.states[i].v)
            text += "," + fmt17(c);
        text += "," + fmt17(jacobi_constant(traj.states[i], rc.constants.mu)) + "\n";
    }
    if (a.out.empty())
        out << text;
    else
        write_text(a.out, text);
    return kExitOk;
}

// --- datagen --------------------------------------------------------------

struct DatagenArgs {
    Common common;
    std::string out;
    std::optional<std::size_t> n_per_vinf;
};

int cmd_datagen(const DatagenArgs& a, std::ostream& out)
{
    RunConfig rc = a.common.load();
    if (a.n_per_vinf)
        rc.flyby.n_per_vinf = *a.n_per_vinf;
    rc.validate();
    const Family fam = generate_family(rc.flyby, rc.constants, rc.integrator, threads_of(rc));
    const Dataset ds = build_dataset(fam, rc.flyby, rc.constants, rc.integrator);
    write_dataset(ds, a.out);
    echo_config(a.out, rc);

    for (const auto& inc : ds.incoming) {
        out << "incoming vinf " << inc.candidate.magnitude_kms << " km/s at " << inc.candidate.direction_deg
            << " deg, closest Earth approach " << inc.min_earth_distance_km << " km\n";
    }
    for (const auto& c : ds.classes) {
        out << "vinf " << c.vinf_kms << " km/s: emitted " << c.emitted << ", rejected " << c.rejected
            << " (max deflection " << c.max_deflection_deg << " deg)\n";
    }
    out << "splits: train " << ds.split(Split::Train).size() << ", validation " << ds.split(Split::Validation).size()
        << ", test " << ds.split(Split::Test).size() << "\n";
    return kExitOk;
}

// --- train ----------------------------------------------------------------

struct TrainArgs {
    Common common;
    std::string data;
    std::string out;
    std::optional<std::size_t> steps;
};

int cmd_train(const TrainArgs& a, std::ostream& out)
{
    RunConfig rc = a.common.load();
    if (a.steps)
        rc.train.steps = *a.steps;
    rc.validate();
    const Dataset ds = read_dataset(a.data);
    TrainOptions opts;
    opts.out_dir = a.out;
    opts.threads = threads_of(rc);
    const TrainResult tr = train(ds, rc.model, rc.train_config(), opts);
    echo_config(a.out, rc);
    out << "initial train mse " << fmt17(tr.initial_train_mse) << "\n";
    out << "final train mse " << fmt17(tr.final_train_mse) << "\n";
    out << "best val mse " << fmt17(tr.best_model.val_mse) << " at step " << tr.best_model.step << "\n";
    return kExitOk;
}

// --- hpo ------------------------------------------------------------------

struct HpoArgs {
    Common common;
    std::string data;
    std::string out;
    std::optional<std::size_t> trials;
};

int cmd_hpo(const HpoArgs& a, std::ostream& out)
{
    RunConfig rc = a.common.load();
    if (a.trials)
        rc.hpo.n_trials = *a.trials;
    rc.validate();
    const Dataset ds = read_dataset(a.data);
    TrainConfig budget = rc.train_config();
    budget.steps = rc.hpo.budget_steps;

    SearchOptions so;
    so.n_trials = rc.hpo.n_trials;
    so.seed = rc.seed;
    so.log_path = std::filesystem::path(a.out) / "trials.jsonl";
    std::filesystem::create_directories(a.out);
    echo_config(a.out, rc);
    const auto objective = training_objective(ds, rc.model, budget, threads_of(rc), rc.hpo.max_eval_trajectories);
    const SearchResult sr = run_search(rc.search, so, objective);
    if (!sr.best)
        throw NoSolutionError("every trial failed; see " + so.log_path->string());

    RunConfig best = rc;
    best.model = apply_candidate(rc.model, sr.best->config);
    best.model.total_horizon = rc.model.total_horizon;
    best.train.learning_rate = sr.best->config.learning_rate;
    Json doc;
    doc["trial"] = Json::parse(trial_to_json_line(*sr.best));
    doc["config"] = to_json(best);
    write_json_file(std::filesystem::path(a.out) / "best_config.json", doc);
    out << "best trial " << sr.best->trial_id << " objective " << fmt17(*sr.best->objective) << " km\n";
    return kExitOk;
}

// --- generate -------------------------------------------------------------

struct GenerateArgs {
    Common common;
    std::string ckpt;
    std::string prefix;
    bool km = false;
    std::size_t context_index = 0;
    std::optional<std::size_t> horizon;
    std::string out;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out)
{
    a.common.load();
    const ModelBundle b = load_bundle(a.ckpt);
    const auto v = parse_numbers(a.prefix, "--prefix");
    if (v.size() != b.model.prefix_values)
        throw ConfigError("--prefix needs " + std::to_string(b.model.prefix_values) + " comma-separated values");
    if (a.context_index >= b.contexts.size())
        throw ConfigError("--context-index out of range");
    const SystemConstants& c = b.constants;

    BoundaryPrefix p;
    const double lu = a.km ? c.length_unit_km : 1.0;
    const double vu = a.km ? c.velocity_unit_kms() : 1.0;
    for (std::size_t i = 0; i < 3; ++i) {
        p.r0[i] = v[i] / lu;
        p.rf[i] = v[i + 3] / lu;
        if (v.size() == 12) {
            p.v0[i] = v[i + 6] / vu;
            p.vf[i] = v[i + 9] / vu;
        }
    }
    const std::size_t horizon = a.horizon ? *a.horizon : b.model.total_horizon;
    const Trajectory& ctx = b.contexts[a.context_index];
    if (ctx.size() < b.model.context_length)
        throw ShapeError("stored context is shorter than the model context length");
    Trajectory tail = ctx;
    tail.states.erase(tail.states.begin(), tail.states.end() - static_cast<std::ptrdiff_t>(b.model.context_length));
    const auto forecast = run_generation(b, normalized_states(tail, b.normalizer),
                                         prefix_vector(b.normalizer.apply(p), b.model.prefix_values), horizon);

    std::string text = "t_sec,x_km,y_km,z_km,vx_kms,vy_kms,vz_kms\n";
    for (std::size_t k = 0; k < horizon; ++k) {
        State6 z;
        std::copy_n(forecast.begin() + static_cast<std::ptrdiff_t>(k * 6), 6, z.v.begin());
        const State6 s = b.normalizer.invert(z);
        text += fmt17(static_cast<double>(k + 1) * ctx.dt * c.time_unit_s);
        for (std::size_t i = 0; i < 3; ++i)
            text += "," + fmt17(s[i] * c.length_unit_km);
        for (std::size_t i = 3; i < 6; ++i)
            text += "," + fmt17(s[i] * c.velocity_unit_kms());
        text += "\n";
    }
    write_text(a.out, text);
    out << "wrote " << horizon << " steps to " << a.out << "\n";
    return kExitOk;
}

// --- eval -----------------------------------------------------------------

struct EvalArgs {
    Common common;
    std::string ckpt;
    std::string data;
    std::string split = "test";
    std::string out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out)
{
    const RunConfig rc = a.common.load();
    const Split split = parse_split(a.split);
    const ModelBundle b = load_bundle(a.ckpt);
    const Dataset ds = read_dataset(a.data);
    const EvalResult er = evaluate(b, ds, split, threads_of(rc), {}, rc.eval.max_trajectories);
    std::vector<ErrorSeries> series;
    for (const auto& t : er.trajectories)
        series.push_back(t.errors);
    const EnsembleBand band = ensemble_band(series, rc.eval.level, rc.eval.method);
    export_stats(band, series, a.out);

    Json summary;
    summary["split"] = split_name(split);
    summary["trajectories"] = er.trajectories.size();
    summary["horizon"] = b.model.total_horizon;
    summary["mean_terminal_position_km"] = er.mean_terminal_position_km;
    summary["mean_position_km"] = er.mean_position_km;
    summary["mean_terminal_window_position_km"] = er.mean_terminal_window_position_km;
    summary["band_level"] = rc.eval.level;
    summary["band_method"] = band_method_name(rc.eval.method);
    write_json_file(std::filesystem::path(a.out) / "summary.json", summary);
    echo_config(a.out, rc);
    out << "evaluated " << er.trajectories.size() << " trajectories; mean terminal position error "
        << fmt17(er.mean_terminal_position_km) << " km\n";
    return kExitOk;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Prefix-conditioned trajectory generation for lunar-flyby transfers", "cbvp"};
    app.require_subcommand(1);

    PropagateArgs prop;
    auto* sp = app.add_subcommand("propagate", "Propagate one CR3BP state and write a CSV");
    add_common(sp, prop.common);
    sp->add_option("--state", prop.state, "x,y,z,vx,vy,vz (non-dimensional unless --km)")->required();
    sp->add_flag("--km", prop.km, "State given in km and km/s");
    sp->add_option("--days", prop.days, "Duration in days");
    sp->add_option("--dt-min", prop.dt_min, "Sampling interval in minutes");
    sp->add_option("--t0", prop.t0, "Start epoch (non-dimensional)");
    sp->add_option("--out", prop.out, "Output CSV (stdout when omitted)");

    DatagenArgs dg;
    auto* sd = app.add_subcommand("datagen", "Generate the flyby dataset");
    add_common(sd, dg.common);
    sd->add_option("--out", dg.out, "Dataset directory")->required();
    sd->add_option("--n-per-vinf", dg.n_per_vinf, "Overrides flyby.n_per_vinf");

    TrainArgs tr;
    auto* st = app.add_subcommand("train", "Train a model on a dataset");
    add_common(st, tr.common);
    st->add_option("--data", tr.data, "Dataset directory")->required();
    st->add_option("--out", tr.out, "Checkpoint directory")->required();
    st->add_option("--steps", tr.steps, "Overrides train.steps");

    HpoArgs hp;
    auto* sh = app.add_subcommand("hpo", "Random hyperparameter search");
    add_common(sh, hp.common);
    sh->add_option("--data", hp.data, "Dataset directory")->required();
    sh->add_option("--out", hp.out, "Directory for trials.jsonl and best_config.json")->required();
    sh->add_option("--trials", hp.trials, "Overrides hpo.n_trials");

    GenerateArgs gen;
    auto* sg = app.add_subcommand("generate", "Generate a trajectory from a checkpoint and a prefix");
    add_common(sg, gen.common);
    sg->add_option("--ckpt", gen.ckpt, "Checkpoint file")->required();
    sg->add_option("--prefix", gen.prefix, "r0x,r0y,r0z,rfx,rfy,rfz (non-dimensional unless --km)")->required();
    sg->add_flag("--km", gen.km, "Prefix given in km (and km/s for the 12-value form)");
    sg->add_option("--context-index", gen.context_index, "Reference context to start from");
    sg->add_option("--horizon", gen.horizon, "Steps to generate (default: checkpoint horizon)");
    sg->add_option("--out", gen.out, "Output CSV")->required();

    EvalArgs ev;
    auto* se = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    add_common(se, ev.common);
    se->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
    se->add_option("--data", ev.data, "Dataset directory")->required();
    se->add_option("--split", ev.split, "train, validation or test");
    se->add_option("--out", ev.out, "Statistics directory")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty())
        reversed.pop_back();
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (sp->parsed())
            return cmd_propagate(prop, out);
        if (sd->parsed())
            return cmd_datagen(dg, out);
        if (st->parsed())
            return cmd_train(tr, out);
        if (sh->parsed())
            return cmd_hpo(hp, out);
        if (sg->parsed())
            return cmd_generate(gen, out);
        if (se->parsed())
            return cmd_eval(ev, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

} // namespace cbvp::cli
