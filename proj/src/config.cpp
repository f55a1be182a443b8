#include "cbvp/config.hpp"

#include "cbvp/errors.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace cbvp {

namespace {

class Reader {
public:
    Reader(const Json& j, std::string where) : j_(j), where_(std::move(where))
    {
        if (!j_.is_object())
            throw ConfigError(where_ + " must be a JSON object");
    }

    void size(const char* key, std::size_t& out) { with(key, [&](const Json& v) { out = as_size(v, key); }); }

    void u64(const char* key, std::uint64_t& out)
    {
        with(key, [&](const Json& v) { out = static_cast<std::uint64_t>(as_size(v, key)); });
    }

    void number(const char* key, double& out) { with(key, [&](const Json& v) { out = as_number(v, key); }); }

    void boolean(const char* key, bool& out)
    {
        with(key, [&](const Json& v) {
            if (!v.is_boolean())
                fail(key, "a boolean");
            out = v.get<bool>();
        });
    }

    void string(const char* key, std::string& out)
    {
        with(key, [&](const Json& v) {
            if (!v.is_string())
                fail(key, "a string");
            out = v.get<std::string>();
        });
    }

    void numbers(const char* key, std::vector<double>& out)
    {
        with(key, [&](const Json& v) {
            if (!v.is_array())
                fail(key, "an array of numbers");
            out.clear();
            for (const auto& e : v)
                out.push_back(as_number(e, key));
        });
    }

    void sizes(const char* key, std::vector<std::size_t>& out)
    {
        with(key, [&](const Json& v) {
            if (!v.is_array())
                fail(key, "an array of non-negative integers");
            out.clear();
            for (const auto& e : v)
                out.push_back(as_size(e, key));
        });
    }

    template <typename F>
    void with(const char* key, F&& f)
    {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it != j_.end())
            f(*it);
    }

    std::string path(const char* key) const { return where_ + "." + key; }

    void finish() const
    {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key()))
                throw ConfigError("unknown key '" + where_ + "." + it.key() + "'");
        }
    }

private:
    [[noreturn]] void fail(const char* key, const char* what) const
    {
        throw ConfigError(where_ + "." + key + " must be " + what);
    }

    std::size_t as_size(const Json& v, const char* key) const
    {
        if (!v.is_number_unsigned())
            fail(key, "a non-negative integer");
        return v.get<std::size_t>();
    }

    double as_number(const Json& v, const char* key) const
    {
        if (!v.is_number())
            fail(key, "a number");
        return v.get<double>();
    }

    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

std::array<double, 3> vec3_from(const Json& j, const std::string& where)
{
    if (!j.is_array() || j.size() != 3)
        throw ConfigError(where + " must be an array of 3 numbers");
    std::array<double, 3> out{};
    for (std::size_t i = 0; i < 3; ++i) {
        if (!j[i].is_number())
            throw ConfigError(where + " must be an array of 3 numbers");
        out[i] = j[i].get<double>();
    }
    return out;
}

} // namespace

Json to_json(const SystemConstants& c)
{
    return Json{{"mu", c.mu},
                {"length_unit_km", c.length_unit_km},
                {"time_unit_s", c.time_unit_s},
                {"mu_moon", c.mu_moon},
                {"moon_orbit_radius_km", c.moon_orbit_radius_km},
                {"moon_radius_km", c.moon_radius_km}};
}

void read_json(const Json& j, SystemConstants& out, const std::string& where)
{
    Reader r(j, where);
    r.number("mu", out.mu);
    r.number("length_unit_km", out.length_unit_km);
    r.number("time_unit_s", out.time_unit_s);
    r.number("mu_moon", out.mu_moon);
    r.number("moon_orbit_radius_km", out.moon_orbit_radius_km);
    r.number("moon_radius_km", out.moon_radius_km);
    r.finish();
}

Json to_json(const IntegratorConfig& c)
{
    return Json{{"rel_tol", c.rel_tol},
                {"abs_tol", c.abs_tol},
                {"max_step", c.max_step},
                {"max_steps", c.max_steps},
                {"method", c.method == RkMethod::Dop853 ? "dop853" : "dopri5"}};
}

void read_json(const Json& j, IntegratorConfig& out, const std::string& where)
{
    Reader r(j, where);
    r.number("rel_tol", out.rel_tol);
    r.number("abs_tol", out.abs_tol);
    r.number("max_step", out.max_step);
    r.size("max_steps", out.max_steps);
    std::string method = out.method == RkMethod::Dop853 ? "dop853" : "dopri5";
    r.string("method", method);
    if (method == "dop853")
        out.method = RkMethod::Dop853;
    else if (method == "dopri5")
        out.method = RkMethod::Dopri5;
    else
        throw ConfigError(r.path("method") + " must be dop853 or dopri5");
    r.finish();
}

Json to_json(const FlybyConfig& c)
{
    return Json{{"vinf_mags_kms", c.vinf_mags_kms},
                {"angle_range_deg", {c.angle_min_deg, c.angle_max_deg}},
                {"n_per_vinf", c.n_per_vinf},
                {"context_steps", c.context_steps},
                {"forward_days", c.forward_days},
                {"dt_minutes", c.dt_minutes},
                {"min_periapsis_alt_km", c.min_periapsis_alt_km},
                {"approach_angle_deg", c.approach_angle_deg},
                {"seed", c.seed},
                {"earth_approach_radius_km", c.earth_approach_radius_km},
                {"earth_min_radius_km", c.earth_min_radius_km},
                {"context_per_vinf", c.context_per_vinf},
                {"incoming_mags_kms", c.incoming_mags_kms},
                {"incoming_dirs_deg", c.incoming_dirs_deg},
                {"split_ratios", c.split_ratios}};
}

void read_json(const Json& j, FlybyConfig& out, const std::string& where)
{
    Reader r(j, where);
    r.numbers("vinf_mags_kms", out.vinf_mags_kms);
    r.with("angle_range_deg", [&](const Json& v) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
            throw ConfigError(r.path("angle_range_deg") + " must be [min, max]");
        out.angle_min_deg = v[0].get<double>();
        out.angle_max_deg = v[1].get<double>();
    });
    r.size("n_per_vinf", out.n_per_vinf);
    r.size("context_steps", out.context_steps);
    r.number("forward_days", out.forward_days);
    r.number("dt_minutes", out.dt_minutes);
    r.number("min_periapsis_alt_km", out.min_periapsis_alt_km);
    r.number("approach_angle_deg", out.approach_angle_deg);
    r.u64("seed", out.seed);
    r.number("earth_approach_radius_km", out.earth_approach_radius_km);
    r.number("earth_min_radius_km", out.earth_min_radius_km);
    r.boolean("context_per_vinf", out.context_per_vinf);
    r.numbers("incoming_mags_kms", out.incoming_mags_kms);
    r.numbers("incoming_dirs_deg", out.incoming_dirs_deg);
    r.with("split_ratios", [&](const Json& v) { out.split_ratios = vec3_from(v, r.path("split_ratios")); });
    r.finish();
}

Json to_json(const ModelConfig& c)
{
    return Json{{"context_length", c.context_length},
                {"patch_length", c.patch_length},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"n_layers", c.n_layers},
                {"ffn_dim", c.ffn_dim},
                {"dropout", c.dropout},
                {"head_dropout", c.head_dropout},
                {"forecast_length", c.forecast_length},
                {"total_horizon", c.total_horizon},
                {"n_channels", c.n_channels},
                {"prefix_mode", prefix_mode_name(c.prefix_mode)},
                {"prefix_every_iteration", c.prefix_every_iteration},
                {"positional", positional_mode_name(c.positional)},
                {"prefix_values", c.prefix_values}};
}

void read_json(const Json& j, ModelConfig& out, const std::string& where)
{
    Reader r(j, where);
    r.size("context_length", out.context_length);
    r.size("patch_length", out.patch_length);
    r.size("d_model", out.d_model);
    r.size("n_heads", out.n_heads);
    r.size("n_layers", out.n_layers);
    r.size("ffn_dim", out.ffn_dim);
    r.number("dropout", out.dropout);
    r.number("head_dropout", out.head_dropout);
    r.size("forecast_length", out.forecast_length);
    r.size("total_horizon", out.total_horizon);
    r.size("n_channels", out.n_channels);
    std::string mode = prefix_mode_name(out.prefix_mode);
    r.string("prefix_mode", mode);
    out.prefix_mode = parse_prefix_mode(mode);
    r.boolean("prefix_every_iteration", out.prefix_every_iteration);
    std::string pos = positional_mode_name(out.positional);
    r.string("positional", pos);
    out.positional = parse_positional_mode(pos);
    r.size("prefix_values", out.prefix_values);
    r.finish();
}

Json to_json(const TrainConfig& c, bool with_run_fields)
{
    Json j{{"steps", c.steps},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"eval_fraction", c.eval_fraction},
           {"val_max_windows", c.val_max_windows},
           {"grad_clip", c.grad_clip}};
    if (with_run_fields) {
        j["seed"] = c.seed;
        j["precision"] = precision_name(c.precision);
    }
    return j;
}

void read_json(const Json& j, TrainConfig& out, const std::string& where, bool with_run_fields)
{
    Reader r(j, where);
    r.size("steps", out.steps);
    r.size("batch_size", out.batch_size);
    r.number("learning_rate", out.learning_rate);
    r.number("eval_fraction", out.eval_fraction);
    r.size("val_max_windows", out.val_max_windows);
    r.number("grad_clip", out.grad_clip);
    if (with_run_fields) {
        r.u64("seed", out.seed);
        std::string p = precision_name(out.precision);
        r.string("precision", p);
        out.precision = parse_precision(p);
    }
    r.finish();
}

Json to_json(const SearchSpace& s)
{
    return Json{{"patch_sizes", s.patch_sizes},
                {"hidden_layers", {s.layers_min, s.layers_max}},
                {"ffn_dims", s.ffn_dims},
                {"learning_rate", {s.lr_min, s.lr_max}}};
}

void read_json(const Json& j, SearchSpace& out, const std::string& where)
{
    Reader r(j, where);
    r.sizes("patch_sizes", out.patch_sizes);
    r.with("hidden_layers", [&](const Json& v) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number_unsigned() || !v[1].is_number_unsigned())
            throw ConfigError(r.path("hidden_layers") + " must be [min, max] integers");
        out.layers_min = v[0].get<std::size_t>();
        out.layers_max = v[1].get<std::size_t>();
    });
    r.sizes("ffn_dims", out.ffn_dims);
    r.with("learning_rate", [&](const Json& v) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
            throw ConfigError(r.path("learning_rate") + " must be [lo, hi]");
        out.lr_min = v[0].get<double>();
        out.lr_max = v[1].get<double>();
    });
    r.finish();
}

Json to_json(const Candidate& c)
{
    return Json{{"patch_size", c.patch_size},
                {"n_layers", c.n_layers},
                {"ffn_dim", c.ffn_dim},
                {"learning_rate", c.learning_rate}};
}

Candidate candidate_from_json(const Json& j)
{
    Candidate c;
    Reader r(j, "config");
    r.size("patch_size", c.patch_size);
    r.size("n_layers", c.n_layers);
    r.size("ffn_dim", c.ffn_dim);
    r.number("learning_rate", c.learning_rate);
    r.finish();
    return c;
}

Json to_json(const Normalizer& n)
{
    return Json{{"mean", n.mean}, {"scale", n.scale}, {"constant", n.constant}};
}

Normalizer normalizer_from_json(const Json& j)
{
    Normalizer n;
    try {
        n.mean = j.at("mean").get<std::array<double, 6>>();
        n.scale = j.at("scale").get<std::array<double, 6>>();
        n.constant = j.at("constant").get<std::array<bool, 6>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed normalizer: ") + e.what());
    }
    return n;
}

Json to_json(const Trajectory& t)
{
    Json states = Json::array();
    for (const auto& s : t.states)
        states.push_back(s.v);
    return Json{{"t0", t.t0},
                {"dt", t.dt},
                {"units", t.units == Units::NonDimensional ? "nondimensional" : "dimensional"},
                {"vinf_kms", t.meta.vinf_kms},
                {"post_flyby_angle_deg", t.meta.post_flyby_angle_deg},
                {"seed", t.meta.seed},
                {"anchor_epoch", t.meta.anchor_epoch},
                {"backward", t.meta.backward},
                {"states", std::move(states)}};
}

Trajectory trajectory_from_json(const Json& j)
{
    Trajectory t;
    try {
        t.t0 = j.at("t0").get<double>();
        t.dt = j.at("dt").get<double>();
        t.units = j.at("units").get<std::string>() == "dimensional" ? Units::Dimensional : Units::NonDimensional;
        t.meta.vinf_kms = j.at("vinf_kms").get<double>();
        t.meta.post_flyby_angle_deg = j.at("post_flyby_angle_deg").get<double>();
        t.meta.seed = j.at("seed").get<std::uint64_t>();
        t.meta.anchor_epoch = j.at("anchor_epoch").get<double>();
        t.meta.backward = j.at("backward").get<bool>();
        for (const auto& s : j.at("states"))
            t.states.push_back(State6{s.get<std::array<double, 6>>()});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed trajectory: ") + e.what());
    }
    return t;
}

TrainConfig RunConfig::train_config() const
{
    TrainConfig tc = train;
    tc.seed = seed;
    tc.precision = precision;
    return tc;
}

void RunConfig::validate() const
{
    constants.validate();
    integrator.validate();
    flyby.validate();
    model.validate();
    train_config().validate();
    search.validate();
    if (hpo.n_trials == 0)
        throw ConfigError("hpo.n_trials must be >= 1");
    if (hpo.budget_steps == 0)
        throw ConfigError("hpo.budget_steps must be >= 1");
    if (!(eval.level > 0.0 && eval.level < 1.0))
        throw ConfigError("eval.level must lie in (0, 1)");
    if (threads && *threads == 0)
        throw ConfigError("threads must be >= 1");
}

Json to_json(const RunConfig& c)
{
    Json j;
    j["seed"] = c.seed;
    j["precision"] = precision_name(c.precision);
    j["threads"] = c.threads ? Json(*c.threads) : Json(nullptr);
    j["constants"] = to_json(c.constants);
    j["integrator"] = to_json(c.integrator);
    j["flyby"] = to_json(c.flyby);
    j["model"] = to_json(c.model);
    j["train"] = to_json(c.train, false);
    j["search"] = to_json(c.search);
    j["hpo"] = Json{{"n_trials", c.hpo.n_trials},
                    {"budget_steps", c.hpo.budget_steps},
                    {"max_eval_trajectories", c.hpo.max_eval_trajectories}};
    j["eval"] = Json{{"level", c.eval.level},
                     {"method", band_method_name(c.eval.method)},
                     {"max_trajectories", c.eval.max_trajectories}};
    return j;
}

RunConfig run_config_from_json(const Json& j)
{
    RunConfig c;
    Reader r(j, "config");
    r.u64("seed", c.seed);
    std::string precision = precision_name(c.precision);
    r.string("precision", precision);
    c.precision = parse_precision(precision);
    r.with("threads", [&](const Json& v) {
        if (v.is_null())
            c.threads.reset();
        else if (v.is_number_unsigned())
            c.threads = v.get<std::size_t>();
        else
            throw ConfigError("config.threads must be a positive integer or null");
    });
    r.with("constants", [&](const Json& v) { read_json(v, c.constants); });
    r.with("integrator", [&](const Json& v) { read_json(v, c.integrator); });
    r.with("flyby", [&](const Json& v) { read_json(v, c.flyby); });
    r.with("model", [&](const Json& v) { read_json(v, c.model); });
    r.with("train", [&](const Json& v) { read_json(v, c.train, "train", false); });
    r.with("search", [&](const Json& v) { read_json(v, c.search); });
    r.with("hpo", [&](const Json& v) {
        Reader h(v, "hpo");
        h.size("n_trials", c.hpo.n_trials);
        h.size("budget_steps", c.hpo.budget_steps);
        h.size("max_eval_trajectories", c.hpo.max_eval_trajectories);
        h.finish();
    });
    r.with("eval", [&](const Json& v) {
        Reader e(v, "eval");
        e.number("level", c.eval.level);
        std::string method = band_method_name(c.eval.method);
        e.string("method", method);
        c.eval.method = parse_band_method(method);
        e.size("max_trajectories", c.eval.max_trajectories);
        e.finish();
    });
    r.finish();
    c.validate();
    return c;
}

Json parse_json_file(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f)
        throw ConfigError("cannot open " + path.string());
    try {
        return Json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    return run_config_from_json(parse_json_file(path));
}

void write_json_file(const std::filesystem::path& path, const Json& j)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f)
        throw IoError("cannot open " + path.string() + " for writing");
    f << j.dump(2) << "\n";
    if (!f)
        throw IoError("write failed for " + path.string());
}

} // namespace cbvp
