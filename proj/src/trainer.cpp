#include "cbvp/trainer.hpp"

#include "cbvp/checkpoint.hpp"
#include "cbvp/config.hpp"
#include "cbvp/errors.hpp"
#include "cbvp/parallel.hpp"
#include "cbvp/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace cbvp {

using tensor::Shape;
using tensor::Tensor;

const char* precision_name(Precision p)
{
    return p == Precision::Float64 ? "float64" : "float32";
}

Precision parse_precision(const std::string& s)
{
    if (s == "float64")
        return Precision::Float64;
    if (s == "float32")
        return Precision::Float32;
    throw ConfigError("unknown precision '" + s + "' (expected float64 or float32)");
}

void TrainConfig::validate() const
{
    if (steps == 0)
        throw ConfigError("train.steps must be >= 1");
    if (batch_size == 0)
        throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("train.learning_rate must be positive");
    if (!(eval_fraction > 0.0 && eval_fraction <= 1.0))
        throw ConfigError("train.eval_fraction must lie in (0, 1]");
    if (!(grad_clip >= 0.0))
        throw ConfigError("train.grad_clip must be >= 0");
}

std::size_t TrainConfig::eval_every() const
{
    const double raw = std::ceil(eval_fraction * static_cast<double>(steps) - 1e-9);
    return std::max<std::size_t>(1, static_cast<std::size_t>(raw));
}

std::vector<double> prefix_vector(const BoundaryPrefix& p, std::size_t prefix_values)
{
    std::vector<double> v;
    v.insert(v.end(), p.r0.begin(), p.r0.end());
    v.insert(v.end(), p.rf.begin(), p.rf.end());
    if (prefix_values == 12) {
        v.insert(v.end(), p.v0.begin(), p.v0.end());
        v.insert(v.end(), p.vf.begin(), p.vf.end());
    } else if (prefix_values != 6) {
        throw ShapeError("prefix must hold 6 or 12 values");
    }
    return v;
}

std::vector<double> normalized_states(const Trajectory& traj, const Normalizer& norm)
{
    std::vector<double> out;
    out.reserve(traj.size() * 6);
    for (const auto& s : traj.states) {
        const State6 z = norm.apply(s);
        out.insert(out.end(), z.v.begin(), z.v.end());
    }
    return out;
}

std::size_t window_count(std::size_t series_length, const ModelConfig& cfg)
{
    const std::size_t f = cfg.step_forecast();
    if (series_length < cfg.context_length + f)
        return 0;
    return (series_length - cfg.context_length) / f;
}

std::vector<TrainSample> make_windows(const Trajectory& context, const Trajectory& forward,
                                      const BoundaryPrefix& prefix, const ModelConfig& cfg)
{
    const std::size_t len = context.size() + forward.size();
    const std::size_t n = window_count(len, cfg);
    if (n == 0)
        throw TooShortError("series of " + std::to_string(len) + " samples is shorter than context + F = " +
                            std::to_string(cfg.context_length + cfg.step_forecast()));
    std::vector<double> series;
    series.reserve(len * 6);
    for (const auto* t : {&context, &forward}) {
        for (const auto& s : t->states)
            series.insert(series.end(), s.v.begin(), s.v.end());
    }
    const auto pv = prefix_vector(prefix, cfg.prefix_values);
    const std::size_t f = cfg.step_forecast();
    std::vector<TrainSample> out;
    for (std::size_t w = 0; w < n; ++w) {
        const std::size_t off = w * f;
        TrainSample ts;
        ts.context.assign(series.begin() + static_cast<std::ptrdiff_t>(off * 6),
                          series.begin() + static_cast<std::ptrdiff_t>((off + cfg.context_length) * 6));
        ts.target.assign(series.begin() + static_cast<std::ptrdiff_t>((off + cfg.context_length) * 6),
                         series.begin() + static_cast<std::ptrdiff_t>((off + cfg.context_length + f) * 6));
        ts.prefix = pv;
        out.push_back(std::move(ts));
    }
    return out;
}

std::size_t usable_horizon(const Dataset& ds, const ModelConfig& cfg)
{
    std::size_t n = 0;
    for (const auto& split : ds.splits) {
        if (!split.empty()) {
            n = split.front().forward.size();
            break;
        }
    }
    const std::size_t f = cfg.step_forecast();
    return (n / f) * f;
}

// --- checkpoints ----------------------------------------------------------

namespace {

Json bundle_trailer(const ModelBundle& b)
{
    Json contexts = Json::array();
    for (const auto& c : b.contexts)
        contexts.push_back(to_json(c));
    Json j;
    j["model"] = to_json(b.model);
    j["train"] = to_json(b.train);
    j["precision"] = precision_name(b.precision);
    j["normalizer"] = to_json(b.normalizer);
    j["constants"] = to_json(b.constants);
    j["contexts"] = std::move(contexts);
    j["step"] = b.step;
    j["val_mse"] = std::isfinite(b.val_mse) ? Json(b.val_mse) : Json(nullptr);
    j["parameter_count"] = parameter_count(b.model);
    return j;
}

} // namespace

void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle)
{
    CheckpointFile f;
    f.tensors = to_records(bundle.params.tensors);
    if (bundle.precision == Precision::Float32) {
        for (auto& t : f.tensors)
            t.dtype = DType::Float32;
    }
    f.trailer = bundle_trailer(bundle).dump();
    write_checkpoint_file(path, f);
}

ModelBundle load_bundle(const std::filesystem::path& path)
{
    const CheckpointFile f = read_checkpoint_file(path);
    ModelBundle b;
    try {
        const Json j = Json::parse(f.trailer);
        read_json(j.at("model"), b.model);
        read_json(j.at("train"), b.train);
        b.precision = parse_precision(j.at("precision").get<std::string>());
        b.normalizer = normalizer_from_json(j.at("normalizer"));
        read_json(j.at("constants"), b.constants);
        for (const auto& c : j.at("contexts"))
            b.contexts.push_back(trajectory_from_json(c));
        b.step = j.at("step").get<std::uint64_t>();
        b.val_mse = j.at("val_mse").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("val_mse").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": malformed checkpoint trailer: " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": invalid configuration in checkpoint: " + e.what());
    }
    b.params.config = b.model;
    b.params.tensors = from_records<double>(f.tensors);
    const auto expected = parameter_shapes(b.model);
    if (expected.size() != b.params.tensors.size())
        throw FormatError(path.string() + ": tensor set does not match the model configuration");
    for (const auto& [name, shape] : expected) {
        auto it = b.params.tensors.find(name);
        if (it == b.params.tensors.end() || it->second.shape() != shape)
            throw FormatError(path.string() + ": tensor '" + name + "' missing or mis-shaped");
    }
    return b;
}

// --- training -------------------------------------------------------------

namespace {

// Normalized context ∥ forward series of every sample in a split, with the
// window index (sample, offset).
struct SeriesSet {
    std::vector<std::vector<double>> series;
    std::vector<std::vector<double>> prefixes;
    std::vector<std::pair<std::size_t, std::size_t>> windows;
};

SeriesSet build_series(const Dataset& ds, Split split, const ModelConfig& cfg, std::size_t horizon)
{
    SeriesSet set;
    const std::size_t f = cfg.step_forecast();
    for (const auto& sample : ds.split(split)) {
        const Trajectory& ctx = ds.context_of(sample);
        if (ctx.size() < cfg.context_length)
            throw ShapeError("reference context has " + std::to_string(ctx.size()) + " samples, model needs " +
                             std::to_string(cfg.context_length));
        std::vector<double> s = normalized_states(ctx, ds.normalizer);
        Trajectory fwd = sample.forward;
        fwd.states.resize(std::min(fwd.size(), horizon));
        const auto tail = normalized_states(fwd, ds.normalizer);
        s.insert(s.end(), tail.begin(), tail.end());
        const std::size_t len = s.size() / 6;
        const std::size_t n = window_count(len, cfg);
        if (n == 0)
            throw TooShortError("trajectory too short for one training window");
        for (std::size_t w = 0; w < n; ++w)
            set.windows.emplace_back(set.series.size(), w * f);
        set.series.push_back(std::move(s));
        set.prefixes.push_back(prefix_vector(ds.normalizer.apply(sample.prefix), cfg.prefix_values));
    }
    return set;
}

template <typename Real>
struct Batch {
    Tensor<Real> context;
    Tensor<Real> target;
    Tensor<Real> prefix;
};

template <typename Real>
Batch<Real> assemble(const SeriesSet& set, std::span<const std::size_t> ids, const ModelConfig& cfg)
{
    const std::size_t b = ids.size();
    const std::size_t l = cfg.context_length;
    const std::size_t f = cfg.step_forecast();
    const std::size_t c = cfg.n_channels;
    std::vector<Real> ctx(b * l * c);
    std::vector<Real> tgt(b * f * c);
    std::vector<Real> pre(b * cfg.prefix_values);
    for (std::size_t k = 0; k < b; ++k) {
        const auto [si, off] = set.windows[ids[k]];
        const auto& s = set.series[si];
        for (std::size_t i = 0; i < l * c; ++i)
            ctx[k * l * c + i] = static_cast<Real>(s[off * c + i]);
        for (std::size_t i = 0; i < f * c; ++i)
            tgt[k * f * c + i] = static_cast<Real>(s[(off + l) * c + i]);
        for (std::size_t i = 0; i < cfg.prefix_values; ++i)
            pre[k * cfg.prefix_values + i] = static_cast<Real>(set.prefixes[si][i]);
    }
    return {Tensor<Real>(Shape{b, l, c}, std::move(ctx)), Tensor<Real>(Shape{b, f, c}, std::move(tgt)),
            Tensor<Real>(Shape{b, cfg.prefix_values}, std::move(pre))};
}

std::vector<std::size_t> capped_ids(std::size_t n, std::size_t cap)
{
    std::vector<std::size_t> ids;
    if (cap == 0 || cap >= n) {
        ids.resize(n);
        std::iota(ids.begin(), ids.end(), 0);
        return ids;
    }
    for (std::size_t k = 0; k < cap; ++k)
        ids.push_back(k * n / cap);
    return ids;
}

template <typename Real>
double windows_mse(const ModelParams<Real>& p, const SeriesSet& set, std::size_t cap)
{
    const auto ids = capped_ids(set.windows.size(), cap);
    if (ids.empty())
        throw EmptySplitError("no windows to evaluate");
    tensor::NoGradGuard no_grad;
    constexpr std::size_t kChunk = 64;
    double sse = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < ids.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, ids.size() - start);
        const auto batch = assemble<Real>(set, std::span(ids).subspan(start, n), p.config);
        const auto pred = forward(batch.context, batch.prefix, p, DropoutContext{});
        const auto pv = pred.data();
        const auto tv = batch.target.data();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double d = static_cast<double>(pv[i]) - static_cast<double>(tv[i]);
            sse += d * d;
        }
        count += pv.size();
    }
    return sse / static_cast<double>(count);
}

template <typename Real>
ModelBundle make_bundle(const ModelParams<Real>& p, const Dataset& ds, const TrainConfig& tc, std::uint64_t step,
                        double val_mse)
{
    ModelBundle b;
    b.model = p.config;
    b.train = tc;
    b.precision = std::is_same_v<Real, float> ? Precision::Float32 : Precision::Float64;
    b.params = cast_params<double>(p);
    b.normalizer = ds.normalizer;
    b.contexts = ds.contexts;
    b.constants = ds.constants;
    b.step = step;
    b.val_mse = val_mse;
    return b;
}

std::string fmt17(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_metrics(const std::filesystem::path& path, const std::vector<MetricRow>& rows)
{
    std::ofstream f(path, std::ios::trunc);
    if (!f)
        throw IoError("cannot open " + path.string() + " for writing");
    f << "step,train_mse,val_mse,wall_ms\n";
    for (const auto& r : rows)
        f << r.step << ',' << fmt17(r.train_mse) << ',' << fmt17(r.val_mse) << ',' << fmt17(r.wall_ms) << '\n';
}

template <typename Real>
void clip_gradients(tensor::ParamMap<Real>& params, double max_norm)
{
    double sq = 0.0;
    for (const auto& [name, t] : params) {
        for (Real g : t.grad())
            sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm)
        return;
    const Real s = static_cast<Real>(max_norm / norm);
    for (auto& [name, t] : params) {
        if (t.grad().empty())
            continue;
        for (Real& g : t.mutable_grad())
            g *= s;
    }
}

template <typename Real>
TrainResult train_impl(const Dataset& ds, const ModelConfig& cfg, const TrainConfig& tc, const TrainOptions& opts)
{
    const auto started = std::chrono::steady_clock::now();
    const std::size_t horizon = cfg.total_horizon;
    const SeriesSet train_set = build_series(ds, Split::Train, cfg, horizon);
    const SeriesSet val_set = build_series(ds, Split::Validation, cfg, horizon);
    if (train_set.windows.empty() || val_set.windows.empty())
        throw EmptySplitError("training needs non-empty train and validation splits");

    ModelParams<Real> params = init_params<Real>(cfg, tc.seed);
    tensor::AdamState<Real> adam;
    adam.lr = tc.learning_rate;

    TrainResult result;
    result.initial_train_mse = windows_mse(params, train_set, 0);
    result.best_model = make_bundle(params, ds, tc, 0, std::numeric_limits<double>::quiet_NaN());
    double best_val = std::numeric_limits<double>::infinity();

    if (opts.out_dir) {
        std::filesystem::create_directories(*opts.out_dir);
        save_bundle(*opts.out_dir / "best.ckpt", result.best_model);
    }

    Rng order_rng(derive_seed(tc.seed, 0x5eed'0001));
    std::vector<std::size_t> order(train_set.windows.size());
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);
    std::size_t cursor = 0;
    const std::size_t batch = std::min(tc.batch_size, order.size());
    const std::size_t eval_every = tc.steps == 0 ? 1 : tc.eval_every();
    const std::uint64_t dropout_seed = derive_seed(tc.seed, 0x5eed'0002);

    double loss_since = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t step = 1; step <= tc.steps; ++step) {
        if (cursor + batch > order.size()) {
            order_rng.shuffle(order);
            cursor = 0;
        }
        const auto b = assemble<Real>(train_set, std::span(order).subspan(cursor, batch), cfg);
        cursor += batch;

        for (auto& [name, t] : params.tensors)
            t.zero_grad();
        const DropoutContext dc{true, dropout_seed, step};
        const auto loss = tensor::mse_loss(forward(b.context, b.prefix, params, dc), b.target);
        loss.backward();
        if (tc.grad_clip > 0.0)
            clip_gradients(params.tensors, tc.grad_clip);
        tensor::adam_step(params.tensors, adam);
        for (const auto& [name, t] : params.tensors) {
            for (Real v : t.data()) {
                if (!std::isfinite(v))
                    throw NonFiniteError("parameter '" + name + "' became non-finite at step " + std::to_string(step));
            }
        }

        const double lv = static_cast<double>(loss.item());
        result.step_losses.push_back(lv);
        loss_since += lv;
        ++loss_count;
        if (opts.on_step)
            opts.on_step(step, lv);

        if (step % eval_every == 0) {
            const double val = windows_mse(params, val_set, tc.val_max_windows);
            const double wall =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
            result.metrics.push_back({step, loss_since / static_cast<double>(loss_count), val, wall});
            loss_since = 0.0;
            loss_count = 0;
            if (val < best_val) {
                best_val = val;
                result.best_model = make_bundle(params, ds, tc, step, val);
                if (opts.out_dir)
                    save_bundle(*opts.out_dir / "best.ckpt", result.best_model);
            }
            if (opts.out_dir)
                write_metrics(*opts.out_dir / "metrics.csv", result.metrics);
        }
    }

    result.final_train_mse = windows_mse(params, train_set, 0);
    const double final_val = result.metrics.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                    : result.metrics.back().val_mse;
    result.final_model = make_bundle(params, ds, tc, tc.steps, final_val);
    if (opts.out_dir) {
        save_bundle(*opts.out_dir / "final.ckpt", result.final_model);
        write_metrics(*opts.out_dir / "metrics.csv", result.metrics);
    }
    return result;
}

template <typename Real>
std::vector<double> generate_batch(const ModelParams<Real>& p, const std::vector<std::vector<double>>& contexts,
                                   const std::vector<std::vector<double>>& prefixes, std::size_t horizon)
{
    const ModelConfig& cfg = p.config;
    const std::size_t b = contexts.size();
    const std::size_t l = cfg.context_length;
    const std::size_t c = cfg.n_channels;
    std::vector<Real> ctx(b * l * c);
    std::vector<Real> pre(b * cfg.prefix_values);
    for (std::size_t k = 0; k < b; ++k) {
        if (contexts[k].size() != l * c || prefixes[k].size() != cfg.prefix_values)
            throw ShapeError("generation input does not match the model configuration");
        std::copy(contexts[k].begin(), contexts[k].end(), ctx.begin() + static_cast<std::ptrdiff_t>(k * l * c));
        std::copy(prefixes[k].begin(), prefixes[k].end(),
                  pre.begin() + static_cast<std::ptrdiff_t>(k * cfg.prefix_values));
    }
    const auto out = generate(Tensor<Real>(Shape{b, l, c}, std::move(ctx)),
                              Tensor<Real>(Shape{b, cfg.prefix_values}, std::move(pre)), horizon, p);
    return std::vector<double>(out.data().begin(), out.data().end());
}

// Last context_length samples of the reference context, normalized.
std::vector<double> context_window(const Trajectory& ctx, const Normalizer& norm, std::size_t length)
{
    if (ctx.size() < length)
        throw ShapeError("reference context shorter than the model context length");
    Trajectory tail = ctx;
    tail.states.erase(tail.states.begin(), tail.states.end() - static_cast<std::ptrdiff_t>(length));
    return normalized_states(tail, norm);
}

} // namespace

TrainResult train(const Dataset& ds, ModelConfig model, const TrainConfig& tc, const TrainOptions& opts)
{
    if (tc.steps > 0)
        tc.validate();
    if (model.total_horizon == 0)
        model.total_horizon = usable_horizon(ds, model);
    model.validate();
    if (model.total_horizon == 0)
        throw TooShortError("forward arcs are shorter than one forecast step");
    if (model.total_horizon > usable_horizon(ds, model))
        throw ShapeError("model.total_horizon " + std::to_string(model.total_horizon) +
                         " exceeds the dataset's usable horizon " + std::to_string(usable_horizon(ds, model)));
    if (tc.precision == Precision::Float32)
        return train_impl<float>(ds, model, tc, opts);
    return train_impl<double>(ds, model, tc, opts);
}

double split_mse(const ModelBundle& bundle, const Dataset& ds, Split split, std::size_t max_windows)
{
    const SeriesSet set = build_series(ds, split, bundle.model, bundle.model.total_horizon);
    if (bundle.precision == Precision::Float32)
        return windows_mse(cast_params<float>(bundle.params), set, max_windows);
    return windows_mse(bundle.params, set, max_windows);
}

std::vector<double> run_generation(const ModelBundle& bundle, const std::vector<double>& context,
                                   const std::vector<double>& prefix, std::size_t horizon)
{
    if (bundle.precision == Precision::Float32)
        return generate_batch(cast_params<float>(bundle.params), {context}, {prefix}, horizon);
    return generate_batch(bundle.params, {context}, {prefix}, horizon);
}

EvalResult evaluate(const ModelBundle& bundle, const Dataset& ds, Split split, std::size_t threads,
                    const Predictor& predictor, std::size_t max_trajectories)
{
    const ModelConfig& cfg = bundle.model;
    const std::size_t horizon = cfg.total_horizon;
    if (horizon == 0 || horizon > usable_horizon(ds, cfg))
        throw ShapeError("checkpoint horizon " + std::to_string(horizon) + " does not fit the dataset (usable " +
                         std::to_string(usable_horizon(ds, cfg)) + ")");
    const auto& samples = ds.split(split);
    std::size_t n = samples.size();
    if (max_trajectories > 0)
        n = std::min(n, max_trajectories);
    if (n == 0)
        throw EmptySplitError(std::string("split '") + split_name(split) + "' is empty");

    EvalResult result;
    result.trajectories.resize(n);

    // Non-dimensional [horizon][6] per trajectory.
    std::vector<std::vector<double>> forecasts(n);
    if (predictor) {
        for (std::size_t i = 0; i < n; ++i)
            forecasts[i] = predictor(samples[i], i);
    } else {
        ModelParams<float> p32;
        if (bundle.precision == Precision::Float32)
            p32 = cast_params<float>(bundle.params);
        constexpr std::size_t kChunk = 8;
        const std::size_t chunks = (n + kChunk - 1) / kChunk;
        parallel_for(chunks, threads, [&](std::size_t ci) {
            const std::size_t start = ci * kChunk;
            const std::size_t count = std::min(kChunk, n - start);
            std::vector<std::vector<double>> ctxs;
            std::vector<std::vector<double>> pres;
            for (std::size_t i = start; i < start + count; ++i) {
                ctxs.push_back(context_window(ds.context_of(samples[i]), ds.normalizer, cfg.context_length));
                pres.push_back(prefix_vector(ds.normalizer.apply(samples[i].prefix), cfg.prefix_values));
            }
            const auto out = bundle.precision == Precision::Float32 ? generate_batch(p32, ctxs, pres, horizon)
                                                                    : generate_batch(bundle.params, ctxs, pres, horizon);
            const std::size_t per = horizon * cfg.n_channels;
            for (std::size_t k = 0; k < count; ++k) {
                auto& dst = forecasts[start + k];
                dst.resize(per);
                for (std::size_t q = 0; q < horizon; ++q) {
                    State6 z;
                    std::copy_n(out.begin() + static_cast<std::ptrdiff_t>(k * per + q * 6), 6, z.v.begin());
                    const State6 x = ds.normalizer.invert(z);
                    std::copy(x.v.begin(), x.v.end(), dst.begin() + static_cast<std::ptrdiff_t>(q * 6));
                }
            }
        });
    }

    const std::size_t f = cfg.step_forecast();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& fc = forecasts[i];
        if (fc.size() != horizon * 6)
            throw ShapeError("forecast length does not match the horizon");
        TrajectoryEval& te = result.trajectories[i];
        te.truth = samples[i].forward;
        te.truth.states.resize(horizon);
        te.predicted = te.truth;
        for (std::size_t k = 0; k < horizon; ++k)
            std::copy_n(fc.begin() + static_cast<std::ptrdiff_t>(k * 6), 6, te.predicted.states[k].v.begin());
        te.errors = error_series(te.predicted, te.truth, ds.constants);
        double sum = 0.0;
        double tail = 0.0;
        for (std::size_t k = 0; k < horizon; ++k) {
            const double e = te.errors.position_norm(k);
            sum += e;
            if (k + f >= horizon)
                tail += e;
        }
        te.terminal_position_km = te.errors.position_norm(horizon - 1);
        te.mean_position_km = sum / static_cast<double>(horizon);
        te.terminal_window_position_km = tail / static_cast<double>(std::min(f, horizon));
        if (!std::isfinite(te.mean_position_km))
            throw NonFiniteError("non-finite position error for trajectory " + std::to_string(i));
        result.mean_terminal_position_km += te.terminal_position_km;
        result.mean_position_km += te.mean_position_km;
        result.mean_terminal_window_position_km += te.terminal_window_position_km;
    }
    result.mean_terminal_position_km /= static_cast<double>(n);
    result.mean_position_km /= static_cast<double>(n);
    result.mean_terminal_window_position_km /= static_cast<double>(n);
    return result;
}

} // namespace cbvp
