#include "cbvp/model.hpp"

#include "cbvp/errors.hpp"
#include "cbvp/rng.hpp"

#include <cmath>

namespace cbvp {

using tensor::Shape;
using tensor::Tensor;

namespace {

std::string layer_name(std::size_t i, const char* leaf)
{
    return "layer" + std::to_string(i) + "." + leaf;
}

std::uint64_t name_hash(const std::string& s)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Dropout site ids: one per (layer, location) plus one for the head.
constexpr std::uint64_t kAttentionSite = 0;
constexpr std::uint64_t kFfnSite = 1;
constexpr std::uint64_t kHeadSite = 1u << 20;

tensor::DropoutKey key_for(const DropoutContext& dc, std::uint64_t site)
{
    return {dc.seed, site, dc.step};
}

template <typename Real>
Tensor<Real> affine(const Tensor<Real>& x, const ModelParams<Real>& p, const std::string& w, const std::string& b)
{
    return tensor::add(tensor::matmul(x, p.at(w)), p.at(b));
}

} // namespace

const char* prefix_mode_name(PrefixMode m)
{
    return m == PrefixMode::ZeroPad ? "zero_pad" : "learned_projection";
}

PrefixMode parse_prefix_mode(const std::string& s)
{
    if (s == "zero_pad")
        return PrefixMode::ZeroPad;
    if (s == "learned_projection")
        return PrefixMode::LearnedProjection;
    throw ConfigError("unknown prefix_mode '" + s + "' (expected zero_pad or learned_projection)");
}

const char* positional_mode_name(PositionalMode m)
{
    switch (m) {
    case PositionalMode::Sinusoidal:
        return "sinusoidal";
    case PositionalMode::Learned:
        return "learned";
    case PositionalMode::None:
        return "none";
    }
    return "?";
}

PositionalMode parse_positional_mode(const std::string& s)
{
    if (s == "sinusoidal")
        return PositionalMode::Sinusoidal;
    if (s == "learned")
        return PositionalMode::Learned;
    if (s == "none")
        return PositionalMode::None;
    throw ConfigError("unknown positional mode '" + s + "' (expected sinusoidal, learned or none)");
}

void ModelConfig::validate() const
{
    if (patch_length == 0 || context_length == 0)
        throw ConfigError("model.context_length and model.patch_length must be >= 1");
    if (context_length % patch_length != 0)
        throw ConfigError("model.context_length must be divisible by model.patch_length");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
    if (n_layers == 0 || ffn_dim == 0)
        throw ConfigError("model.n_layers and model.ffn_dim must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0) || !(head_dropout >= 0.0 && head_dropout < 1.0))
        throw ConfigError("model dropout rates must lie in [0, 1)");
    if (total_horizon != 0 && total_horizon % step_forecast() != 0)
        throw ConfigError("model.total_horizon must be divisible by the step forecast length");
    if (n_channels == 0)
        throw ConfigError("model.n_channels must be >= 1");
    if (prefix_values != 6 && prefix_values != 12)
        throw ConfigError("model.prefix_values must be 6 or 12");
    if (prefix_mode == PrefixMode::ZeroPad && prefix_values > d_model)
        throw ConfigError("zero_pad prefix needs d_model >= prefix_values");
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg)
{
    const std::size_t d = cfg.d_model;
    std::vector<std::pair<std::string, Shape>> shapes;
    shapes.push_back({"embed.weight", {cfg.patch_length * cfg.n_channels, d}});
    shapes.push_back({"embed.bias", {d}});
    if (cfg.prefix_mode == PrefixMode::LearnedProjection) {
        shapes.push_back({"prefix.weight", {cfg.prefix_values, d}});
        shapes.push_back({"prefix.bias", {d}});
    }
    if (cfg.positional == PositionalMode::Learned)
        shapes.push_back({"pos.table", {cfg.n_tokens(), d}});
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        shapes.push_back({layer_name(i, "ln1.gain"), {d}});
        shapes.push_back({layer_name(i, "ln1.bias"), {d}});
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            shapes.push_back({layer_name(i, w), {d, d}});
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            shapes.push_back({layer_name(i, b), {d}});
        shapes.push_back({layer_name(i, "ln2.gain"), {d}});
        shapes.push_back({layer_name(i, "ln2.bias"), {d}});
        shapes.push_back({layer_name(i, "ffn.w1"), {d, cfg.ffn_dim}});
        shapes.push_back({layer_name(i, "ffn.b1"), {cfg.ffn_dim}});
        shapes.push_back({layer_name(i, "ffn.w2"), {cfg.ffn_dim, d}});
        shapes.push_back({layer_name(i, "ffn.b2"), {d}});
    }
    shapes.push_back({"head.weight", {cfg.n_patches() * d, cfg.step_forecast() * cfg.n_channels}});
    shapes.push_back({"head.bias", {cfg.step_forecast() * cfg.n_channels}});
    return shapes;
}

std::size_t parameter_count(const ModelConfig& cfg)
{
    std::size_t n = 0;
    for (const auto& [name, shape] : parameter_shapes(cfg))
        n += tensor::numel(shape);
    return n;
}

template <typename Real>
const Tensor<Real>& ModelParams<Real>::at(const std::string& name) const
{
    auto it = tensors.find(name);
    if (it == tensors.end())
        throw ShapeError("missing model parameter '" + name + "'");
    return it->second;
}

template <typename Real>
std::size_t ModelParams<Real>::count() const
{
    std::size_t n = 0;
    for (const auto& [name, t] : tensors)
        n += t.size();
    return n;
}

template <typename Real>
ModelParams<Real> init_params(const ModelConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    ModelParams<Real> p;
    p.config = cfg;
    for (const auto& [name, shape] : parameter_shapes(cfg)) {
        Rng rng(derive_seed(seed, name_hash(name)));
        std::vector<Real> values(tensor::numel(shape), Real(0));
        const bool gain = name.ends_with(".gain");
        const bool matrix = shape.size() == 2;
        if (gain) {
            std::fill(values.begin(), values.end(), Real(1));
        } else if (name == "pos.table") {
            for (auto& v : values)
                v = static_cast<Real>(rng.uniform(-0.02, 0.02));
        } else if (matrix) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
            for (auto& v : values)
                v = static_cast<Real>(rng.uniform(-bound, bound));
        }
        p.tensors.emplace(name, Tensor<Real>(shape, std::move(values), true));
    }
    return p;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p)
{
    ModelParams<To> out;
    out.config = p.config;
    for (const auto& [name, t] : p.tensors) {
        std::vector<To> values(t.data().begin(), t.data().end());
        out.tensors.emplace(name, Tensor<To>(t.shape(), std::move(values), true));
    }
    return out;
}

template <typename Real>
Tensor<Real> make_patches(const Tensor<Real>& context, std::size_t patch_length)
{
    if (context.rank() != 2 && context.rank() != 3)
        throw ShapeError("make_patches expects [L, C] or [B, L, C], got " + tensor::to_string(context.shape()));
    const std::size_t r = context.rank();
    const std::size_t len = context.dim(r - 2);
    const std::size_t ch = context.dim(r - 1);
    if (patch_length == 0 || len % patch_length != 0)
        throw ShapeError("context length " + std::to_string(len) + " is not divisible by patch length " +
                         std::to_string(patch_length));
    Shape out{len / patch_length, patch_length * ch};
    if (r == 3)
        out.insert(out.begin(), context.dim(0));
    return tensor::reshape(context, out);
}

std::vector<double> positional_encoding(std::size_t n_positions, std::size_t d_model)
{
    if (n_positions == 0 || d_model == 0)
        throw ShapeError("positional_encoding needs at least one position and one column");
    std::vector<double> table(n_positions * d_model);
    for (std::size_t pos = 0; pos < n_positions; ++pos) {
        for (std::size_t j = 0; j < d_model; ++j) {
            const std::size_t pair = j / 2;
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(d_model));
            const double angle = static_cast<double>(pos) * freq;
            table[pos * d_model + j] = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    }
    return table;
}

template <typename Real>
Tensor<Real> position_rows(const ModelParams<Real>& p, std::size_t first, std::size_t count)
{
    const ModelConfig& cfg = p.config;
    const std::size_t d = cfg.d_model;
    switch (cfg.positional) {
    case PositionalMode::None:
        return {};
    case PositionalMode::Learned:
        return tensor::slice(p.at("pos.table"), 0, first, count);
    case PositionalMode::Sinusoidal:
        break;
    }
    const auto table = positional_encoding(first + count, d);
    return Tensor<Real>(Shape{count, d}, std::vector<Real>(table.begin() + static_cast<std::ptrdiff_t>(first * d), table.end()));
}

template <typename Real>
Tensor<Real> make_prefix(const Tensor<Real>& prefix, const ModelParams<Real>& p, bool add_position)
{
    const ModelConfig& cfg = p.config;
    if (prefix.rank() != 2 || prefix.dim(1) != cfg.prefix_values)
        throw ShapeError("prefix must have shape [B, " + std::to_string(cfg.prefix_values) + "], got " +
                         tensor::to_string(prefix.shape()));
    const std::size_t batch = prefix.dim(0);
    Tensor<Real> token;
    if (cfg.prefix_mode == PrefixMode::ZeroPad) {
        if (cfg.d_model == cfg.prefix_values)
            token = prefix;
        else
            token = tensor::concat<Real>({prefix, Tensor<Real>(Shape{batch, cfg.d_model - cfg.prefix_values})}, 1);
    } else {
        token = affine(prefix, p, "prefix.weight", "prefix.bias");
    }
    token = tensor::reshape(token, {batch, 1, cfg.d_model});
    if (add_position) {
        if (auto pe = position_rows(p, 0, 1); pe.defined())
            token = tensor::add(token, pe);
    }
    return token;
}

template <typename Real>
Tensor<Real> encoder_forward(const Tensor<Real>& tokens, const ModelParams<Real>& p, const DropoutContext& dc,
                             const AttentionProbe<Real>& probe)
{
    const ModelConfig& cfg = p.config;
    if (tokens.rank() != 3 || tokens.dim(2) != cfg.d_model)
        throw ShapeError("encoder expects tokens [B, T, " + std::to_string(cfg.d_model) + "], got " +
                         tensor::to_string(tokens.shape()));
    const std::size_t batch = tokens.dim(0);
    const std::size_t n = tokens.dim(1);
    const std::size_t h = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));

    Tensor<Real> x = tokens;
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const auto ln1 = tensor::layer_norm(x, p.at(layer_name(i, "ln1.gain")), p.at(layer_name(i, "ln1.bias")));
        auto heads = [&](const char* w, const char* b, std::vector<std::size_t> perm) {
            auto proj = affine(ln1, p, layer_name(i, w), layer_name(i, b));
            return tensor::transpose(tensor::reshape(proj, {batch, n, h, dh}), perm);
        };
        const auto q = heads("attn.wq", "attn.bq", {0, 2, 1, 3}); // [B, H, T, dh]
        const auto kt = heads("attn.wk", "attn.bk", {0, 2, 3, 1}); // [B, H, dh, T]
        const auto v = heads("attn.wv", "attn.bv", {0, 2, 1, 3});
        auto weights = tensor::softmax(tensor::scale(tensor::matmul(q, kt), inv_sqrt_dh), 3);
        if (probe)
            probe(i, weights);
        weights = tensor::dropout(weights, cfg.dropout, key_for(dc, 2 * i + kAttentionSite), dc.train);
        auto mixed = tensor::transpose(tensor::matmul(weights, v), {0, 2, 1, 3});
        mixed = tensor::reshape(mixed, {batch, n, cfg.d_model});
        x = tensor::add(x, affine(mixed, p, layer_name(i, "attn.wo"), layer_name(i, "attn.bo")));

        const auto ln2 = tensor::layer_norm(x, p.at(layer_name(i, "ln2.gain")), p.at(layer_name(i, "ln2.bias")));
        auto ff = tensor::gelu(affine(ln2, p, layer_name(i, "ffn.w1"), layer_name(i, "ffn.b1")));
        ff = affine(ff, p, layer_name(i, "ffn.w2"), layer_name(i, "ffn.b2"));
        ff = tensor::dropout(ff, cfg.dropout, key_for(dc, 2 * i + kFfnSite), dc.train);
        x = tensor::add(x, ff);
    }
    return x;
}

template <typename Real>
Tensor<Real> forecast_head(const Tensor<Real>& reps, const ModelParams<Real>& p, const DropoutContext& dc)
{
    const ModelConfig& cfg = p.config;
    if (reps.rank() != 3 || reps.dim(1) != cfg.n_patches() || reps.dim(2) != cfg.d_model)
        throw ShapeError("forecast head expects [B, " + std::to_string(cfg.n_patches()) + ", " +
                         std::to_string(cfg.d_model) + "], got " + tensor::to_string(reps.shape()));
    const std::size_t batch = reps.dim(0);
    auto flat = tensor::reshape(reps, {batch, cfg.n_patches() * cfg.d_model});
    flat = tensor::dropout(flat, cfg.head_dropout, key_for(dc, kHeadSite), dc.train);
    auto out = affine(flat, p, "head.weight", "head.bias");
    return tensor::reshape(out, {batch, cfg.step_forecast(), cfg.n_channels});
}

template <typename Real>
Tensor<Real> forward(const Tensor<Real>& context, const Tensor<Real>& prefix, const ModelParams<Real>& p,
                     const DropoutContext& dc, const AttentionProbe<Real>& probe)
{
    const ModelConfig& cfg = p.config;
    if (context.rank() != 3 || context.dim(1) != cfg.context_length || context.dim(2) != cfg.n_channels)
        throw ShapeError("context must have shape [B, " + std::to_string(cfg.context_length) + ", " +
                         std::to_string(cfg.n_channels) + "], got " + tensor::to_string(context.shape()));
    const std::size_t np = cfg.n_patches();
    auto patches = affine(make_patches(context, cfg.patch_length), p, "embed.weight", "embed.bias");
    if (auto pe = position_rows(p, 1, np); pe.defined())
        patches = tensor::add(patches, pe);

    if (!prefix.defined()) {
        return forecast_head(encoder_forward(patches, p, dc, probe), p, dc);
    }
    if (prefix.dim(0) != context.dim(0))
        throw ShapeError("prefix and context batch sizes differ");
    const auto tokens = tensor::concat<Real>({make_prefix(prefix, p), patches}, 1);
    const auto reps = encoder_forward(tokens, p, dc, probe);
    return forecast_head(tensor::slice(reps, 1, 1, np), p, dc);
}

template <typename Real>
Tensor<Real> generate(const Tensor<Real>& context, const Tensor<Real>& prefix, std::size_t total_horizon,
                      const ModelParams<Real>& p, const GenerationObserver<Real>& observer)
{
    const ModelConfig& cfg = p.config;
    const std::size_t f = cfg.step_forecast();
    if (total_horizon == 0 || total_horizon % f != 0)
        throw ShapeError("total horizon " + std::to_string(total_horizon) + " is not a positive multiple of F = " +
                         std::to_string(f));
    tensor::NoGradGuard no_grad;
    const DropoutContext eval{};
    Tensor<Real> window = context.detach();
    std::vector<Tensor<Real>> pieces;
    const std::size_t iterations = total_horizon / f;
    for (std::size_t k = 0; k < iterations; ++k) {
        const bool with_prefix = prefix.defined() && (k == 0 || cfg.prefix_every_iteration);
        const auto step = forward(window, with_prefix ? prefix : Tensor<Real>{}, p, eval);
        for (Real v : step.data()) {
            if (!std::isfinite(v))
                throw NonFiniteError("generation diverged at iteration " + std::to_string(k));
        }
        if (observer)
            observer(k, window, step);
        pieces.push_back(step);
        if (k + 1 < iterations) {
            if (f >= cfg.context_length)
                window = tensor::slice(step, 1, f - cfg.context_length, cfg.context_length);
            else
                window = tensor::concat<Real>({tensor::slice(window, 1, f, cfg.context_length - f), step}, 1);
        }
    }
    return pieces.size() == 1 ? pieces.front() : tensor::concat(pieces, 1);
}

#define CBVP_INSTANTIATE(Real)                                                                                 \
    template struct ModelParams<Real>;                                                                         \
    template ModelParams<Real> init_params<Real>(const ModelConfig&, std::uint64_t);                           \
    template Tensor<Real> make_patches(const Tensor<Real>&, std::size_t);                                      \
    template Tensor<Real> position_rows(const ModelParams<Real>&, std::size_t, std::size_t);                   \
    template Tensor<Real> make_prefix(const Tensor<Real>&, const ModelParams<Real>&, bool);                    \
    template Tensor<Real> encoder_forward(const Tensor<Real>&, const ModelParams<Real>&, const DropoutContext&, \
                                          const AttentionProbe<Real>&);                                        \
    template Tensor<Real> forecast_head(const Tensor<Real>&, const ModelParams<Real>&, const DropoutContext&); \
    template Tensor<Real> forward(const Tensor<Real>&, const Tensor<Real>&, const ModelParams<Real>&,          \
                                  const DropoutContext&, const AttentionProbe<Real>&);                         \
    template Tensor<Real> generate(const Tensor<Real>&, const Tensor<Real>&, std::size_t,                      \
                                   const ModelParams<Real>&, const GenerationObserver<Real>&);

CBVP_INSTANTIATE(float)
CBVP_INSTANTIATE(double)

#undef CBVP_INSTANTIATE

template ModelParams<float> cast_params<float, double>(const ModelParams<double>&);
template ModelParams<double> cast_params<double, float>(const ModelParams<float>&);
template ModelParams<double> cast_params<double, double>(const ModelParams<double>&);
template ModelParams<float> cast_params<float, float>(const ModelParams<float>&);

} // namespace cbvp
