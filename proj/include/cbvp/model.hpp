#pragma once

#include "cbvp/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace cbvp {

enum class PrefixMode { ZeroPad, LearnedProjection };
enum class PositionalMode { Sinusoidal, Learned, None };

const char* prefix_mode_name(PrefixMode m);
PrefixMode parse_prefix_mode(const std::string& s);
const char* positional_mode_name(PositionalMode m);
PositionalMode parse_positional_mode(const std::string& s);

struct ModelConfig {
    std::size_t context_length = 512;
    std::size_t patch_length = 32;
    std::size_t d_model = 128;
    std::size_t n_heads = 16;
    std::size_t n_layers = 8;
    std::size_t ffn_dim = 768;
    double dropout = 0.2;
    double head_dropout = 0.2;
    /// Steps produced per model call; 0 means patch_length.
    std::size_t forecast_length = 0;
    /// Generated horizon; 0 means "the dataset's forward length" and is
    /// resolved by the trainer.
    std::size_t total_horizon = 17984;
    std::size_t n_channels = 6;
    PrefixMode prefix_mode = PrefixMode::ZeroPad;
    bool prefix_every_iteration = true;
    PositionalMode positional = PositionalMode::Sinusoidal;
    /// 6 (r0 ∥ rf) or 12 (r0 ∥ rf ∥ v0 ∥ vf).
    std::size_t prefix_values = 6;

    void validate() const;
    std::size_t step_forecast() const { return forecast_length == 0 ? patch_length : forecast_length; }
    std::size_t n_patches() const { return context_length / patch_length; }
    std::size_t n_tokens() const { return n_patches() + 1; }
    std::size_t iterations() const { return total_horizon / step_forecast(); }
    std::size_t head_dim() const { return d_model / n_heads; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Number of trainable scalars implied by a configuration.
std::size_t parameter_count(const ModelConfig& cfg);

/// Names and shapes of every parameter tensor, in map order.
std::vector<std::pair<std::string, tensor::Shape>> parameter_shapes(const ModelConfig& cfg);

template <typename Real>
struct ModelParams {
    ModelConfig config;
    tensor::ParamMap<Real> tensors;

    const tensor::Tensor<Real>& at(const std::string& name) const;
    std::size_t count() const;
};

/// Affine weights U(±1/√fan_in), affine biases 0, layer-norm gains 1 and
/// biases 0, learned positional table U(±0.02). Each tensor draws from its
/// own stream keyed by (seed, name).
template <typename Real>
ModelParams<Real> init_params(const ModelConfig& cfg, std::uint64_t seed);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p);

/// Where dropout draws come from during training. Ignored in eval mode.
struct DropoutContext {
    bool train = false;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

/// Observes the attention weights [B, heads, T, T] of each layer.
template <typename Real>
using AttentionProbe = std::function<void(std::size_t layer, const tensor::Tensor<Real>& weights)>;

/// [L, C] → [L/P, P·C] or [B, L, C] → [B, L/P, P·C].
template <typename Real>
tensor::Tensor<Real> make_patches(const tensor::Tensor<Real>& context, std::size_t patch_length);

/// Sinusoidal table: row p, column 2i = sin(p / 10000^(2i/d)), column 2i+1 = cos(·).
std::vector<double> positional_encoding(std::size_t n_positions, std::size_t d_model);

/// Rows [first, first + count) of the positional table in use ([count, d]),
/// or an undefined tensor when positional encoding is off.
template <typename Real>
tensor::Tensor<Real> position_rows(const ModelParams<Real>& p, std::size_t first, std::size_t count);

/// Prefix token [B, 1, d] from normalized prefix values [B, prefix_values].
template <typename Real>
tensor::Tensor<Real> make_prefix(const tensor::Tensor<Real>& prefix, const ModelParams<Real>& p,
                                 bool add_position = true);

/// Pre-norm encoder stack over tokens [B, T, d].
template <typename Real>
tensor::Tensor<Real> encoder_forward(const tensor::Tensor<Real>& tokens, const ModelParams<Real>& p,
                                     const DropoutContext& dc, const AttentionProbe<Real>& probe = {});

/// Patch representations [B, n_patches, d] → forecast [B, F, C].
template <typename Real>
tensor::Tensor<Real> forecast_head(const tensor::Tensor<Real>& reps, const ModelParams<Real>& p,
                                   const DropoutContext& dc);

/// One model call: context [B, L, C] (normalized) and optional prefix
/// [B, prefix_values] → forecast [B, F, C]. With an undefined prefix the
/// token sequence is the patches alone.
template <typename Real>
tensor::Tensor<Real> forward(const tensor::Tensor<Real>& context, const tensor::Tensor<Real>& prefix,
                             const ModelParams<Real>& p, const DropoutContext& dc,
                             const AttentionProbe<Real>& probe = {});

/// Called after every generation iteration with the window that was fed to
/// the model [B, L, C] and the forecast it produced [B, F, C].
template <typename Real>
using GenerationObserver =
    std::function<void(std::size_t iteration, const tensor::Tensor<Real>& window, const tensor::Tensor<Real>& forecast)>;

/// Iterative rollout: forecast F steps, slide the window by F, repeat
/// total_horizon / F times. context [B, L, C], prefix [B, prefix_values],
/// both normalized; returns [B, total_horizon, C] in normalized units.
template <typename Real>
tensor::Tensor<Real> generate(const tensor::Tensor<Real>& context, const tensor::Tensor<Real>& prefix,
                              std::size_t total_horizon, const ModelParams<Real>& p,
                              const GenerationObserver<Real>& observer = {});

} // namespace cbvp
