#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

// Dense row-major tensors with reverse-mode gradients for a fixed set of
// primitives. Each primitive records how to push its output gradient back to
// its inputs; backward() replays those records in reverse topological order.
namespace cbvp::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename Real>
struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates this node's grad into its parents' grads.
    std::function<void(Node&)> backward;

    void ensure_grad()
    {
        if (grad.size() != value.size())
            grad.assign(value.size(), Real(0));
    }
};

} // namespace detail

template <typename Real>
class Tensor {
public:
    using value_type = Real;

    Tensor() = default;
    explicit Tensor(Shape shape, Real fill = Real(0), bool requires_grad = false);
    Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

    static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const Real> data() const { return node_->value; }
    /// Direct write access; only meaningful for leaves (parameters, inputs).
    std::span<Real> mutable_data() { return node_->value; }
    Real item() const;
    Real at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    /// Empty until a backward pass reaches this tensor.
    std::span<const Real> grad() const { return node_->grad; }
    std::span<Real> mutable_grad()
    {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad();

    /// Reverse pass from a single-element tensor, seeding d(self)/d(self) = 1.
    void backward() const;

    /// Value copy without graph history.
    Tensor detach() const;

    const std::shared_ptr<detail::Node<Real>>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node<Real>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node<Real>> node_;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// In checked mode (the default) every primitive verifies its output is
/// finite and throws NonFiniteError otherwise.
void set_checked(bool on);
bool checked();

/// Counter-based dropout stream: the mask of element i is a pure function of
/// (seed, site, step, i).
struct DropoutKey {
    std::uint64_t seed = 0;
    std::uint64_t site = 0;
    std::uint64_t step = 0;
};

// --- primitives -----------------------------------------------------------

/// a [..., m, k] × b [k, n] (shared) or b [..., k, n] (same leading dims).
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

/// Elementwise sum; b's shape must equal a's or be a suffix of it (broadcast).
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s);

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& a, std::size_t axis);

/// Normalizes over the last axis; gain and bias have shape [last].
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias, Real eps = Real(1e-5));

/// Exact GELU, x·Φ(x).
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x);

/// Inverted dropout. Identity when !train or rate == 0.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, double rate, const DropoutKey& key, bool train);

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x, const std::vector<std::size_t>& perm);

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape);

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis);

template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t start, std::size_t length);

/// Sum of all elements as a scalar.
template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x);

/// Mean squared error over all elements.
template <typename Real>
Tensor<Real> mse_loss(const Tensor<Real>& prediction, const Tensor<Real>& target);

// --- optimization ---------------------------------------------------------

template <typename Real>
using ParamMap = std::map<std::string, Tensor<Real>>;

template <typename Real>
struct AdamState {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::map<std::string, std::vector<Real>> first_moment;
    std::map<std::string, std::vector<Real>> second_moment;
};

/// One bias-corrected Adam update of every parameter from its gradient.
/// Parameters without a gradient are treated as having a zero gradient.
template <typename Real>
void adam_step(ParamMap<Real>& params, AdamState<Real>& state);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

template <typename Real>
using ScalarFunction = std::function<Tensor<Real>(const std::vector<Tensor<Real>>&)>;

/// Compares reverse-mode gradients of a scalar function with central
/// differences, element by element over every input. The relative error of
/// one component is |a − n| / max(|a|, |n|, floor).
template <typename Real>
GradCheckResult grad_check(const ScalarFunction<Real>& f, std::vector<Tensor<Real>> inputs, double h = 1e-5,
                           double floor = 1e-6);

} // namespace cbvp::tensor
