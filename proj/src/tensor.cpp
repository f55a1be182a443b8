#include "cbvp/tensor.hpp"

#include "cbvp/errors.hpp"
#include "cbvp/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace cbvp::tensor {

std::size_t numel(const Shape& shape)
{
    std::size_t n = 1;
    for (std::size_t d : shape)
        n *= d;
    return n;
}

std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;
std::atomic<bool> g_checked{true};

template <typename Real>
using NodePtr = std::shared_ptr<detail::Node<Real>>;

template <typename Real>
using BackwardFn = std::function<void(detail::Node<Real>&)>;

template <typename Real>
void check_finite(const std::vector<Real>& v, const char* op)
{
    for (Real x : v) {
        if (!std::isfinite(x))
            throw NonFiniteError(std::string("non-finite value produced by ") + op);
    }
}

template <typename Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> value, std::vector<NodePtr<Real>> parents,
                         BackwardFn<Real> backward, const char* op)
{
    if (g_checked.load(std::memory_order_relaxed))
        check_finite(value, op);
    auto node = std::make_shared<detail::Node<Real>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    const bool needs_grad = t_grad_enabled && std::any_of(parents.begin(), parents.end(), [](const auto& p) {
                                return p->requires_grad;
                            });
    if (needs_grad) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor<Real>(std::move(node));
}

// Gradient buffer of a parent that wants one, or nullptr.
template <typename Real>
Real* grad_of(detail::Node<Real>& self, std::size_t i)
{
    auto& p = *self.parents[i];
    if (!p.requires_grad)
        return nullptr;
    p.ensure_grad();
    return p.grad.data();
}

// C[m,n] += A[m,k] · B[k,n]
template <typename Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c)
{
    for (std::size_t i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        const Real* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = ai[p];
            const Real* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j)
                ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] · B[n,k]ᵀ
template <typename Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c)
{
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const Real* bj = b + j * k;
            Real acc = 0;
            for (std::size_t p = 0; p < k; ++p)
                acc += ai[p] * bj[p];
            c[i * n + j] += acc;
        }
    }
}

// C[m,n] += A[k,m]ᵀ · B[k,n]
template <typename Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c)
{
    for (std::size_t p = 0; p < k; ++p) {
        const Real* ap = a + p * m;
        const Real* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const Real av = ap[i];
            Real* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j)
                ci[j] += av * bp[j];
        }
    }
}

std::vector<std::size_t> strides_of(const Shape& s)
{
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;)
        st[i - 1] = st[i] * s[i];
    return st;
}

// in-index of every out position for a permutation.
std::vector<std::size_t> permute_map(const Shape& in_shape, const std::vector<std::size_t>& perm)
{
    const std::size_t r = in_shape.size();
    const auto in_strides = strides_of(in_shape);
    Shape out_shape(r);
    std::vector<std::size_t> step(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in_shape[perm[i]];
        step[i] = in_strides[perm[i]];
    }
    const std::size_t total = numel(in_shape);
    std::vector<std::size_t> map(total);
    std::vector<std::size_t> idx(r, 0);
    std::size_t in = 0;
    for (std::size_t o = 0; o < total; ++o) {
        map[o] = in;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                in += step[d];
                break;
            }
            in -= step[d] * (out_shape[d] - 1);
            idx[d] = 0;
        }
    }
    return map;
}

} // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled)
{
    t_grad_enabled = false;
}

NoGradGuard::~NoGradGuard()
{
    t_grad_enabled = previous_;
}

bool grad_enabled()
{
    return t_grad_enabled;
}

void set_checked(bool on)
{
    g_checked.store(on);
}

bool checked()
{
    return g_checked.load();
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill, bool requires_grad) : node_(std::make_shared<detail::Node<Real>>())
{
    node_->value.assign(numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> values, bool requires_grad)
    : node_(std::make_shared<detail::Node<Real>>())
{
    if (numel(shape) != values.size())
        throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                         to_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
}

template <typename Real>
Real Tensor<Real>::item() const
{
    if (size() != 1)
        throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
}

template <typename Real>
Real Tensor<Real>::at(std::initializer_list<std::size_t> index) const
{
    if (index.size() != rank())
        throw ShapeError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t d = 0;
    for (std::size_t i : index) {
        if (i >= node_->shape[d])
            throw ShapeError("index out of range");
        flat = flat * node_->shape[d] + i;
        ++d;
    }
    return node_->value[flat];
}

template <typename Real>
void Tensor<Real>::zero_grad()
{
    std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
}

template <typename Real>
void Tensor<Real>::backward() const
{
    if (size() != 1)
        throw ShapeError("backward() requires a single-element tensor, got " + to_string(shape()));
    if (!node_->requires_grad)
        return;

    // Iterative post-order DFS; reversed it is a valid reverse topological order.
    std::vector<detail::Node<Real>*> order;
    std::unordered_set<detail::Node<Real>*> seen;
    std::vector<std::pair<detail::Node<Real>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node<Real>* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second)
                stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node<Real>* n = *it;
        if (n->backward && !n->grad.empty())
            n->backward(*n);
    }
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const
{
    return Tensor(node_->shape, node_->value, false);
}

// --- primitives -----------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b)
{
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2)
        throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(as) + " and " + to_string(bs));
    const std::size_t m = as[as.size() - 2];
    const std::size_t k = as[as.size() - 1];
    if (bs[bs.size() - 2] != k)
        throw ShapeError("matmul inner dimensions differ: " + to_string(as) + " x " + to_string(bs));
    const std::size_t n = bs[bs.size() - 1];
    Shape out_shape = as;
    out_shape.back() = n;
    const std::size_t batch = numel(as) / (m * k == 0 ? 1 : m * k);

    if (bs.size() == 2) {
        std::vector<Real> out(batch * m * n, Real(0));
        gemm_nn(batch * m, n, k, a.data().data(), b.data().data(), out.data());
        const std::size_t rows = batch * m;
        return make_result<Real>(std::move(out_shape), std::move(out), {a.node(), b.node()},
                                 [rows, n, k](detail::Node<Real>& self) {
                                     const Real* g = self.grad.data();
                                     const auto& A = self.parents[0]->value;
                                     const auto& B = self.parents[1]->value;
                                     if (Real* ga = grad_of(self, 0))
                                         gemm_nt(rows, k, n, g, B.data(), ga);
                                     if (Real* gb = grad_of(self, 1))
                                         gemm_tn(k, n, rows, A.data(), g, gb);
                                 },
                                 "matmul");
    }

    if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))
        throw ShapeError("batched matmul needs matching leading dimensions: " + to_string(as) + " x " +
                         to_string(bs));
    std::vector<Real> out(batch * m * n, Real(0));
    for (std::size_t t = 0; t < batch; ++t)
        gemm_nn(m, n, k, a.data().data() + t * m * k, b.data().data() + t * k * n, out.data() + t * m * n);
    return make_result<Real>(std::move(out_shape), std::move(out), {a.node(), b.node()},
                             [batch, m, n, k](detail::Node<Real>& self) {
                                 const Real* g = self.grad.data();
                                 const auto& A = self.parents[0]->value;
                                 const auto& B = self.parents[1]->value;
                                 Real* ga = grad_of(self, 0);
                                 Real* gb = grad_of(self, 1);
                                 for (std::size_t t = 0; t < batch; ++t) {
                                     if (ga)
                                         gemm_nt(m, k, n, g + t * m * n, B.data() + t * k * n, ga + t * m * k);
                                     if (gb)
                                         gemm_tn(k, n, m, A.data() + t * m * k, g + t * m * n, gb + t * k * n);
                                 }
                             },
                             "matmul");
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b)
{
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size())))
        throw ShapeError("add: " + to_string(bs) + " does not broadcast onto " + to_string(as));
    const std::size_t inner = numel(bs);
    const std::size_t outer = inner == 0 ? 0 : a.size() / inner;
    std::vector<Real> out(a.data().begin(), a.data().end());
    const auto bv = b.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i)
            out[o * inner + i] += bv[i];
    }
    return make_result<Real>(as, std::move(out), {a.node(), b.node()},
                             [outer, inner](detail::Node<Real>& self) {
                                 const auto& g = self.grad;
                                 if (Real* ga = grad_of(self, 0)) {
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                         ga[i] += g[i];
                                 }
                                 if (Real* gb = grad_of(self, 1)) {
                                     for (std::size_t o = 0; o < outer; ++o) {
                                         for (std::size_t i = 0; i < inner; ++i)
                                             gb[i] += g[o * inner + i];
                                     }
                                 }
                             },
                             "add");
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s)
{
    std::vector<Real> out(a.data().begin(), a.data().end());
    for (auto& v : out)
        v *= s;
    return make_result<Real>(a.shape(), std::move(out), {a.node()},
                             [s](detail::Node<Real>& self) {
                                 if (Real* ga = grad_of(self, 0)) {
                                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                                         ga[i] += s * self.grad[i];
                                 }
                             },
                             "scale");
}

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& a, std::size_t axis)
{
    const Shape& s = a.shape();
    if (axis >= s.size())
        throw ShapeError("softmax axis out of range for " + to_string(s));
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t i = 0; i < axis; ++i)
        outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i)
        inner *= s[i];
    const std::size_t d = s[axis];

    const auto x = a.data();
    std::vector<Real> y(x.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * d * inner + i;
            Real mx = x[base];
            for (std::size_t j = 1; j < d; ++j)
                mx = std::max(mx, x[base + j * inner]);
            Real total = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const Real e = std::exp(x[base + j * inner] - mx);
                y[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < d; ++j)
                y[base + j * inner] /= total;
        }
    }
    return make_result<Real>(s, std::move(y), {a.node()},
                             [outer, inner, d](detail::Node<Real>& self) {
                                 Real* ga = grad_of(self, 0);
                                 if (!ga)
                                     return;
                                 const auto& yv = self.value;
                                 const auto& g = self.grad;
                                 for (std::size_t o = 0; o < outer; ++o) {
                                     for (std::size_t i = 0; i < inner; ++i) {
                                         const std::size_t base = o * d * inner + i;
                                         Real dot = 0;
                                         for (std::size_t j = 0; j < d; ++j)
                                             dot += g[base + j * inner] * yv[base + j * inner];
                                         for (std::size_t j = 0; j < d; ++j) {
                                             const std::size_t q = base + j * inner;
                                             ga[q] += yv[q] * (g[q] - dot);
                                         }
                                     }
                                 }
                             },
                             "softmax");
}

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias, Real eps)
{
    const Shape& s = x.shape();
    if (s.empty())
        throw ShapeError("layer_norm on a scalar");
    const std::size_t d = s.back();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw ShapeError("layer_norm gain/bias must have shape [" + std::to_string(d) + "]");
    const std::size_t rows = x.size() / d;
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();

    std::vector<Real> xhat(x.size());
    std::vector<Real> inv_std(rows);
    std::vector<Real> y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = xv.data() + r * d;
        Real mean = 0;
        for (std::size_t j = 0; j < d; ++j)
            mean += xr[j];
        mean /= static_cast<Real>(d);
        Real var = 0;
        for (std::size_t j = 0; j < d; ++j)
            var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<Real>(d);
        const Real is = Real(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const Real h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return make_result<Real>(s, std::move(y), {x.node(), gain.node(), bias.node()},
                             [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<Real>& self) {
                                 const auto& g = self.grad;
                                 const auto& gv = self.parents[1]->value;
                                 Real* gx = grad_of(self, 0);
                                 Real* gg = grad_of(self, 1);
                                 Real* gb = grad_of(self, 2);
                                 for (std::size_t r = 0; r < rows; ++r) {
                                     const Real* gr = g.data() + r * d;
                                     const Real* hr = xhat.data() + r * d;
                                     if (gg || gb) {
                                         for (std::size_t j = 0; j < d; ++j) {
                                             if (gg)
                                                 gg[j] += gr[j] * hr[j];
                                             if (gb)
                                                 gb[j] += gr[j];
                                         }
                                     }
                                     if (gx) {
                                         Real mean_dh = 0;
                                         Real mean_dh_h = 0;
                                         for (std::size_t j = 0; j < d; ++j) {
                                             const Real dh = gr[j] * gv[j];
                                             mean_dh += dh;
                                             mean_dh_h += dh * hr[j];
                                         }
                                         mean_dh /= static_cast<Real>(d);
                                         mean_dh_h /= static_cast<Real>(d);
                                         for (std::size_t j = 0; j < d; ++j) {
                                             const Real dh = gr[j] * gv[j];
                                             gx[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                                         }
                                     }
                                 }
                             },
                             "layer_norm");
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x)
{
    const auto xv = x.data();
    std::vector<Real> y(xv.size());
    const Real inv_sqrt2 = Real(1) / std::sqrt(Real(2));
    for (std::size_t i = 0; i < xv.size(); ++i)
        y[i] = Real(0.5) * xv[i] * (Real(1) + std::erf(xv[i] * inv_sqrt2));
    return make_result<Real>(x.shape(), std::move(y), {x.node()},
                             [inv_sqrt2](detail::Node<Real>& self) {
                                 Real* gx = grad_of(self, 0);
                                 if (!gx)
                                     return;
                                 const auto& xv = self.parents[0]->value;
                                 const Real inv_sqrt2pi = Real(1) / std::sqrt(Real(2) * std::numbers::pi_v<Real>);
                                 for (std::size_t i = 0; i < xv.size(); ++i) {
                                     const Real cdf = Real(0.5) * (Real(1) + std::erf(xv[i] * inv_sqrt2));
                                     const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * xv[i] * xv[i]);
                                     gx[i] += self.grad[i] * (cdf + xv[i] * pdf);
                                 }
                             },
                             "gelu");
}

template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, double rate, const DropoutKey& key, bool train)
{
    if (!(rate >= 0.0 && rate < 1.0))
        throw DomainError("dropout rate must lie in [0, 1)");
    if (!train || rate == 0.0)
        return x;
    const std::uint64_t stream = hash_combine(hash_combine(key.seed, key.site), key.step);
    const Real keep_scale = static_cast<Real>(1.0 / (1.0 - rate));
    std::vector<Real> mask(x.size());
    std::vector<Real> y(x.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double u = to_unit_double(hash_combine(stream, i));
        mask[i] = u >= rate ? keep_scale : Real(0);
        y[i] = xv[i] * mask[i];
    }
    return make_result<Real>(x.shape(), std::move(y), {x.node()},
                             [mask = std::move(mask)](detail::Node<Real>& self) {
                                 if (Real* gx = grad_of(self, 0)) {
                                     for (std::size_t i = 0; i < mask.size(); ++i)
                                         gx[i] += self.grad[i] * mask[i];
                                 }
                             },
                             "dropout");
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x, const std::vector<std::size_t>& perm)
{
    const Shape& s = x.shape();
    if (perm.size() != s.size())
        throw ShapeError("transpose: permutation rank differs from " + to_string(s));
    std::vector<bool> used(s.size(), false);
    for (std::size_t p : perm) {
        if (p >= s.size() || used[p])
            throw ShapeError("transpose: invalid permutation");
        used[p] = true;
    }
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        out_shape[i] = s[perm[i]];
    auto map = permute_map(s, perm);
    const auto xv = x.data();
    std::vector<Real> y(xv.size());
    for (std::size_t o = 0; o < y.size(); ++o)
        y[o] = xv[map[o]];
    return make_result<Real>(std::move(out_shape), std::move(y), {x.node()},
                             [map = std::move(map)](detail::Node<Real>& self) {
                                 if (Real* gx = grad_of(self, 0)) {
                                     for (std::size_t o = 0; o < map.size(); ++o)
                                         gx[map[o]] += self.grad[o];
                                 }
                             },
                             "transpose");
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape)
{
    if (numel(shape) != x.size())
        throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
    std::vector<Real> y(x.data().begin(), x.data().end());
    return make_result<Real>(std::move(shape), std::move(y), {x.node()},
                             [](detail::Node<Real>& self) {
                                 if (Real* gx = grad_of(self, 0)) {
                                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                                         gx[i] += self.grad[i];
                                 }
                             },
                             "reshape");
}

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis)
{
    if (parts.empty())
        throw ShapeError("concat of nothing");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size())
        throw ShapeError("concat axis out of range");
    Shape out_shape = s0;
    out_shape[axis] = 0;
    std::vector<std::size_t> widths;
    std::vector<NodePtr<Real>> parents;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size())
            throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != s0[i])
                throw ShapeError("concat shape mismatch: " + to_string(s) + " vs " + to_string(s0));
        }
        out_shape[axis] += s[axis];
        widths.push_back(s[axis]);
        parents.push_back(p.node());
    }
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t i = 0; i < axis; ++i)
        outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i)
        inner *= s0[i];
    const std::size_t total = out_shape[axis];

    std::vector<Real> y(numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto v = parts[p].data();
        const std::size_t w = widths[p] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(v.data() + o * w, w, y.data() + o * total * inner + offset * inner);
        offset += widths[p];
    }
    return make_result<Real>(std::move(out_shape), std::move(y), std::move(parents),
                             [outer, inner, total, widths = std::move(widths)](detail::Node<Real>& self) {
                                 std::size_t offset = 0;
                                 for (std::size_t p = 0; p < widths.size(); ++p) {
                                     const std::size_t w = widths[p] * inner;
                                     if (Real* gp = grad_of(self, p)) {
                                         for (std::size_t o = 0; o < outer; ++o) {
                                             const Real* src = self.grad.data() + o * total * inner + offset * inner;
                                             for (std::size_t i = 0; i < w; ++i)
                                                 gp[o * w + i] += src[i];
                                         }
                                     }
                                     offset += widths[p];
                                 }
                             },
                             "concat");
}

template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t start, std::size_t length)
{
    const Shape& s = x.shape();
    if (axis >= s.size() || start + length > s[axis])
        throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range on axis " +
                         std::to_string(axis) + " of " + to_string(s));
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t i = 0; i < axis; ++i)
        outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i)
        inner *= s[i];
    const std::size_t d = s[axis];
    Shape out_shape = s;
    out_shape[axis] = length;
    std::vector<Real> y(outer * length * inner);
    const auto xv = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xv.data() + (o * d + start) * inner, length * inner, y.data() + o * length * inner);
    return make_result<Real>(std::move(out_shape), std::move(y), {x.node()},
                             [outer, inner, d, start, length](detail::Node<Real>& self) {
                                 if (Real* gx = grad_of(self, 0)) {
                                     for (std::size_t o = 0; o < outer; ++o) {
                                         const Real* src = self.grad.data() + o * length * inner;
                                         Real* dst = gx + (o * d + start) * inner;
                                         for (std::size_t i = 0; i < length * inner; ++i)
                                             dst[i] += src[i];
                                     }
                                 }
                             },
                             "slice");
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x)
{
    Real total = 0;
    for (Real v : x.data())
        total += v;
    return make_result<Real>(Shape{}, std::vector<Real>{total}, {x.node()},
                             [](detail::Node<Real>& self) {
                                 if (Real* gx = grad_of(self, 0)) {
                                     const std::size_t n = self.parents[0]->value.size();
                                     for (std::size_t i = 0; i < n; ++i)
                                         gx[i] += self.grad[0];
                                 }
                             },
                             "sum");
}

template <typename Real>
Tensor<Real> mse_loss(const Tensor<Real>& prediction, const Tensor<Real>& target)
{
    if (prediction.shape() != target.shape())
        throw ShapeError("mse_loss shapes differ: " + to_string(prediction.shape()) + " vs " +
                         to_string(target.shape()));
    const auto p = prediction.data();
    const auto t = target.data();
    if (p.empty())
        throw ShapeError("mse_loss of empty tensors");
    Real total = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        total += (p[i] - t[i]) * (p[i] - t[i]);
    const Real n = static_cast<Real>(p.size());
    return make_result<Real>(Shape{}, std::vector<Real>{total / n}, {prediction.node(), target.node()},
                             [n](detail::Node<Real>& self) {
                                 const auto& p = self.parents[0]->value;
                                 const auto& t = self.parents[1]->value;
                                 const Real g = self.grad[0] * Real(2) / n;
                                 Real* gp = grad_of(self, 0);
                                 Real* gt = grad_of(self, 1);
                                 for (std::size_t i = 0; i < p.size(); ++i) {
                                     const Real diff = p[i] - t[i];
                                     if (gp)
                                         gp[i] += g * diff;
                                     if (gt)
                                         gt[i] -= g * diff;
                                 }
                             },
                             "mse_loss");
}

// --- optimization ---------------------------------------------------------

template <typename Real>
void adam_step(ParamMap<Real>& params, AdamState<Real>& state)
{
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    for (auto& [name, p] : params) {
        auto& m = state.first_moment[name];
        auto& v = state.second_moment[name];
        if (m.empty()) {
            m.assign(p.size(), Real(0));
            v.assign(p.size(), Real(0));
        }
        if (m.size() != p.size() || v.size() != p.size())
            throw ShapeError("adam moments for '" + name + "' do not match the parameter shape");
        const auto g = p.grad();
        if (!g.empty() && g.size() != p.size())
            throw ShapeError("gradient for '" + name + "' does not match the parameter shape");
        auto w = p.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
            const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<Real>(mi);
            v[i] = static_cast<Real>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            w[i] -= static_cast<Real>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

template <typename Real>
GradCheckResult grad_check(const ScalarFunction<Real>& f, std::vector<Tensor<Real>> inputs, double h, double floor)
{
    if (!(h > 0.0 && h < 1e-2))
        throw DomainError("grad_check step must lie in (0, 1e-2)");

    // Fresh leaves so the caller's tensors keep their own gradient state.
    for (auto& in : inputs)
        in = Tensor<Real>(in.shape(), std::vector<Real>(in.data().begin(), in.data().end()), true);

    const Tensor<Real> out = f(inputs);
    if (out.size() != 1)
        throw ShapeError("grad_check: function must be scalar-valued");
    out.backward();

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        std::vector<Real> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
        if (analytic.empty())
            analytic.assign(inputs[k].size(), Real(0));
        auto values = inputs[k].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const Real saved = values[i];
            values[i] = static_cast<Real>(saved + h);
            const double up = static_cast<double>(f(inputs).item());
            values[i] = static_cast<Real>(saved - h);
            const double down = static_cast<double>(f(inputs).item());
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = static_cast<double>(analytic[i]);
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw NonFiniteError("grad_check: non-finite gradient");
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            if (rel > result.max_rel_error || (k == 0 && i == 0)) {
                result = {rel, k, i, a, numeric};
            }
        }
    }
    return result;
}

#define CBVP_INSTANTIATE(Real)                                                                                 \
    template class Tensor<Real>;                                                                               \
    template Tensor<Real> matmul(const Tensor<Real>&, const Tensor<Real>&);                                    \
    template Tensor<Real> add(const Tensor<Real>&, const Tensor<Real>&);                                       \
    template Tensor<Real> scale(const Tensor<Real>&, Real);                                                    \
    template Tensor<Real> softmax(const Tensor<Real>&, std::size_t);                                           \
    template Tensor<Real> layer_norm(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&, Real);     \
    template Tensor<Real> gelu(const Tensor<Real>&);                                                           \
    template Tensor<Real> dropout(const Tensor<Real>&, double, const DropoutKey&, bool);                       \
    template Tensor<Real> transpose(const Tensor<Real>&, const std::vector<std::size_t>&);                     \
    template Tensor<Real> reshape(const Tensor<Real>&, Shape);                                                 \
    template Tensor<Real> concat(const std::vector<Tensor<Real>>&, std::size_t);                               \
    template Tensor<Real> slice(const Tensor<Real>&, std::size_t, std::size_t, std::size_t);                   \
    template Tensor<Real> sum(const Tensor<Real>&);                                                            \
    template Tensor<Real> mse_loss(const Tensor<Real>&, const Tensor<Real>&);                                  \
    template void adam_step(ParamMap<Real>&, AdamState<Real>&);                                                \
    template GradCheckResult grad_check(const ScalarFunction<Real>&, std::vector<Tensor<Real>>, double, double);

CBVP_INSTANTIATE(float)
CBVP_INSTANTIATE(double)

#undef CBVP_INSTANTIATE

} // namespace cbvp::tensor
