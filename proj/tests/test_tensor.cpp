#include "cbvp/errors.hpp"
#include "cbvp/rng.hpp"
#include "cbvp/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace cbvp;
using namespace cbvp::tensor;

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    Rng rng(seed);
    std::vector<double> v(numel(shape));
    for (auto& x : v)
        x = rng.uniform(lo, hi);
    return T(std::move(shape), std::move(v));
}

// Scalar loss against a fixed random target so every output element carries
// a distinct upstream gradient.
T loss_against_target(const T& y, std::uint64_t seed)
{
    return mse_loss(y, random_tensor(y.shape(), seed));
}

double check_unary(const std::function<T(const T&)>& op, Shape shape, std::uint64_t seed)
{
    const ScalarFunction<double> f = [&](const std::vector<T>& in) {
        return loss_against_target(op(in[0]), seed + 1000);
    };
    return grad_check<double>(f, {random_tensor(std::move(shape), seed)}).max_rel_error;
}

} // namespace

TEST_CASE("construction and shape checks")
{
    const T a(Shape{2, 3}, 1.5);
    CHECK(a.size() == 6);
    CHECK(a.rank() == 2);
    CHECK(a.at({1, 2}) == 1.5);
    CHECK_THROWS_AS(T(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(matmul(T(Shape{2, 3}), T(Shape{2, 3})), ShapeError);
    CHECK_THROWS_AS(add(T(Shape{2, 3}), T(Shape{2})), ShapeError);
    CHECK_THROWS_AS(reshape(T(Shape{2, 3}), Shape{4}), ShapeError);
    CHECK_THROWS_AS(slice(T(Shape{2, 3}), 1, 2, 2), ShapeError);
    CHECK(to_string(Shape{2, 3}) == "[2,3]");
}

TEST_CASE("matmul values")
{
    const T a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    const T b(Shape{3, 2}, {7, 8, 9, 10, 11, 12});
    const T c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 2});
    CHECK(c.at({0, 0}) == 58.0);
    CHECK(c.at({0, 1}) == 64.0);
    CHECK(c.at({1, 0}) == 139.0);
    CHECK(c.at({1, 1}) == 154.0);

    T eye(Shape{3, 3});
    for (std::size_t i = 0; i < 3; ++i)
        eye.mutable_data()[i * 4] = 1.0;
    const T x = random_tensor({4, 3}, 3);
    const T y = matmul(x, eye);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(y.data()[i] == x.data()[i]);

    // Batched operands with matching leading dimensions.
    const T ba = random_tensor({2, 3, 4}, 5);
    const T bb = random_tensor({2, 4, 2}, 6);
    const T bc = matmul(ba, bb);
    CHECK(bc.shape() == Shape{2, 3, 2});
    const T second = matmul(reshape(slice(ba, 0, 1, 1), {3, 4}), reshape(slice(bb, 0, 1, 1), {4, 2}));
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(bc.data()[6 + i] == doctest::Approx(second.data()[i]).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one")
{
    const T x = random_tensor({4, 5, 7}, 9, -20, 20);
    for (std::size_t axis : {0u, 1u, 2u}) {
        const T s = softmax(x, axis);
        const T st = transpose(s, axis == 2 ? std::vector<std::size_t>{0, 1, 2}
                                  : axis == 1 ? std::vector<std::size_t>{0, 2, 1}
                                              : std::vector<std::size_t>{1, 2, 0});
        const std::size_t n = st.dim(2);
        for (std::size_t r = 0; r < st.size() / n; ++r) {
            double total = 0;
            for (std::size_t k = 0; k < n; ++k)
                total += st.data()[r * n + k];
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("layer norm and gelu values")
{
    const T x(Shape{1, 4}, {1, 2, 3, 4});
    const T y = layer_norm(x, T(Shape{4}, 1.0), T(Shape{4}, 0.0), 0.0);
    const double sd = std::sqrt(1.25);
    CHECK(y.data()[0] == doctest::Approx(-1.5 / sd).epsilon(1e-14));
    CHECK(y.data()[3] == doctest::Approx(1.5 / sd).epsilon(1e-14));

    const T g = gelu(T(Shape{3}, {-1.0, 0.0, 2.0}));
    CHECK(g.data()[0] == doctest::Approx(-1.0 * 0.5 * std::erfc(1.0 / std::sqrt(2.0))).epsilon(1e-15));
    CHECK(g.data()[1] == 0.0);
    CHECK(g.data()[2] == doctest::Approx(2.0 * 0.5 * std::erfc(-2.0 / std::sqrt(2.0))).epsilon(1e-15));
}

TEST_CASE("structural ops")
{
    const T x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    const T t = transpose(x, {1, 0});
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at({0, 1}) == 4.0);
    CHECK(t.at({2, 0}) == 3.0);

    const T c = concat<double>({x, T(Shape{2, 1}, {7, 8})}, 1);
    CHECK(c.shape() == Shape{2, 4});
    CHECK(c.at({1, 3}) == 8.0);
    CHECK(c.at({1, 0}) == 4.0);

    const T s = slice(c, 1, 1, 2);
    CHECK(s.shape() == Shape{2, 2});
    CHECK(s.at({0, 0}) == 2.0);
    CHECK(s.at({1, 1}) == 6.0);

    CHECK(sum(x).item() == 21.0);
    CHECK(scale(x, 2.0).at({1, 2}) == 12.0);
    CHECK(add(x, T(Shape{3}, {10, 20, 30})).at({1, 1}) == 25.0);
    CHECK(mse_loss(x, x).item() == 0.0);
    CHECK(mse_loss(x, T(Shape{2, 3}, 0.0)).item() == doctest::Approx(91.0 / 6.0));
}

TEST_CASE("gradient of sum(matmul) matches finite differences")
{
    const T b = random_tensor({4, 2}, 2);
    const ScalarFunction<double> f = [&](const std::vector<T>& in) { return sum(matmul(in[0], b)); };
    const auto r = grad_check<double>(f, {random_tensor({3, 4}, 1)});
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("every primitive passes the gradient check")
{
    SUBCASE("matmul both operands, batched")
    {
        const ScalarFunction<double> f = [](const std::vector<T>& in) {
            return loss_against_target(matmul(in[0], in[1]), 77);
        };
        CHECK(grad_check<double>(f, {random_tensor({2, 3, 4}, 1), random_tensor({2, 4, 5}, 2)}).max_rel_error < 1e-5);
        CHECK(grad_check<double>(f, {random_tensor({2, 3, 4}, 3), random_tensor({4, 5}, 4)}).max_rel_error < 1e-5);
    }
    SUBCASE("add with broadcast")
    {
        const ScalarFunction<double> f = [](const std::vector<T>& in) {
            return loss_against_target(add(in[0], in[1]), 78);
        };
        CHECK(grad_check<double>(f, {random_tensor({3, 4}, 5), random_tensor({4}, 6)}).max_rel_error < 1e-5);
        CHECK(grad_check<double>(f, {random_tensor({3, 4}, 7), random_tensor({3, 4}, 8)}).max_rel_error < 1e-5);
    }
    SUBCASE("scale")
    {
        CHECK(check_unary([](const T& x) { return scale(x, -0.37); }, {5, 2}, 9) < 1e-5);
    }
    SUBCASE("softmax on each axis")
    {
        for (std::size_t axis : {0u, 1u, 2u})
            CHECK(check_unary([axis](const T& x) { return softmax(x, axis); }, {2, 3, 4}, 10 + axis) < 1e-5);
    }
    SUBCASE("layer norm with gain and bias")
    {
        const ScalarFunction<double> f = [](const std::vector<T>& in) {
            return loss_against_target(layer_norm(in[0], in[1], in[2]), 79);
        };
        CHECK(grad_check<double>(f, {random_tensor({3, 5}, 11), random_tensor({5}, 12, 0.5, 1.5),
                                     random_tensor({5}, 13)})
                  .max_rel_error < 1e-5);
    }
    SUBCASE("gelu")
    {
        CHECK(check_unary([](const T& x) { return gelu(x); }, {4, 3}, 14) < 1e-5);
    }
    SUBCASE("dropout in training mode")
    {
        const DropoutKey key{5, 1, 2};
        CHECK(check_unary([&](const T& x) { return dropout(x, 0.3, key, true); }, {6, 4}, 15) < 1e-5);
    }
    SUBCASE("transpose")
    {
        CHECK(check_unary([](const T& x) { return transpose(x, {2, 0, 1}); }, {2, 3, 4}, 16) < 1e-5);
    }
    SUBCASE("reshape")
    {
        CHECK(check_unary([](const T& x) { return reshape(x, {3, 8}); }, {2, 3, 4}, 17) < 1e-5);
    }
    SUBCASE("concat")
    {
        const ScalarFunction<double> f = [](const std::vector<T>& in) {
            return loss_against_target(concat<double>({in[0], in[1]}, 1), 80);
        };
        CHECK(grad_check<double>(f, {random_tensor({2, 3, 2}, 18), random_tensor({2, 1, 2}, 19)}).max_rel_error <
              1e-5);
    }
    SUBCASE("slice")
    {
        CHECK(check_unary([](const T& x) { return slice(x, 1, 1, 2); }, {3, 4, 2}, 20) < 1e-5);
    }
    SUBCASE("sum and mse")
    {
        const ScalarFunction<double> f = [](const std::vector<T>& in) {
            return add(sum(in[0]), mse_loss(in[0], in[1]));
        };
        CHECK(grad_check<double>(f, {random_tensor({3, 3}, 21), random_tensor({3, 3}, 22)}).max_rel_error < 1e-5);
    }
}

TEST_CASE("grad check on simple functions")
{
    const ScalarFunction<double> square = [](const std::vector<T>& in) {
        return sum(matmul(in[0], in[0]));
    };
    const auto r = grad_check<double>(square, {T(Shape{1, 1}, {3.0})});
    CHECK(r.analytic == 6.0);
    CHECK(r.numeric == doctest::Approx(6.0).epsilon(1e-10));
    CHECK(r.max_rel_error < 1e-10);

    const T w = random_tensor({4, 1}, 30);
    const ScalarFunction<double> linear = [&](const std::vector<T>& in) { return sum(matmul(in[0], w)); };
    CHECK(grad_check<double>(linear, {random_tensor({2, 4}, 31)}).max_rel_error < 1e-9);

    CHECK_THROWS_AS(grad_check<double>(linear, {random_tensor({2, 4}, 31)}, 0.5), DomainError);
}

TEST_CASE("backward accumulates through shared inputs")
{
    T x(Shape{2}, {1.0, 2.0}, true);
    const T y = add(x, x);
    sum(y).backward();
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("no-grad guard")
{
    T x(Shape{2}, {1.0, 2.0}, true);
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        const T y = scale(x, 2.0);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
    CHECK(scale(x, 2.0).requires_grad());
}

TEST_CASE("dropout")
{
    const T x = random_tensor({50, 40}, 40);
    const DropoutKey key{1, 2, 3};

    const T eval = dropout(x, 0.5, key, false);
    CHECK(std::equal(eval.data().begin(), eval.data().end(), x.data().begin()));
    const T zero_rate = dropout(x, 0.0, key, true);
    CHECK(std::equal(zero_rate.data().begin(), zero_rate.data().end(), x.data().begin()));

    const T a = dropout(x, 0.25, key, true);
    const T b = dropout(x, 0.25, key, true);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    const T c = dropout(x, 0.25, DropoutKey{1, 2, 4}, true);
    CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));

    std::size_t kept = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (a.data()[i] != 0.0) {
            ++kept;
            CHECK(a.data()[i] == doctest::Approx(x.data()[i] / 0.75).epsilon(1e-15));
        }
    }
    CHECK(kept > 1400);
    CHECK(kept < 1600);
}

TEST_CASE("checked mode trips on non-finite values")
{
    REQUIRE(checked());
    const T x(Shape{2}, {1e300, 1e300});
    CHECK_THROWS_AS(matmul(reshape(x, {2, 1}), reshape(x, {1, 2})), NonFiniteError);
    set_checked(false);
    const T y = matmul(reshape(x, {2, 1}), reshape(x, {1, 2}));
    CHECK(std::isinf(y.data()[0]));
    set_checked(true);
}

TEST_CASE("Adam")
{
    SUBCASE("zero gradient leaves parameters unchanged")
    {
        ParamMap<double> params{{"w", T(Shape{3}, {1.0, -2.0, 0.5}, true)}};
        params.at("w").mutable_grad();
        AdamState<double> st;
        adam_step(params, st);
        CHECK(params.at("w").data()[0] == 1.0);
        CHECK(params.at("w").data()[1] == -2.0);
        CHECK(params.at("w").data()[2] == 0.5);
    }

    SUBCASE("first step is bounded by the learning rate")
    {
        ParamMap<double> params{{"w", T(Shape{3}, {1.0, -2.0, 0.5}, true)}};
        auto g = params.at("w").mutable_grad();
        g[0] = 0.3;
        g[1] = -40.0;
        g[2] = 1e-3;
        AdamState<double> st;
        st.lr = 0.01;
        adam_step(params, st);
        const double before[3] = {1.0, -2.0, 0.5};
        for (std::size_t i = 0; i < 3; ++i) {
            const double d = params.at("w").data()[i] - before[i];
            CHECK(std::abs(d) <= 0.01 * (1 + 1e-9));
            CHECK((d < 0) == (g[i] > 0));
        }
    }

    SUBCASE("three steps against the hand recurrence")
    {
        ParamMap<double> params{{"p", T(Shape{1}, {0.25}, true)}};
        AdamState<double> st;
        st.lr = 0.1;
        double p = 0.25, m = 0, v = 0;
        for (int t = 1; t <= 3; ++t) {
            params.at("p").mutable_grad()[0] = 1.0;
            adam_step(params, st);
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            const double mhat = m / (1 - std::pow(0.9, t));
            const double vhat = v / (1 - std::pow(0.999, t));
            p -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
            CHECK(std::abs(params.at("p").data()[0] - p) < 1e-12);
        }
        CHECK(st.step == 3);
    }

    SUBCASE("moment shape mismatch")
    {
        ParamMap<double> params{{"p", T(Shape{2}, 0.0, true)}};
        AdamState<double> st;
        st.first_moment["p"] = {0.0};
        st.second_moment["p"] = {0.0};
        CHECK_THROWS_AS(adam_step(params, st), ShapeError);
    }
}

TEST_CASE("single precision path")
{
    const Tensor<float> a(Shape{2, 2}, {1, 2, 3, 4}, true);
    const Tensor<float> l = mse_loss(matmul(a, a), Tensor<float>(Shape{2, 2}, 0.0f));
    l.backward();
    CHECK(l.item() == doctest::Approx((49.0 + 100 + 225 + 484) / 4.0));
    CHECK(a.grad().size() == 4);
}
