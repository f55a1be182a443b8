#include "cbvp/checkpoint.hpp"
#include "cbvp/errors.hpp"
#include "cbvp/model.hpp"
#include "cbvp/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace cbvp;
using namespace cbvp::tensor;

namespace {

using T = Tensor<double>;

ModelConfig micro()
{
    ModelConfig m;
    m.context_length = 64;
    m.patch_length = 8;
    m.d_model = 16;
    m.n_heads = 4;
    m.n_layers = 2;
    m.ffn_dim = 32;
    m.dropout = 0.0;
    m.head_dropout = 0.0;
    m.total_horizon = 24;
    return m;
}

T random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    Rng rng(seed);
    std::vector<double> v(numel(shape));
    for (auto& x : v)
        x = rng.uniform(lo, hi);
    return T(std::move(shape), std::move(v));
}

bool same(const T& a, const T& b)
{
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

double max_abs_diff(const T& a, const T& b)
{
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

} // namespace

TEST_CASE("config arithmetic")
{
    const ModelConfig d;
    CHECK(d.n_patches() == 16);
    CHECK(d.n_tokens() == 17);
    CHECK(d.step_forecast() == 32);
    CHECK(d.iterations() == 562);
    CHECK(562 * 32 == 17984);
    CHECK(d.head_dim() == 8);

    ModelConfig m = d;
    m.patch_length = 8;
    CHECK(m.n_patches() == 64);
    m.patch_length = 16;
    CHECK(m.n_patches() == 32);

    m = d;
    m.patch_length = 5;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m = d;
    m.n_heads = 5;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m = d;
    m.total_horizon = 100;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m = d;
    m.prefix_values = 7;
    CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("patching")
{
    const T ctx = random_tensor({512, 6}, 1);
    const T p8 = make_patches(ctx, 8);
    CHECK(p8.shape() == Shape{64, 48});
    CHECK(make_patches(ctx, 16).shape() == Shape{32, 96});
    CHECK_THROWS_AS(make_patches(ctx, 5), ShapeError);
    // Patch k holds steps 8k..8k+7, flattened time-major.
    CHECK(p8.at({3, 0}) == ctx.at({24, 0}));
    CHECK(p8.at({3, 13}) == ctx.at({26, 1}));
    CHECK(p8.at({63, 47}) == ctx.at({511, 5}));

    const T batched = make_patches(reshape(ctx, {2, 256, 6}), 8);
    CHECK(batched.shape() == Shape{2, 32, 48});
    CHECK(batched.at({1, 0, 0}) == ctx.at({256, 0}));
}

TEST_CASE("positional encoding")
{
    const auto pe = positional_encoding(3, 8);
    CHECK(pe[0] == 0.0);
    CHECK(pe[1] == 1.0);
    CHECK(pe[8 + 0] == doctest::Approx(std::sin(1.0)));
    CHECK(pe[8 + 2] == doctest::Approx(std::sin(1.0 / std::pow(10000.0, 2.0 / 8))));

    const std::size_t n = 10000;
    for (std::size_t d : {4u, 16u}) {
        const auto t = positional_encoding(n, d);
        std::set<std::vector<double>> rows;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> row(t.begin() + static_cast<std::ptrdiff_t>(i * d),
                                    t.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
            for (double x : row)
                CHECK_MESSAGE((x >= -1.0 && x <= 1.0), "entry out of range");
            rows.insert(std::move(row));
        }
        CHECK(rows.size() == n);
    }
}

TEST_CASE("parameters")
{
    const ModelConfig m = micro();
    const auto p = init_params<double>(m, 3);
    CHECK(p.count() == parameter_count(m));
    const auto shapes = parameter_shapes(m);
    CHECK(shapes.size() == p.tensors.size());
    for (const auto& [name, shape] : shapes)
        CHECK(p.at(name).shape() == shape);
    CHECK(p.at("embed.weight").shape() == Shape{48, 16});
    CHECK(p.at("head.weight").shape() == Shape{8 * 16, 8 * 6});
    CHECK(p.at("layer1.ffn.w1").shape() == Shape{16, 32});

    // Gains 1, biases 0, weights bounded by 1/sqrt(fan_in).
    for (double g : p.at("layer0.ln1.gain").data())
        CHECK(g == 1.0);
    for (double b : p.at("layer0.attn.bq").data())
        CHECK(b == 0.0);
    const double bound = 1.0 / std::sqrt(48.0);
    for (double w : p.at("embed.weight").data())
        CHECK(std::abs(w) <= bound);

    const auto q = init_params<double>(m, 3);
    for (const auto& [name, t] : p.tensors)
        CHECK(same(t, q.at(name)));
    const auto r = init_params<double>(m, 4);
    CHECK_FALSE(same(p.at("embed.weight"), r.at("embed.weight")));

    ModelConfig lp = m;
    lp.prefix_mode = PrefixMode::LearnedProjection;
    CHECK(parameter_count(lp) == parameter_count(m) + 6 * 16 + 16);
}

TEST_CASE("prefix token")
{
    ModelConfig m = micro();
    const auto p = init_params<double>(m, 1);

    SUBCASE("zero prefix is the positional row")
    {
        const T tok = make_prefix(T(Shape{1, 6}, 0.0), p);
        const auto pe = positional_encoding(1, 16);
        for (std::size_t i = 0; i < 16; ++i)
            CHECK(tok.data()[i] == pe[i]);
    }

    SUBCASE("zero padding before the positional add")
    {
        const T pre = random_tensor({2, 6}, 5);
        const T tok = make_prefix(pre, p, false);
        CHECK(tok.shape() == Shape{2, 1, 16});
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t i = 0; i < 6; ++i)
                CHECK(tok.at({b, 0, i}) == pre.at({b, i}));
            for (std::size_t i = 6; i < 16; ++i)
                CHECK(tok.at({b, 0, i}) == 0.0);
        }
    }

    SUBCASE("identity projection reproduces the prefix")
    {
        ModelConfig six = m;
        six.d_model = 6;
        six.n_heads = 2;
        six.prefix_mode = PrefixMode::LearnedProjection;
        auto q = init_params<double>(six, 2);
        auto w = q.tensors.at("prefix.weight").mutable_data();
        std::fill(w.begin(), w.end(), 0.0);
        for (std::size_t i = 0; i < 6; ++i)
            w[i * 6 + i] = 1.0;
        const T pre = random_tensor({3, 6}, 6);
        const T tok = make_prefix(pre, q, false);
        for (std::size_t i = 0; i < pre.size(); ++i)
            CHECK(tok.data()[i] == pre.data()[i]);
    }

    SUBCASE("shape check")
    {
        CHECK_THROWS_AS(make_prefix(T(Shape{1, 12}, 0.0), p), ShapeError);
    }
}

TEST_CASE("encoder")
{
    ModelConfig m = micro();
    const auto p = init_params<double>(m, 7);
    const T tokens = random_tensor({2, 9, 16}, 8);

    SUBCASE("eval mode is deterministic")
    {
        CHECK(same(encoder_forward(tokens, p, {}), encoder_forward(tokens, p, {})));
    }

    SUBCASE("attention rows sum to one")
    {
        std::size_t calls = 0;
        const AttentionProbe<double> probe = [&](std::size_t, const T& w) {
            ++calls;
            CHECK(w.shape() == Shape{2, 4, 9, 9});
            for (std::size_t r = 0; r < w.size() / 9; ++r) {
                double total = 0;
                for (std::size_t k = 0; k < 9; ++k)
                    total += w.data()[r * 9 + k];
                CHECK(std::abs(total - 1.0) < 1e-12);
            }
        };
        encoder_forward(tokens, p, {}, probe);
        CHECK(calls == 2);
    }

    SUBCASE("permutation equivariance without positions")
    {
        const T four = random_tensor({1, 4, 16}, 9);
        const std::vector<std::size_t> perm{2, 0, 3, 1};
        std::vector<T> rows;
        for (std::size_t i : perm)
            rows.push_back(slice(four, 1, i, 1));
        const T permuted = concat(rows, 1);
        const T out = encoder_forward(four, p, {});
        const T out_p = encoder_forward(permuted, p, {});
        for (std::size_t k = 0; k < 4; ++k) {
            const T a = slice(out_p, 1, k, 1);
            const T b = slice(out, 1, perm[k], 1);
            CHECK(max_abs_diff(a, b) < 1e-12);
        }
    }

    SUBCASE("training dropout changes the output")
    {
        ModelConfig md = m;
        md.dropout = 0.3;
        const auto pd = init_params<double>(md, 7);
        const T a = encoder_forward(tokens, pd, {true, 1, 0});
        const T b = encoder_forward(tokens, pd, {true, 1, 0});
        const T c = encoder_forward(tokens, pd, {true, 1, 1});
        CHECK(same(a, b));
        CHECK_FALSE(same(a, c));
        CHECK(same(encoder_forward(tokens, pd, {}), encoder_forward(tokens, p, {})));
    }
}

TEST_CASE("forecast head")
{
    ModelConfig m = micro();
    auto p = init_params<double>(m, 11);
    const T reps = random_tensor({2, 8, 16}, 12);
    CHECK(forecast_head(reps, p, {}).shape() == Shape{2, 8, 6});

    auto zeroed = cast_params<double>(p);
    for (auto name : {"head.weight", "head.bias"}) {
        auto d = zeroed.tensors.at(name).mutable_data();
        std::fill(d.begin(), d.end(), 0.0);
    }
    const T zero_out = forecast_head(reps, zeroed, {});
    for (double v : zero_out.data())
        CHECK(v == 0.0);

    const T target = random_tensor({2, 8, 6}, 13);
    const ScalarFunction<double> f = [&](const std::vector<T>& in) {
        ModelParams<double> q = p;
        q.tensors.at("head.weight") = in[1];
        q.tensors.at("head.bias") = in[2];
        return mse_loss(forecast_head(in[0], q, {}), target);
    };
    const auto r = grad_check<double>(f, {reps, p.at("head.weight"), p.at("head.bias")});
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("full model gradient")
{
    for (PrefixMode mode : {PrefixMode::ZeroPad, PrefixMode::LearnedProjection}) {
        ModelConfig m = micro();
        m.prefix_mode = mode;
        const auto p = init_params<double>(m, 21);
        std::vector<std::string> names;
        std::vector<T> inputs;
        for (const auto& [name, t] : p.tensors) {
            names.push_back(name);
            inputs.push_back(t);
        }
        const T ctx = random_tensor({2, 64, 6}, 22);
        const T pre = random_tensor({2, 6}, 23);
        const T target = random_tensor({2, 8, 6}, 24);
        inputs.push_back(pre);
        const ScalarFunction<double> f = [&](const std::vector<T>& in) {
            ModelParams<double> q{m, {}};
            for (std::size_t i = 0; i < names.size(); ++i)
                q.tensors[names[i]] = in[i];
            return mse_loss(forward(ctx, in.back(), q, {}), target);
        };
        const auto r = grad_check<double>(f, inputs);
        CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_CASE("forward shapes and prefix use")
{
    ModelConfig m = micro();
    const auto p = init_params<double>(m, 31);
    const T ctx = random_tensor({3, 64, 6}, 32);
    const T pre = random_tensor({3, 6}, 33);
    const T out = forward(ctx, pre, p, {});
    CHECK(out.shape() == Shape{3, 8, 6});
    CHECK(same(out, forward(ctx, pre, p, {})));

    // Batch rows are independent.
    const T one = forward(slice(ctx, 0, 1, 1), slice(pre, 0, 1, 1), p, {});
    CHECK(same(one, slice(out, 0, 1, 1)));

    // The prefix token reaches the forecast.
    T pre2 = pre.detach();
    pre2.mutable_data()[4] += 0.5;
    CHECK(max_abs_diff(forward(ctx, pre2, p, {}), out) > 1e-9);

    CHECK_THROWS_AS(forward(random_tensor({3, 48, 6}, 1), pre, p, {}), ShapeError);
}

TEST_CASE("generation")
{
    ModelConfig m = micro();
    const auto p = init_params<double>(m, 41);
    const T ctx = random_tensor({2, 64, 6}, 42);
    const T pre = random_tensor({2, 6}, 43);

    SUBCASE("one iteration equals one forward call")
    {
        const T g = generate(ctx, pre, 8, p);
        CHECK(same(g, forward(ctx, pre, p, {})));
    }

    SUBCASE("windows slide over earlier forecasts")
    {
        std::vector<T> windows, steps;
        const GenerationObserver<double> obs = [&](std::size_t k, const T& w, const T& s) {
            CHECK(k == windows.size());
            windows.push_back(w);
            steps.push_back(s);
        };
        const T g = generate(ctx, pre, 24, p, obs);
        CHECK(g.shape() == Shape{2, 24, 6});
        REQUIRE(windows.size() == 3);
        CHECK(same(windows[0], ctx));
        for (std::size_t k = 1; k < 3; ++k) {
            CHECK(same(slice(windows[k], 1, 56, 8), steps[k - 1]));
            CHECK(same(slice(windows[k], 1, 0, 56), slice(windows[k - 1], 1, 8, 56)));
            CHECK(same(slice(g, 1, 8 * k, 8), steps[k]));
        }
    }

    SUBCASE("prefix on the first iteration only")
    {
        ModelConfig once = m;
        once.prefix_every_iteration = false;
        ModelParams<double> q = p;
        q.config = once;
        std::vector<T> windows;
        const GenerationObserver<double> obs = [&](std::size_t, const T& w, const T&) { windows.push_back(w); };
        const T g = generate(ctx, pre, 16, q, obs);
        CHECK(same(slice(g, 1, 0, 8), forward(ctx, pre, p, {})));
        CHECK(same(slice(g, 1, 8, 8), forward(windows[1], T{}, p, {})));
    }

    SUBCASE("prefix sensitivity")
    {
        T pre2 = pre.detach();
        pre2.mutable_data()[3] += 0.25;
        CHECK(max_abs_diff(generate(ctx, pre, 24, p), generate(ctx, pre2, 24, p)) > 1e-9);
    }

    SUBCASE("horizon must be a multiple of F")
    {
        CHECK_THROWS_AS(generate(ctx, pre, 20, p), ShapeError);
    }

    SUBCASE("single precision matches double closely")
    {
        const auto pf = cast_params<float>(p);
        const Tensor<float> cf(ctx.shape(), std::vector<float>(ctx.data().begin(), ctx.data().end()));
        const Tensor<float> prf(pre.shape(), std::vector<float>(pre.data().begin(), pre.data().end()));
        const auto gf = generate(cf, prf, 8, pf);
        const auto gd = generate(ctx, pre, 8, p);
        for (std::size_t i = 0; i < gd.size(); ++i)
            CHECK(std::abs(gf.data()[i] - gd.data()[i]) < 1e-3);
    }
}

TEST_CASE("learned positions and no positions")
{
    for (PositionalMode mode : {PositionalMode::Learned, PositionalMode::None}) {
        ModelConfig m = micro();
        m.positional = mode;
        const auto p = init_params<double>(m, 51);
        CHECK(p.count() == parameter_count(m));
        const T out = forward(random_tensor({1, 64, 6}, 52), random_tensor({1, 6}, 53), p, {});
        CHECK(out.shape() == Shape{1, 8, 6});
        if (mode == PositionalMode::Learned) {
            CHECK(p.at("pos.table").shape() == Shape{9, 16});
            for (double v : p.at("pos.table").data())
                CHECK(std::abs(v) <= 0.02);
        }
    }
}

TEST_CASE("checkpoint file round trip")
{
    const ModelConfig m = micro();
    const auto p = init_params<double>(m, 61);
    const auto path = std::filesystem::temp_directory_path() / "cbvp_test_model.ckpt";

    CheckpointFile ck{to_records(p.tensors), "{\"note\":\"hello\"}"};
    ck.tensors[0].dtype = DType::Float32;
    ck.tensors[0].values.assign(ck.tensors[0].values.size(), 0.5);
    write_checkpoint_file(path, ck);
    const CheckpointFile back = read_checkpoint_file(path);
    CHECK(back.trailer == ck.trailer);
    REQUIRE(back.tensors.size() == ck.tensors.size());
    std::size_t total = 0;
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
        CHECK(back.tensors[i].name == ck.tensors[i].name);
        CHECK(back.tensors[i].dtype == ck.tensors[i].dtype);
        CHECK(back.tensors[i].shape == ck.tensors[i].shape);
        CHECK(back.tensors[i].values == ck.tensors[i].values);
        total += back.tensors[i].values.size();
    }
    CHECK(total == parameter_count(m));

    const auto restored = from_records<double>(back.tensors);
    for (std::size_t i = 1; i < ck.tensors.size(); ++i) {
        const auto& name = ck.tensors[i].name;
        CHECK(same(restored.at(name), p.at(name)));
    }

    {
        std::FILE* f = std::fopen(path.string().c_str(), "r+b");
        std::fputs("XXXX", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(read_checkpoint_file(path), FormatError);
    std::filesystem::remove(path);
}
