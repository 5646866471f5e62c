#include <doctest.h>

#include <random>

#include "nextou/gradcheck.hpp"
#include "nextou/ops.hpp"
#include "oracles.hpp"

using namespace nextou;

TEST_CASE("conv3 matches the loop reference in 1D, 2D and 3D with strides") {
    std::mt19937_64 rng(1);
    for (const auto& [shape, stride] : std::vector<std::pair<Shape, Shape>>{
             {{2, 3, 9}, {1}}, {{1, 2, 7, 6}, {2, 1}}, {{1, 2, 5, 4, 6}, {1, 2, 2}}}) {
        const Index rank = static_cast<Index>(shape.size()) - 2;
        Index taps = 1;
        for (Index a = 0; a < rank; ++a) taps *= 3;
        const Tensor x = oracle::random_tensor(shape, rng);
        const Tensor w = oracle::random_tensor({4, shape[1] * taps}, rng);
        const Tensor b = oracle::random_tensor({4}, rng);
        const Tensor got = conv3(Var(x), Var(w), Var(b), stride).value();
        const Tensor want = oracle::conv3(x, w, b, stride);
        REQUIRE(got.shape() == want.shape());
        CHECK((got.data() - want.data()).abs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("conv_transpose places each input at stride * i + tap") {
    std::mt19937_64 rng(2);
    const Tensor x = oracle::random_tensor({1, 2, 3, 2}, rng);
    const Tensor w = oracle::random_tensor({2, 3 * 4}, rng);
    const Tensor b = oracle::random_tensor({3}, rng);
    const Tensor y = conv_transpose(Var(x), Var(w), Var(b), {2, 2}).value();
    REQUIRE(y.shape() == Shape{1, 3, 6, 4});
    for (Index co = 0; co < 3; ++co) {
        for (Index oy = 0; oy < 6; ++oy) {
            for (Index ox = 0; ox < 4; ++ox) {
                const Index iy = oy / 2, ix = ox / 2, tap = (oy % 2) * 2 + ox % 2;
                double want = b[co];
                for (Index ci = 0; ci < 2; ++ci) want += w[ci * 12 + co * 4 + tap] * x[ci * 6 + iy * 2 + ix];
                CHECK(y[co * 24 + oy * 4 + ox] == doctest::Approx(want).epsilon(1e-13));
            }
        }
    }
}

TEST_CASE("instance norm gives zero mean and unit variance per item and channel") {
    std::mt19937_64 rng(3);
    const Tensor x = oracle::random_tensor({2, 3, 5, 5}, rng, -4.0, 9.0);
    const Var y = instance_norm(Var(x), Var(Tensor::constant({3}, 1.0)), Var(Tensor({3})), 0.0);
    for (Index bc = 0; bc < 6; ++bc) {
        const auto seg = y.value().data().segment(bc * 25, 25);
        CHECK(std::abs(seg.mean()) < 1e-12);
        CHECK(std::abs((seg - seg.mean()).square().mean() - 1.0) < 1e-10);
    }
}

TEST_CASE("batch norm uses running statistics in eval mode") {
    std::mt19937_64 rng(4);
    const Tensor x = oracle::random_tensor({4, 2, 3}, rng, 1.0, 3.0);
    Tensor rm({2}), rv = Tensor::constant({2}, 1.0);
    batch_norm(Var(x), Var(Tensor::constant({2}, 1.0)), Var(Tensor({2})), rm, rv, true);
    CHECK(rm[0] > 0.0);
    const Tensor before = rm;
    const Var y = batch_norm(Var(x), Var(Tensor::constant({2}, 1.0)), Var(Tensor({2})), rm, rv, false);
    CHECK(rm == before);
    CHECK(y.value()[0] == doctest::Approx((x[0] - rm[0]) / std::sqrt(rv[0] + 1e-5)));
}

TEST_CASE("softmax sums to one over channels") {
    std::mt19937_64 rng(5);
    const Tensor x = oracle::random_tensor({2, 4, 3, 3}, rng, -30.0, 30.0);
    const Tensor p = softmax_channels(Var(x)).value();
    for (Index b = 0; b < 2; ++b) {
        for (Index s = 0; s < 9; ++s) {
            double total = 0.0;
            for (Index k = 0; k < 4; ++k) total += p[(b * 4 + k) * 9 + s];
            CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("tokens and feature maps convert both ways") {
    std::mt19937_64 rng(6);
    const Tensor x = oracle::random_tensor({2, 3, 4, 5}, rng);
    const Var t = to_tokens(Var(x));
    CHECK(t.shape() == Shape{2, 20, 3});
    CHECK(t.value()[(1 * 20 + 7) * 3 + 2] == x[(1 * 3 + 2) * 20 + 7]);
    CHECK(from_tokens(t, {4, 5}).value() == x);
}

TEST_CASE("op gradients match finite differences") {
    std::mt19937_64 rng(7);
    const Tensor w3 = oracle::random_tensor({3, 2 * 9}, rng), b3 = oracle::random_tensor({3}, rng);
    const Tensor wt = oracle::random_tensor({2, 3 * 4}, rng), bt = oracle::random_tensor({3}, rng);
    const Tensor g = oracle::random_tensor({2}, rng), be = oracle::random_tensor({2}, rng);
    std::vector<std::pair<std::string, std::function<Var(const Var&)>>> ops{
        {"conv3", [&](const Var& x) { return conv3(x, Var(w3), Var(b3), {2, 1}); }},
        {"conv_transpose", [&](const Var& x) { return conv_transpose(x, Var(wt), Var(bt), {2, 2}); }},
        {"instance_norm", [&](const Var& x) { return instance_norm(x, Var(g), Var(be)); }},
        {"gelu", [](const Var& x) { return gelu(x); }},
        {"leaky_relu", [](const Var& x) { return leaky_relu(x); }},
        {"softmax", [](const Var& x) { return softmax_channels(x); }},
        {"tokens", [](const Var& x) { return from_tokens(to_tokens(x), {5, 4}); }},
        {"concat", [](const Var& x) { return concat_channels(x, scale(x, -2.0)); }},
    };
    const Tensor x = tie_free_input({2, 2, 5, 4}, 3);
    for (const auto& [name, f] : ops) {
        const GradcheckReport r = gradcheck_function(name, f, x, {}, 1e-6);
        INFO(r.to_json());
        CHECK(r.passed);
    }
}

TEST_CASE("no-grad mode records no graph") {
    const Var p = Var::parameter(Tensor::constant({3}, 2.0));
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        const Var y = mul(p, p);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
    backward(sum(mul(p, p)));
    CHECK(p.grad()[0] == 4.0);
}
