#include <doctest.h>

#include <random>

#include "nextou/graph_core.hpp"
#include "nextou/ops.hpp"
#include "oracles.hpp"

using namespace nextou;

namespace {

std::vector<std::vector<std::vector<Index>>> lists_of(const PatchGraph& g) {
    std::vector<std::vector<std::vector<Index>>> out(g.batch, std::vector<std::vector<Index>>(g.num_nodes));
    for (Index b = 0; b < g.batch; ++b) {
        for (Index i = 0; i < g.num_nodes; ++i) {
            for (Index s = 0; s < g.k; ++s) out[b][i].push_back(g.source(b, i, s));
        }
    }
    return out;
}

}  // namespace

TEST_CASE("knn: two nodes point at each other") {
    const Tensor x = Tensor::from_values({1, 2, 1}, {0.0, 5.0});
    const PatchGraph g = knn_graph(x, 1);
    CHECK(g.source(0, 0, 0) == 1);
    CHECK(g.source(0, 1, 0) == 0);
}

TEST_CASE("knn: points on a line") {
    const Tensor x = Tensor::from_values({1, 5, 1}, {0, 1, 2, 3, 4});
    const PatchGraph g = knn_graph(x, 2);
    std::vector<Index> n{g.source(0, 2, 0), g.source(0, 2, 1)};
    std::sort(n.begin(), n.end());
    CHECK(n == std::vector<Index>{1, 3});
    // Node 0 has neighbors 1 (d=1) then 2 (d=4).
    CHECK(g.source(0, 0, 0) == 1);
    CHECK(g.source(0, 0, 1) == 2);
}

TEST_CASE("knn: equal distances go to the lowest index") {
    // Node 0 sits at distance 1 from nodes 1..4.
    const Tensor x = Tensor::from_values({1, 5, 2}, {0, 0, 1, 0, 0, 1, -1, 0, 0, -1});
    const PatchGraph g = knn_graph(x, 2);
    CHECK(g.source(0, 0, 0) == 1);
    CHECK(g.source(0, 0, 1) == 2);
}

TEST_CASE("knn: 64 random nodes in 16-d match the exhaustive sort") {
    std::mt19937_64 rng(11);
    const Tensor x = oracle::random_tensor({2, 64, 16}, rng);
    const PatchGraph g = knn_graph(x, 8);
    const auto lists = lists_of(g);
    for (Index b = 0; b < 2; ++b) CHECK(lists[b] == oracle::knn(x, b, 8));
}

TEST_CASE("knn: random sizes match the exhaustive sort (property)") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        const Index n = 2 + static_cast<Index>(rng() % 120);
        const Index d = 1 + static_cast<Index>(rng() % 32);
        const Index k = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(std::min<Index>(n - 1, 16)));
        const Tensor x = oracle::random_tensor({1, n, d}, rng);
        const PatchGraph g = knn_graph(x, k);
        REQUIRE(lists_of(g)[0] == oracle::knn(x, 0, k));
        // Invariants: exactly K in-edges, no self edges, indices in range.
        for (Index i = 0; i < n; ++i) {
            for (Index s = 0; s < k; ++s) {
                const Index j = g.source(0, i, s);
                CHECK(j != i);
                CHECK(j >= 0);
                CHECK(j < n);
            }
        }
    }
}

TEST_CASE("knn: repeated calls give identical edges") {
    std::mt19937_64 rng(13);
    const Tensor x = oracle::random_tensor({3, 40, 6}, rng);
    CHECK(knn_graph(x, 5).neighbors == knn_graph(x, 5).neighbors);
}

TEST_CASE("knn: K >= N is rejected with both values in the message") {
    const Tensor x({1, 4, 3});
    try {
        knn_graph(x, 4);
        FAIL("expected InvalidArgument");
    } catch (const InvalidArgument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("K=4") != std::string::npos);
        CHECK(msg.find("N=4") != std::string::npos);
    }
    CHECK_THROWS_AS(knn_graph(x, 0), InvalidArgument);
}

TEST_CASE("knn: non-finite features are rejected") {
    Tensor x({1, 4, 2});
    x[3] = std::nan("");
    CHECK_THROWS_AS(knn_graph(x, 2), InvalidArgument);
}

TEST_CASE("knn masked: invalid nodes are never sources and K is clamped") {
    std::mt19937_64 rng(14);
    const Tensor x = oracle::random_tensor({2, 6, 3}, rng);
    std::vector<std::uint8_t> valid{1, 1, 0, 1, 0, 0, 1, 1, 1, 1, 1, 1};
    const PatchGraph g = knn_graph_masked(x, 4, valid);
    CHECK(g.clamped_items == 1);
    for (Index i = 0; i < 6; ++i) {
        Index used = 0;
        for (Index s = 0; s < 4; ++s) {
            const Index j = g.source(0, i, s);
            if (j < 0) continue;
            ++used;
            CHECK(valid[j] == 1);
            CHECK(j != i);
        }
        if (valid[i]) CHECK(used == 2);
    }
    // The fully valid item is not clamped: 4 real neighbors each.
    for (Index i = 0; i < 6; ++i) {
        for (Index s = 0; s < 4; ++s) CHECK(g.source(1, i, s) >= 0);
    }
}

TEST_CASE("max-relative conv: identical features give a zero aggregate") {
    const Tensor x = Tensor::constant({1, 5, 4}, 0.7);
    const PatchGraph g = knn_graph(x, 2);
    const Var m = max_relative_aggregate(Var(x), g);
    CHECK((m.value().data() == 0.0).all());
}

TEST_CASE("max-relative conv: matches a loop reference on a random 8-node graph") {
    std::mt19937_64 rng(21);
    Rng prng(22);
    for (Index heads : {1, 2, 4}) {
        const Tensor x = oracle::random_tensor({2, 8, 8}, rng);
        GraphConvParams p = GraphConvParams::create(8, 12, heads, NormKind::instance, prng);
        p.bias.mutable_value() = oracle::random_tensor({12}, rng);
        const PatchGraph g = knn_graph(x, 3);
        const Tensor out = max_relative_conv(Var(x), g, p).value();
        const Tensor ref = oracle::max_relative_conv(x, lists_of(g), p.weight.value(), p.bias.value(), heads);
        CHECK(out.shape() == Shape{2, 8, 12});
        CHECK((out.data() - ref.data()).abs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("max-relative conv: one head equals h heads with block-diagonal weights") {
    std::mt19937_64 rng(23);
    Rng prng(24);
    const Index din = 4, dout = 4, heads = 2;
    const Tensor x = oracle::random_tensor({1, 2, din}, rng);
    const PatchGraph g = knn_graph(x, 1);
    GraphConvParams multi = GraphConvParams::create(din, dout, heads, NormKind::instance, prng);
    GraphConvParams single = GraphConvParams::create(din, dout, 1, NormKind::instance, prng);
    // Single-head weight (dout, 2*din) over concat(x, m); zero outside each head's block.
    single.weight.mutable_value() = Tensor({1, dout, 2 * din});
    const Index dh = din / heads, oh = dout / heads;
    for (Index h = 0; h < heads; ++h) {
        for (Index o = 0; o < oh; ++o) {
            for (Index f = 0; f < dh; ++f) {
                const double wx = multi.weight.value()[(h * oh + o) * 2 * dh + f];
                const double wm = multi.weight.value()[(h * oh + o) * 2 * dh + dh + f];
                single.weight.mutable_value()[(h * oh + o) * 2 * din + h * dh + f] = wx;
                single.weight.mutable_value()[(h * oh + o) * 2 * din + din + h * dh + f] = wm;
            }
        }
    }
    single.bias.mutable_value() = multi.bias.value();
    const Tensor a = max_relative_conv(Var(x), g, multi).value();
    const Tensor b = max_relative_conv(Var(x), g, single).value();
    CHECK((a.data() - b.data()).abs().maxCoeff() < 1e-14);
}

TEST_CASE("max-relative conv: node permutation permutes the output") {
    std::mt19937_64 rng(25);
    Rng prng(26);
    const Index n = 20;
    const Tensor x = oracle::random_tensor({1, n, 6}, rng);
    GraphConvParams p = GraphConvParams::create(6, 6, 3, NormKind::instance, prng);
    std::vector<Index> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor xp(x.shape());
    for (Index i = 0; i < n; ++i) {
        for (Index f = 0; f < 6; ++f) xp[i * 6 + f] = x[perm[i] * 6 + f];
    }
    const Tensor y = max_relative_conv(Var(x), knn_graph(x, 4), p).value();
    const Tensor yp = max_relative_conv(Var(xp), knn_graph(xp, 4), p).value();
    for (Index i = 0; i < n; ++i) {
        for (Index f = 0; f < 6; ++f) CHECK(yp[i * 6 + f] == doctest::Approx(y[perm[i] * 6 + f]).epsilon(1e-12));
    }
}

TEST_CASE("max-relative conv: mismatched dimensions are rejected") {
    Rng prng(27);
    GraphConvParams p = GraphConvParams::create(8, 8, 2, NormKind::instance, prng);
    const Tensor x({1, 5, 6});
    CHECK_THROWS_AS(max_relative_conv(Var(x), knn_graph(x, 2), p), InvalidArgument);
    CHECK_THROWS_AS(GraphConvParams::create(6, 8, 4, NormKind::instance, prng), InvalidArgument);
}
