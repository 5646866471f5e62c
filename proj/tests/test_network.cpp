#include <doctest.h>

#include <random>

#include "nextou/network.hpp"
#include "oracles.hpp"

using namespace nextou;

namespace {

NetworkConfig toy_2d() {
    NetworkConfig c;
    c.spatial_rank = 2;
    c.base_channels = 8;
    c.num_conv_stages = 2;
    c.num_topo_stages = 2;
    c.pool_flags = {{0, 0}, {1, 1}, {1, 1}, {1, 1}};
    c.knn_schedule = {4, 8};
    c.num_heads = 4;
    c.num_classes = 3;
    c.patch_size = {32, 32};
    return c;
}

std::string config_error(const NetworkConfig& c) {
    try {
        c.validate();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

/// Random legal configuration with extents sized to its pooling depth.
NetworkConfig random_config(std::mt19937_64& rng) {
    NetworkConfig c;
    c.spatial_rank = 2 + static_cast<Index>(rng() % 2);
    c.base_channels = 4 << (rng() % 2);
    c.num_conv_stages = 1 + static_cast<Index>(rng() % 2);
    c.num_topo_stages = static_cast<Index>(rng() % 3);
    c.num_heads = 2;
    c.num_classes = 2 + static_cast<Index>(rng() % 3);
    c.window_size = 2 + static_cast<Index>(rng() % 3);
    c.decoder_topo = rng() % 2;
    c.sw_shifted = rng() % 2;
    c.pool_flags.clear();
    Shape depth(static_cast<std::size_t>(c.spatial_rank), 0);
    for (Index s = 0; s < c.num_stages(); ++s) {
        Shape f(static_cast<std::size_t>(c.spatial_rank), 0);
        if (s > 0) {
            for (auto& v : f) v = static_cast<Index>(rng() % 2);
        }
        for (std::size_t a = 0; a < f.size(); ++a) depth[a] += f[a];
        c.pool_flags.push_back(f);
    }
    c.knn_schedule.assign(static_cast<std::size_t>(c.num_topo_stages), 3);
    c.pgrapher_pool.assign(static_cast<std::size_t>(c.num_topo_stages), false);
    c.patch_size.clear();
    for (std::size_t a = 0; a < depth.size(); ++a) {
        // Two or three cells at the deepest level keeps pooled topo stages legal.
        c.patch_size.push_back((Index{1} << depth[a]) * (2 + static_cast<Index>(rng() % 2)));
    }
    if (c.spatial_rank == 3) {
        for (auto& e : c.patch_size) e = std::min<Index>(e, 16);
    }
    return c;
}

}  // namespace

TEST_CASE("network: 3D default layout scaled to 16x32x32 gives full-resolution logits") {
    NetworkConfig c = NetworkConfig::btcv_3d();
    c.patch_size = {16, 32, 32};
    c.num_classes = 5;
    Network net(c, 1);
    std::mt19937_64 rng(2);
    const Tensor x = oracle::random_tensor({1, 1, 16, 32, 32}, rng);
    NoGradGuard no_grad;
    CHECK(net.forward(Var(x), ForwardOptions{false}).shape() == Shape{1, 5, 16, 32, 32});
}

TEST_CASE("network: 2D 64x64 gives (B, c, 64, 64)") {
    NetworkConfig c = NetworkConfig::ravir_2d();
    c.patch_size = {64, 64};
    c.base_channels = 8;
    Network net(c, 3);
    std::mt19937_64 rng(4);
    const Tensor x = oracle::random_tensor({2, 1, 64, 64}, rng);
    NoGradGuard no_grad;
    CHECK(net.forward(Var(x), ForwardOptions{false}).shape() == Shape{2, 3, 64, 64});
}

TEST_CASE("network: default 3D parameter count is within 20% of 23.06M") {
    Network net(NetworkConfig::btcv_3d(), 0);
    const Index total = net.parameter_count();
    CHECK(double(total) > 0.8 * 23.06e6);
    CHECK(double(total) < 1.2 * 23.06e6);
    Index sum = 0;
    for (const auto& [group, n] : net.parameter_breakdown()) sum += n;
    CHECK(sum == total);
}

TEST_CASE("network: position embedding follows the N1 conv stages at 2^N1 C width") {
    const NetworkConfig c = NetworkConfig::btcv_3d();
    Network net(c, 0);
    Index embed = -1;
    for (const auto& [group, n] : net.parameter_breakdown()) {
        if (group == "position_embedding") embed = n;
    }
    const Shape ext = c.stage_extents(c.num_conv_stages);
    CHECK(embed == (c.base_channels << c.num_conv_stages) * shape_numel(ext));
}

TEST_CASE("network: stage widths double per pooled stage") {
    const NetworkConfig c = NetworkConfig::btcv_3d();
    for (Index s = 0; s < c.num_stages(); ++s) CHECK(c.stage_channels(s) == c.base_channels * (Index{1} << s));
}

TEST_CASE("network: eval mode is deterministic") {
    Network net(toy_2d(), 5);
    std::mt19937_64 rng(6);
    const Tensor x = oracle::random_tensor({1, 1, 32, 32}, rng);
    NoGradGuard no_grad;
    const Tensor a = net.forward(Var(x), ForwardOptions{false}).value();
    const Tensor b = net.forward(Var(x), ForwardOptions{false}).value();
    CHECK(a == b);
}

TEST_CASE("network: permuting batch items permutes logits in eval mode") {
    Network net(toy_2d(), 7);
    // Warm the batch-norm running statistics away from their initial values.
    std::mt19937_64 rng(8);
    for (int i = 0; i < 2; ++i) net.forward(Var(oracle::random_tensor({2, 1, 32, 32}, rng)), ForwardOptions{true});
    const Tensor x = oracle::random_tensor({3, 1, 32, 32}, rng);
    Tensor xp(x.shape());
    const Index s = 32 * 32;
    const std::vector<Index> perm{2, 0, 1};
    for (Index b = 0; b < 3; ++b) xp.data().segment(b * s, s) = x.data().segment(perm[b] * s, s);
    NoGradGuard no_grad;
    const Tensor y = net.forward(Var(x), ForwardOptions{false}).value();
    const Tensor yp = net.forward(Var(xp), ForwardOptions{false}).value();
    const Index per = 3 * s;
    for (Index b = 0; b < 3; ++b) {
        CHECK((yp.data().segment(b * per, per) - y.data().segment(perm[b] * per, per)).abs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("network: logits keep the input extents for random legal configs") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 12; ++trial) {
        const NetworkConfig c = random_config(rng);
        const std::string err = config_error(c);
        INFO("config error: " << err);
        REQUIRE(err.empty());
        Network net(c, rng());
        Shape shape{1, 1};
        shape.insert(shape.end(), c.patch_size.begin(), c.patch_size.end());
        NoGradGuard no_grad;
        const Var y = net.forward(Var(oracle::random_tensor(shape, rng)), ForwardOptions{trial % 2 == 0});
        Shape want{1, c.num_classes};
        want.insert(want.end(), c.patch_size.begin(), c.patch_size.end());
        CHECK(y.shape() == want);
        CHECK(y.value().data().allFinite());
    }
}

TEST_CASE("network: extents not divisible by the pooling depth name the axis") {
    NetworkConfig c = NetworkConfig::btcv_3d();
    c.patch_size = {48, 190, 192};
    const std::string err = config_error(c);
    CHECK(err.find("axis h") != std::string::npos);
    CHECK_THROWS_AS(Network(c, 0), ConfigError);
    c.patch_size = {20, 192, 192};
    CHECK(config_error(c).find("axis d") != std::string::npos);
}

TEST_CASE("network: malformed configs are rejected") {
    NetworkConfig c = toy_2d();
    c.pool_flags.pop_back();
    CHECK_FALSE(config_error(c).empty());
    c = toy_2d();
    c.knn_schedule = {4};
    CHECK_FALSE(config_error(c).empty());
    c = toy_2d();
    c.num_heads = 3;
    CHECK(config_error(c).find("num_heads") != std::string::npos);
    c = toy_2d();
    c.pool_flags[1] = {2, 1};
    CHECK_FALSE(config_error(c).empty());
}

TEST_CASE("network: input extents must match the configured patch") {
    Network net(toy_2d(), 10);
    CHECK_THROWS_AS(net.forward(Var(Tensor({1, 1, 16, 32}))), ConfigError);
    CHECK_THROWS_AS(net.forward(Var(Tensor({1, 2, 32, 32}))), ConfigError);
}
