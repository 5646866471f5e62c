#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nextou/grapher_blocks.hpp"

namespace nextou {

/// U-shaped encoder-decoder configuration. Stage s has 2^s * base_channels
/// channels; its first convolution downsamples the axes flagged in
/// pool_flags[s].
struct NetworkConfig {
    Index spatial_rank = 3;
    Index in_channels = 1;
    Index base_channels = 24;
    Index num_conv_stages = 2;   // N1
    Index num_topo_stages = 3;   // N2
    std::vector<Shape> pool_flags;          // per encoder stage, entries in {0, 1}
    std::vector<Index> knn_schedule{4, 8, 16};
    Index window_size = 4;
    Index num_heads = 6;
    Index num_classes = 2;
    Index ffn_expansion = 4;
    /// Per topo stage P-Grapher pooling; empty means "pool everywhere except
    /// the final two topo stages".
    std::vector<bool> pgrapher_pool;
    bool decoder_topo = true;
    bool sw_shifted = true;
    /// Extra pair of convolutions at the deepest resolution; off by default,
    /// the deepest encoder stage already plays that role.
    bool bottleneck = false;
    Shape patch_size;  // input spatial extents; fixes the position embedding grid

    /// Full-size 3D configuration (48x192x192 patches, C=24, K=[4,8,16], 6 heads).
    static NetworkConfig btcv_3d();
    /// Full-size 2D configuration (384x384 patches, C=24, 4 heads).
    static NetworkConfig ravir_2d();

    Index num_stages() const { return num_conv_stages + num_topo_stages; }
    Index stage_channels(Index stage) const { return base_channels << stage; }
    /// The position embedding is added after the convolutions of this stage,
    /// right before the first EViG block (width 2^N1 * C); without topo stages
    /// it follows the last stage.
    Index embedding_stage() const { return num_topo_stages > 0 ? num_conv_stages : num_stages() - 1; }
    /// Spatial extents of the output of encoder stage `stage`.
    Shape stage_extents(Index stage) const;
    std::vector<bool> resolved_pgrapher_pool() const;

    /// Throws ConfigError naming the offending field or axis.
    void validate() const;
};

struct EncoderStage {
    std::vector<ConvNormAct> convs;
    std::optional<EViGBlockParams> topo;
};

struct DecoderStage {
    ConvTranspose up;
    std::vector<ConvNormAct> convs;
    std::optional<EViGBlockParams> topo;
};

class Network {
public:
    Network(NetworkConfig config, std::uint64_t seed);

    const NetworkConfig& config() const { return config_; }

    /// (batch, in_channels, patch...) -> logits (batch, num_classes, patch...).
    Var forward(const Var& x, const ForwardOptions& opts = {});

    /// Pointers into this object; re-collect after moving the network.
    ParameterSet parameters();
    Index parameter_count();
    std::vector<std::pair<std::string, Index>> parameter_breakdown();

    /// Sum of K-clamp warnings over all Grapher blocks.
    Index clamp_warnings() const;

private:
    NetworkConfig config_;
    std::vector<EncoderStage> encoder_;
    std::vector<ConvNormAct> bottleneck_;
    Var position_embedding_;
    std::vector<DecoderStage> decoder_;  // decoder_[s] rebuilds encoder stage s resolution
    PointwiseLinear head_;
};

Network build_network(const NetworkConfig& config, std::uint64_t seed = 0);

inline Var forward(Network& net, const Var& x, const ForwardOptions& opts = {}) { return net.forward(x, opts); }

}  // namespace nextou
