#include "nextou/network.hpp"

#include <cassert>

namespace nextou {

namespace {

const char* axis_name(Index rank, Index axis) {
    static const char* names3[] = {"d", "h", "w"};
    static const char* names2[] = {"h", "w"};
    return rank == 3 ? names3[axis] : names2[axis];
}

Shape stride_of(const Shape& flags) {
    Shape stride(flags.size());
    for (std::size_t a = 0; a < flags.size(); ++a) stride[a] = flags[a] ? 2 : 1;
    return stride;
}

}  // namespace

NetworkConfig NetworkConfig::btcv_3d() {
    NetworkConfig c;
    c.spatial_rank = 3;
    c.base_channels = 24;
    c.num_conv_stages = 2;
    c.num_topo_stages = 3;
    c.pool_flags = {{0, 0, 0}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {0, 1, 1}};
    c.knn_schedule = {4, 8, 16};
    c.num_heads = 6;
    c.num_classes = 14;
    c.patch_size = {48, 192, 192};
    return c;
}

NetworkConfig NetworkConfig::ravir_2d() {
    NetworkConfig c;
    c.spatial_rank = 2;
    c.base_channels = 24;
    c.num_conv_stages = 2;
    c.num_topo_stages = 3;
    c.pool_flags = {{0, 0}, {1, 1}, {1, 1}, {1, 1}, {1, 1}};
    c.knn_schedule = {4, 8, 16};
    c.num_heads = 4;
    c.num_classes = 3;
    c.patch_size = {384, 384};
    return c;
}

Shape NetworkConfig::stage_extents(Index stage) const {
    Shape ext = patch_size;
    for (Index s = 0; s <= stage; ++s) {
        for (Index a = 0; a < spatial_rank; ++a) {
            if (pool_flags[s][a]) ext[a] /= 2;
        }
    }
    return ext;
}

std::vector<bool> NetworkConfig::resolved_pgrapher_pool() const {
    if (!pgrapher_pool.empty()) return pgrapher_pool;
    std::vector<bool> pool(static_cast<std::size_t>(num_topo_stages), false);
    for (Index t = 0; t + 2 < num_topo_stages; ++t) pool[t] = true;
    return pool;
}

void NetworkConfig::validate() const {
    if (spatial_rank != 2 && spatial_rank != 3) throw ConfigError("spatial_rank must be 2 or 3");
    if (in_channels < 1 || base_channels < 1 || num_classes < 2) {
        throw ConfigError("in_channels, base_channels must be >= 1 and num_classes >= 2");
    }
    if (num_conv_stages < 1) throw ConfigError("num_conv_stages (N1) must be >= 1");
    if (num_topo_stages < 0) throw ConfigError("num_topo_stages (N2) must be >= 0");
    if (static_cast<Index>(pool_flags.size()) != num_stages()) {
        throw ConfigError("pool_flags needs " + std::to_string(num_stages()) + " entries (N1 + N2), got " +
                          std::to_string(pool_flags.size()));
    }
    for (std::size_t s = 0; s < pool_flags.size(); ++s) {
        if (static_cast<Index>(pool_flags[s].size()) != spatial_rank) {
            throw ConfigError("pool_flags[" + std::to_string(s) + "] must have one flag per spatial axis");
        }
        for (Index f : pool_flags[s]) {
            if (f != 0 && f != 1) throw ConfigError("pool_flags entries must be 0 or 1");
        }
    }
    if (static_cast<Index>(knn_schedule.size()) != num_topo_stages) {
        throw ConfigError("knn_schedule length " + std::to_string(knn_schedule.size()) +
                          " must equal num_topo_stages " + std::to_string(num_topo_stages));
    }
    for (Index k : knn_schedule) {
        if (k < 1) throw ConfigError("knn_schedule entries must be >= 1");
    }
    if (!pgrapher_pool.empty() && static_cast<Index>(pgrapher_pool.size()) != num_topo_stages) {
        throw ConfigError("pgrapher_pool must have one flag per topo stage");
    }
    if (window_size < 1 || ffn_expansion < 1 || num_heads < 1) {
        throw ConfigError("window_size, ffn_expansion and num_heads must be >= 1");
    }
    if (static_cast<Index>(patch_size.size()) != spatial_rank) {
        throw ConfigError("patch_size must list " + std::to_string(spatial_rank) + " extents");
    }
    for (Index a = 0; a < spatial_rank; ++a) {
        Index depth = 0;
        for (const Shape& f : pool_flags) depth += f[a];
        const Index factor = Index{1} << depth;
        if (patch_size[a] < factor || patch_size[a] % factor != 0) {
            throw ConfigError("axis " + std::string(axis_name(spatial_rank, a)) + ": extent " +
                              std::to_string(patch_size[a]) + " is not divisible by 2^" + std::to_string(depth) +
                              " (pooling depth on that axis)");
        }
    }
    const auto pool = resolved_pgrapher_pool();
    for (Index t = 0; t < num_topo_stages; ++t) {
        const Index s = num_conv_stages + t;
        if (stage_channels(s) % num_heads != 0) {
            throw ConfigError("stage " + std::to_string(s) + " width " + std::to_string(stage_channels(s)) +
                              " is not divisible by num_heads " + std::to_string(num_heads));
        }
        if (pool[t]) {
            const Shape ext = stage_extents(s);
            for (Index a = 0; a < spatial_rank; ++a) {
                if (ext[a] < 2) {
                    throw ConfigError("axis " + std::string(axis_name(spatial_rank, a)) + ": topo stage " +
                                      std::to_string(s) + " extent " + std::to_string(ext[a]) +
                                      " is too small for P-Grapher pooling");
                }
            }
        }
    }
}

Network::Network(NetworkConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const Index stages = config_.num_stages();
    const Index rank = config_.spatial_rank;
    const Shape unit(static_cast<std::size_t>(rank), 1);
    const auto pool = config_.resolved_pgrapher_pool();

    auto make_topo = [&](Index s) {
        const Index t = s - config_.num_conv_stages;
        return EViGBlockParams::create(config_.stage_channels(s), config_.num_heads, config_.knn_schedule[t],
                                       config_.window_size, pool[t], config_.sw_shifted, config_.ffn_expansion, rng);
    };

    for (Index s = 0; s < stages; ++s) {
        EncoderStage st;
        const Index in = s == 0 ? config_.in_channels : config_.stage_channels(s - 1);
        const Index out = config_.stage_channels(s);
        st.convs.push_back(ConvNormAct::create(in, out, stride_of(config_.pool_flags[s]), NormKind::instance, rng));
        st.convs.push_back(ConvNormAct::create(out, out, unit, NormKind::instance, rng));
        if (s >= config_.num_conv_stages) st.topo = make_topo(s);
        encoder_.push_back(std::move(st));
    }
    const Index deepest = config_.stage_channels(stages - 1);
    if (config_.bottleneck) {
        bottleneck_.push_back(ConvNormAct::create(deepest, deepest, unit, NormKind::instance, rng));
        bottleneck_.push_back(ConvNormAct::create(deepest, deepest, unit, NormKind::instance, rng));
    }

    Shape pos_shape{1, config_.stage_channels(config_.embedding_stage())};
    const Shape pos_ext = config_.stage_extents(config_.embedding_stage());
    pos_shape.insert(pos_shape.end(), pos_ext.begin(), pos_ext.end());
    position_embedding_ = Var::parameter(Tensor(pos_shape));

    decoder_.resize(static_cast<std::size_t>(std::max<Index>(stages - 1, 0)));
    for (Index s = stages - 2; s >= 0; --s) {
        DecoderStage& st = decoder_[static_cast<std::size_t>(s)];
        const Index w = config_.stage_channels(s);
        st.up = ConvTranspose::create(config_.stage_channels(s + 1), w, stride_of(config_.pool_flags[s + 1]), rng);
        st.convs.push_back(ConvNormAct::create(2 * w, w, unit, NormKind::instance, rng));
        st.convs.push_back(ConvNormAct::create(w, w, unit, NormKind::instance, rng));
        if (s >= config_.num_conv_stages && config_.decoder_topo) st.topo = make_topo(s);
    }
    head_ = PointwiseLinear::create(config_.stage_channels(0), config_.num_classes, rng);
}

Var Network::forward(const Var& x, const ForwardOptions& opts) {
    Shape expected{x.value().rank() > 0 ? x.value().dim(0) : 0, config_.in_channels};
    expected.insert(expected.end(), config_.patch_size.begin(), config_.patch_size.end());
    if (x.shape() != expected) {
        throw ConfigError("network input " + shape_to_string(x.shape()) + " incompatible with configured " +
                          shape_to_string(expected));
    }
    std::vector<Var> skips;
    Var h = x;
    for (Index s = 0; s < config_.num_stages(); ++s) {
        EncoderStage& st = encoder_[static_cast<std::size_t>(s)];
        for (ConvNormAct& conv : st.convs) h = conv(h, opts.training);
        if (s == config_.embedding_stage()) h = add_batch_broadcast(h, position_embedding_);
        if (st.topo) {
            // Token count N = prod(patch / 2^{running pooling depth}) at this stage.
            assert(spatial_extents(h.shape()) == config_.stage_extents(s));
            h = evig_block_pair(h, *st.topo, opts);
        }
        skips.push_back(h);
    }
    for (ConvNormAct& conv : bottleneck_) h = conv(h, opts.training);
    for (Index s = config_.num_stages() - 2; s >= 0; --s) {
        DecoderStage& st = decoder_[static_cast<std::size_t>(s)];
        h = concat_channels(skips[static_cast<std::size_t>(s)], st.up(h));
        for (ConvNormAct& conv : st.convs) h = conv(h, opts.training);
        if (st.topo) h = evig_block_pair(h, *st.topo, opts);
    }
    return head_(h);
}

ParameterSet Network::parameters() {
    ParameterSet set;
    for (std::size_t s = 0; s < encoder_.size(); ++s) {
        const std::string p = "encoder." + std::to_string(s);
        for (std::size_t i = 0; i < encoder_[s].convs.size(); ++i) {
            encoder_[s].convs[i].collect(set, p + ".conv" + std::to_string(i));
        }
        if (encoder_[s].topo) encoder_[s].topo->collect(set, p + ".evig");
    }
    for (std::size_t i = 0; i < bottleneck_.size(); ++i) bottleneck_[i].collect(set, "bottleneck.conv" + std::to_string(i));
    set.add("position_embedding", position_embedding_);
    for (std::size_t s = decoder_.size(); s-- > 0;) {
        const std::string p = "decoder." + std::to_string(s);
        decoder_[s].up.collect(set, p + ".up");
        for (std::size_t i = 0; i < decoder_[s].convs.size(); ++i) {
            decoder_[s].convs[i].collect(set, p + ".conv" + std::to_string(i));
        }
        if (decoder_[s].topo) decoder_[s].topo->collect(set, p + ".evig");
    }
    head_.collect(set, "head");
    return set;
}

Index Network::parameter_count() { return parameters().count(); }

std::vector<std::pair<std::string, Index>> Network::parameter_breakdown() {
    std::vector<std::pair<std::string, Index>> rows;
    const ParameterSet set = parameters();
    for (const ParameterRef& p : set.params()) {
        // Group by the first two name components, e.g. "encoder.3".
        std::string group = p.name.substr(0, p.name.find('.'));
        if (group == "encoder" || group == "decoder") {
            const auto dot = p.name.find('.', group.size() + 1);
            group = p.name.substr(0, dot);
        }
        if (rows.empty() || rows.back().first != group) rows.emplace_back(group, 0);
        rows.back().second += p.var->numel();
    }
    return rows;
}

Index Network::clamp_warnings() const {
    Index n = 0;
    auto add_block = [&n](const std::optional<EViGBlockParams>& b) {
        if (b) n += b->pool_grapher.stats.clamp_warnings + b->window_grapher.stats.clamp_warnings;
    };
    for (const auto& st : encoder_) add_block(st.topo);
    for (const auto& st : decoder_) add_block(st.topo);
    return n;
}

Network build_network(const NetworkConfig& config, std::uint64_t seed) { return Network(config, seed); }

}  // namespace nextou
