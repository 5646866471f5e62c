#include "nextou/grapher_blocks.hpp"

namespace nextou {

WindowLayout WindowLayout::make(Index batch, Index channels, const Shape& extents, Index window_size,
                                bool shifted) {
    if (window_size < 1) throw InvalidArgument("window size must be >= 1");
    if (extents.empty()) throw InvalidArgument("window layout needs at least one spatial axis");
    WindowLayout l;
    l.window_size = window_size;
    l.shifted = shifted;
    l.batch = batch;
    l.channels = channels;
    l.extents = extents;
    l.num_windows = 1;
    l.tokens_per_window = 1;
    for (Index e : extents) {
        if (e < 1) throw InvalidArgument("window layout: spatial extents must be >= 1");
        const Index count = (e + window_size - 1) / window_size;
        l.windows_per_axis.push_back(count);
        l.padded_extents.push_back(count * window_size);
        l.shift.push_back(shifted ? (window_size + 1) / 2 : 0);
        l.num_windows *= count;
        l.tokens_per_window *= window_size;
    }
    return l;
}

std::vector<Index> WindowLayout::token_sources() const {
    const std::size_t rank = extents.size();
    const Shape window_shape(rank, window_size);
    std::vector<Index> sources(static_cast<std::size_t>(num_windows * tokens_per_window));
    std::vector<Index> wc(rank), tc(rank), src(rank);
    for (Index w = 0; w < num_windows; ++w) {
        unravel(w, windows_per_axis, wc.data());
        for (Index t = 0; t < tokens_per_window; ++t) {
            unravel(t, window_shape, tc.data());
            bool inside = true;
            for (std::size_t a = 0; a < rank; ++a) {
                const Index p = wc[a] * window_size + tc[a];
                if (p >= extents[a]) {
                    inside = false;
                    break;
                }
                // Partitioning a map rolled by -shift: slot p reads x[p + shift].
                src[a] = (p + shift[a]) % extents[a];
            }
            sources[static_cast<std::size_t>(w * tokens_per_window + t)] = inside ? ravel(src.data(), extents) : -1;
        }
    }
    return sources;
}

std::vector<Index> window_partition_index(const WindowLayout& l) {
    const auto sources = l.token_sources();
    const Index s = shape_numel(l.extents);
    const Index slots = l.num_windows * l.tokens_per_window;
    std::vector<Index> index(static_cast<std::size_t>(l.batch * slots * l.channels));
    for (Index b = 0; b < l.batch; ++b) {
        for (Index slot = 0; slot < slots; ++slot) {
            const Index src = sources[static_cast<std::size_t>(slot)];
            for (Index c = 0; c < l.channels; ++c) {
                index[static_cast<std::size_t>((b * slots + slot) * l.channels + c)] =
                    src < 0 ? -1 : (b * l.channels + c) * s + src;
            }
        }
    }
    return index;
}

std::vector<Index> window_reverse_index(const WindowLayout& l) {
    const auto sources = l.token_sources();
    const Index s = shape_numel(l.extents);
    const Index slots = l.num_windows * l.tokens_per_window;
    std::vector<Index> slot_of(static_cast<std::size_t>(s), -1);
    for (Index slot = 0; slot < slots; ++slot) {
        const Index src = sources[static_cast<std::size_t>(slot)];
        if (src >= 0) slot_of[static_cast<std::size_t>(src)] = slot;
    }
    std::vector<Index> index(static_cast<std::size_t>(l.batch * l.channels * s));
    for (Index b = 0; b < l.batch; ++b) {
        for (Index c = 0; c < l.channels; ++c) {
            for (Index p = 0; p < s; ++p) {
                index[static_cast<std::size_t>((b * l.channels + c) * s + p)] =
                    (b * slots + slot_of[static_cast<std::size_t>(p)]) * l.channels + c;
            }
        }
    }
    return index;
}

std::vector<std::uint8_t> window_validity(const WindowLayout& l) {
    const auto sources = l.token_sources();
    std::vector<std::uint8_t> valid;
    valid.reserve(static_cast<std::size_t>(l.batch) * sources.size());
    for (Index b = 0; b < l.batch; ++b) {
        for (Index src : sources) valid.push_back(src >= 0 ? 1 : 0);
    }
    return valid;
}

Var window_partition(const Var& fmap, const WindowLayout& layout) {
    Shape expected{layout.batch, layout.channels};
    expected.insert(expected.end(), layout.extents.begin(), layout.extents.end());
    if (fmap.shape() != expected) {
        throw InvalidArgument("window_partition: map " + shape_to_string(fmap.shape()) +
                              " inconsistent with layout " + shape_to_string(expected));
    }
    auto index = std::make_shared<const std::vector<Index>>(window_partition_index(layout));
    return gather(fmap, index, {layout.windowed_batch(), layout.tokens_per_window, layout.channels});
}

Var window_reverse(const Var& windowed, const WindowLayout& layout) {
    const Shape expected{layout.windowed_batch(), layout.tokens_per_window, layout.channels};
    if (windowed.shape() != expected) {
        throw InvalidArgument("window_reverse: windowed shape " + shape_to_string(windowed.shape()) +
                              " inconsistent with layout " + shape_to_string(expected));
    }
    Shape shape{layout.batch, layout.channels};
    shape.insert(shape.end(), layout.extents.begin(), layout.extents.end());
    auto index = std::make_shared<const std::vector<Index>>(window_reverse_index(layout));
    return gather(windowed, index, shape);
}

PoolRecord pool_geometry(const Shape& fmap_shape) {
    if (fmap_shape.size() < 3) throw InvalidArgument("max_pool: expected (batch, channels, spatial...)");
    PoolRecord rec;
    rec.batch = fmap_shape[0];
    rec.channels = fmap_shape[1];
    rec.pre_pool_extents = spatial_extents(fmap_shape);
    for (std::size_t a = 0; a < rec.pre_pool_extents.size(); ++a) {
        const Index e = rec.pre_pool_extents[a];
        if (e < 2) {
            throw InvalidArgument("max_pool: spatial axis " + std::to_string(a) + " has extent " +
                                  std::to_string(e) + " < 2");
        }
        rec.pooled_extents.push_back(e / 2);
    }
    return rec;
}

std::vector<Index> PoolRecord::full_indices() const {
    const Index sp = shape_numel(pooled_extents);
    const Index si = shape_numel(pre_pool_extents);
    std::vector<Index> full(argmax_indices.size());
    for (std::size_t i = 0; i < full.size(); ++i) {
        const Index bc = static_cast<Index>(i) / sp;
        full[i] = bc * si + argmax_indices[i];
    }
    return full;
}

void check_pool_record(const Shape& pooled_shape, const PoolRecord& record) {
    Shape expected{record.batch, record.channels};
    expected.insert(expected.end(), record.pooled_extents.begin(), record.pooled_extents.end());
    if (pooled_shape != expected) {
        throw CorruptedRecord("pool record expects pooled shape " + shape_to_string(expected) + ", got " +
                              shape_to_string(pooled_shape));
    }
    if (static_cast<Index>(record.argmax_indices.size()) != shape_numel(expected)) {
        throw CorruptedRecord("pool record holds " + std::to_string(record.argmax_indices.size()) +
                              " indices for " + std::to_string(shape_numel(expected)) + " pooled values");
    }
    const Index si = shape_numel(record.pre_pool_extents);
    for (Index idx : record.argmax_indices) {
        if (idx < 0 || idx >= si) {
            throw CorruptedRecord("pool record index " + std::to_string(idx) + " outside pre-pool extents " +
                                  shape_to_string(record.pre_pool_extents));
        }
    }
}

Var max_pool(const Var& fmap, PoolRecord& record) {
    auto [pooled, rec] = max_pool_with_indices(fmap.value());
    auto index = std::make_shared<const std::vector<Index>>(rec.full_indices());
    record = std::move(rec);
    return gather(fmap, index, pooled.shape());
}

Var max_unpool(const Var& pooled, const PoolRecord& record) {
    check_pool_record(pooled.shape(), record);
    Shape shape{record.batch, record.channels};
    shape.insert(shape.end(), record.pre_pool_extents.begin(), record.pre_pool_extents.end());
    auto index = std::make_shared<const std::vector<Index>>(record.full_indices());
    return scatter(pooled, index, shape);
}

GrapherParams GrapherParams::create(Index channels, Index num_heads, NormKind kind, Rng& rng) {
    GrapherParams p;
    p.fc1 = PointwiseLinear::create(channels, channels, rng);
    p.fc1_norm = Norm::create(channels, kind);
    p.conv = GraphConvParams::create(channels, 2 * channels, num_heads, kind, rng);
    p.conv_norm = Norm::create(2 * channels, kind);
    p.fc2 = PointwiseLinear::create(2 * channels, channels, rng);
    p.fc2_norm = Norm::create(channels, kind, /*zero_affine=*/true);
    return p;
}

void GrapherParams::collect(ParameterSet& set, const std::string& prefix) {
    fc1.collect(set, prefix + ".fc1");
    fc1_norm.collect(set, prefix + ".fc1_norm");
    conv.collect(set, prefix + ".dgc");
    conv_norm.collect(set, prefix + ".dgc_norm");
    fc2.collect(set, prefix + ".fc2");
    fc2_norm.collect(set, prefix + ".fc2_norm");
}

FfnParams FfnParams::create(Index channels, Index expansion_ratio, Rng& rng) {
    FfnParams p;
    p.fc1 = PointwiseLinear::create(channels, expansion_ratio * channels, rng);
    p.norm1 = Norm::create(expansion_ratio * channels, NormKind::instance);
    p.fc2 = PointwiseLinear::create(expansion_ratio * channels, channels, rng);
    p.norm2 = Norm::create(channels, NormKind::instance, /*zero_affine=*/true);
    return p;
}

void FfnParams::collect(ParameterSet& set, const std::string& prefix) {
    fc1.collect(set, prefix + ".fc1");
    norm1.collect(set, prefix + ".norm1");
    fc2.collect(set, prefix + ".fc2");
    norm2.collect(set, prefix + ".norm2");
}

namespace {

Var graph_update_on_grid(const Var& grid, GrapherParams& params, Index k, const ForwardOptions& opts) {
    const Shape extents = spatial_extents(grid.shape());
    Var tokens = to_tokens(grid);
    const Index n = tokens.value().dim(1);
    params.stats.last_token_count = n;
    PatchGraph graph;
    if (k < n) {
        graph = knn_graph(tokens.value(), k);
    } else {
        graph = knn_graph_masked(tokens.value(), k, std::vector<std::uint8_t>(
                                                        static_cast<std::size_t>(tokens.value().dim(0) * n), 1));
        params.stats.clamp_warnings += graph.clamped_items;
    }
    Var y = from_tokens(max_relative_conv(tokens, graph, params.conv), extents);
    return gelu(params.conv_norm(y, opts.training));
}

}  // namespace

Var p_grapher(const Var& fmap, GrapherParams& params, Index k, bool do_pool, const ForwardOptions& opts) {
    Var x = params.fc1_norm(params.fc1(fmap), opts.training);
    PoolRecord record;
    if (do_pool) x = max_pool(x, record);
    Var y = graph_update_on_grid(x, params, k, opts);
    y = params.fc2_norm(params.fc2(y), opts.training);
    return do_pool ? max_unpool(y, record) : y;
}

Var sw_grapher(const Var& fmap, GrapherParams& params, Index k, Index window_size, bool shifted,
               const ForwardOptions& opts) {
    Var x = params.fc1_norm(params.fc1(fmap), opts.training);
    const Shape extents = spatial_extents(x.shape());
    const WindowLayout layout = WindowLayout::make(x.value().dim(0), x.value().dim(1), extents, window_size, shifted);
    Var windows = window_partition(x, layout);
    params.stats.last_token_count = layout.tokens_per_window;
    const PatchGraph graph = knn_graph_masked(windows.value(), k, window_validity(layout));
    params.stats.clamp_warnings += graph.clamped_items;
    Var y = max_relative_conv(windows, graph, params.conv);
    WindowLayout out_layout = layout;
    out_layout.channels = params.conv.out_dim;
    y = window_reverse(y, out_layout);
    y = gelu(params.conv_norm(y, opts.training));
    return params.fc2_norm(params.fc2(y), opts.training);
}

Var ffn(const Var& fmap, FfnParams& params, const ForwardOptions& opts) {
    Var h = gelu(params.norm1(params.fc1(fmap), opts.training));
    return params.norm2(params.fc2(h), opts.training);
}

EViGBlockParams EViGBlockParams::create(Index channels, Index num_heads, Index k, Index window_size, bool pool,
                                        bool shifted, Index ffn_expansion, Rng& rng) {
    EViGBlockParams p;
    p.pool_grapher = GrapherParams::create(channels, num_heads, NormKind::instance, rng);
    p.ffn1 = FfnParams::create(channels, ffn_expansion, rng);
    p.window_grapher = GrapherParams::create(channels, num_heads, NormKind::batch, rng);
    p.ffn2 = FfnParams::create(channels, ffn_expansion, rng);
    p.k = k;
    p.window_size = window_size;
    p.pool = pool;
    p.shifted = shifted;
    return p;
}

void EViGBlockParams::collect(ParameterSet& set, const std::string& prefix) {
    pool_grapher.collect(set, prefix + ".p_grapher");
    ffn1.collect(set, prefix + ".ffn1");
    window_grapher.collect(set, prefix + ".sw_grapher");
    ffn2.collect(set, prefix + ".ffn2");
}

Var evig_block_pair(const Var& z, EViGBlockParams& params, const ForwardOptions& opts) {
    Var zh = add(p_grapher(z, params.pool_grapher, params.k, params.pool, opts), z);
    Var zl = add(ffn(zh, params.ffn1, opts), zh);
    Var zh1 = add(sw_grapher(zl, params.window_grapher, params.k, params.window_size, params.shifted, opts), zl);
    return add(ffn(zh1, params.ffn2, opts), zh1);
}

}  // namespace nextou
