#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nextou/graph_core.hpp"

namespace nextou {

// ---------------------------------------------------------------------------
// Window partitioning

/// Geometry of a (possibly shifted) partition of a feature map into
/// non-overlapping M^rank windows.
struct WindowLayout {
    Index window_size = 1;
    bool shifted = false;
    Index batch = 1;
    Index channels = 1;
    Shape extents;          // pre-padding spatial extents
    Shape shift;            // per-axis cyclic offset, ceil(M/2) when shifted
    Shape padded_extents;   // smallest multiples of M covering extents
    Shape windows_per_axis;
    Index num_windows = 0;       // N_w
    Index tokens_per_window = 0; // N_m = M^rank

    static WindowLayout make(Index batch, Index channels, const Shape& extents, Index window_size, bool shifted);

    Index windowed_batch() const { return batch * num_windows; }

    /// Flat spatial source of every (window, token) slot, -1 for padding.
    /// Slots of one batch item are ordered window-major, tokens row-major.
    std::vector<Index> token_sources() const;
};

/// Result of partitioning: nodes are (batch * N_w, N_m, channels) and
/// `valid[w * N_m + t]` is 0 for padded tokens.
template <typename Scalar>
struct WindowedNodes {
    BasicTensor<Scalar> nodes;
    WindowLayout layout;
    std::vector<std::uint8_t> valid;
};

/// Flat-index gather map from a (B, C, S) map into windowed token layout.
std::vector<Index> window_partition_index(const WindowLayout& layout);
/// Flat-index gather map from windowed token layout back to (B, C, S).
std::vector<Index> window_reverse_index(const WindowLayout& layout);
std::vector<std::uint8_t> window_validity(const WindowLayout& layout);

template <typename Scalar>
WindowedNodes<Scalar> window_partition(const BasicTensor<Scalar>& fmap, Index window_size, bool shifted) {
    if (fmap.rank() < 3) throw InvalidArgument("window_partition: expected (batch, channels, spatial...)");
    if (window_size < 1) throw InvalidArgument("window_partition: window size must be >= 1");
    WindowedNodes<Scalar> out;
    out.layout = WindowLayout::make(fmap.dim(0), fmap.dim(1), spatial_extents(fmap.shape()), window_size, shifted);
    const auto index = window_partition_index(out.layout);
    out.nodes = BasicTensor<Scalar>({out.layout.windowed_batch(), out.layout.tokens_per_window, fmap.dim(1)});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= 0) out.nodes[static_cast<Index>(i)] = fmap[index[i]];
    }
    out.valid = window_validity(out.layout);
    return out;
}

template <typename Scalar>
BasicTensor<Scalar> window_reverse(const BasicTensor<Scalar>& windowed, const WindowLayout& layout) {
    const Shape expected{layout.windowed_batch(), layout.tokens_per_window, layout.channels};
    if (windowed.shape() != expected) {
        throw InvalidArgument("window_reverse: windowed shape " + shape_to_string(windowed.shape()) +
                              " inconsistent with layout " + shape_to_string(expected));
    }
    Shape shape{layout.batch, layout.channels};
    shape.insert(shape.end(), layout.extents.begin(), layout.extents.end());
    BasicTensor<Scalar> out(shape);
    const auto index = window_reverse_index(layout);
    for (std::size_t i = 0; i < index.size(); ++i) out[static_cast<Index>(i)] = windowed[index[i]];
    return out;
}

Var window_partition(const Var& fmap, const WindowLayout& layout);
Var window_reverse(const Var& windowed, const WindowLayout& layout);

// ---------------------------------------------------------------------------
// Max pooling with indices (kernel 2, stride 2 on every spatial axis)

struct PoolRecord {
    Index batch = 0;
    Index channels = 0;
    Shape pre_pool_extents;
    Shape pooled_extents;
    /// (batch, channels, pooled voxels) flat spatial index of each maximum
    /// within pre_pool_extents.
    std::vector<Index> argmax_indices;

    /// Flat indices into the full (B, C, pre-pool S) map.
    std::vector<Index> full_indices() const;
};

PoolRecord pool_geometry(const Shape& fmap_shape);

template <typename Scalar>
std::pair<BasicTensor<Scalar>, PoolRecord> max_pool_with_indices(const BasicTensor<Scalar>& fmap) {
    PoolRecord rec = pool_geometry(fmap.shape());
    const Index rank = static_cast<Index>(rec.pre_pool_extents.size());
    const Index sp = shape_numel(rec.pooled_extents);
    const Index si = shape_numel(rec.pre_pool_extents);
    const Index taps = Index{1} << rank;
    Shape pooled_shape{rec.batch, rec.channels};
    pooled_shape.insert(pooled_shape.end(), rec.pooled_extents.begin(), rec.pooled_extents.end());
    BasicTensor<Scalar> pooled(pooled_shape);
    rec.argmax_indices.resize(static_cast<std::size_t>(rec.batch * rec.channels * sp));
    std::vector<Index> pc(static_cast<std::size_t>(rank)), src(static_cast<std::size_t>(rank));
    for (Index p = 0; p < sp; ++p) {
        unravel(p, rec.pooled_extents, pc.data());
        for (Index bc = 0; bc < rec.batch * rec.channels; ++bc) {
            const Scalar* plane = fmap.raw() + bc * si;
            Index best = -1;
            for (Index t = 0; t < taps; ++t) {
                for (Index a = 0; a < rank; ++a) src[a] = 2 * pc[a] + ((t >> (rank - 1 - a)) & 1);
                const Index flat = ravel(src.data(), rec.pre_pool_extents);
                if (best < 0 || plane[flat] > plane[best]) best = flat;
            }
            pooled[bc * sp + p] = plane[best];
            rec.argmax_indices[static_cast<std::size_t>(bc * sp + p)] = best;
        }
    }
    return {std::move(pooled), std::move(rec)};
}

/// Validates `record` against `pooled_shape`; throws CorruptedRecord.
void check_pool_record(const Shape& pooled_shape, const PoolRecord& record);

template <typename Scalar>
BasicTensor<Scalar> max_unpool(const BasicTensor<Scalar>& pooled, const PoolRecord& record) {
    check_pool_record(pooled.shape(), record);
    Shape shape{record.batch, record.channels};
    shape.insert(shape.end(), record.pre_pool_extents.begin(), record.pre_pool_extents.end());
    BasicTensor<Scalar> out(shape);
    const auto index = record.full_indices();
    for (std::size_t i = 0; i < index.size(); ++i) out[index[i]] = pooled[static_cast<Index>(i)];
    return out;
}

/// Differentiable counterparts; `record` receives the pooling indices.
Var max_pool(const Var& fmap, PoolRecord& record);
Var max_unpool(const Var& pooled, const PoolRecord& record);

// ---------------------------------------------------------------------------
// Grapher blocks

struct ForwardOptions {
    bool training = true;
};

/// Counters recorded by Grapher blocks during forward passes.
struct GraphStats {
    Index clamp_warnings = 0;
    Index last_token_count = 0;  // nodes per graph in the most recent forward
};

/// fc1 -> max-relative DGC (in -> 2*in, multi-head) -> fc2, each followed by
/// normalization; GELU after the DGC. The fc2 norm starts at zero affine so
/// the branch output is exactly zero at initialization.
struct GrapherParams {
    PointwiseLinear fc1;
    Norm fc1_norm;
    GraphConvParams conv;
    Norm conv_norm;
    PointwiseLinear fc2;
    Norm fc2_norm;
    GraphStats stats;

    static GrapherParams create(Index channels, Index num_heads, NormKind kind, Rng& rng);
    void collect(ParameterSet& set, const std::string& prefix);
};

struct FfnParams {
    PointwiseLinear fc1;
    Norm norm1;
    PointwiseLinear fc2;
    Norm norm2;

    static FfnParams create(Index channels, Index expansion_ratio, Rng& rng);
    void collect(ParameterSet& set, const std::string& prefix);
};

/// Pool -> k-NN graph -> DGC -> unpool; without pooling it is the plain
/// Grapher on the full token grid. Returns the branch only (no residual).
Var p_grapher(const Var& fmap, GrapherParams& params, Index k, bool do_pool, const ForwardOptions& opts = {});

/// Shifted-window partition -> per-window k-NN over valid tokens -> DGC ->
/// window reverse. Returns the branch only (no residual).
Var sw_grapher(const Var& fmap, GrapherParams& params, Index k, Index window_size, bool shifted,
               const ForwardOptions& opts = {});

/// Pointwise fc1 -> norm -> GELU -> fc2 -> norm on a feature map.
Var ffn(const Var& fmap, FfnParams& params, const ForwardOptions& opts = {});

struct EViGBlockParams {
    GrapherParams pool_grapher;
    FfnParams ffn1;
    GrapherParams window_grapher;
    FfnParams ffn2;
    Index k = 4;
    Index window_size = 4;
    bool pool = true;
    bool shifted = true;

    static EViGBlockParams create(Index channels, Index num_heads, Index k, Index window_size, bool pool,
                                  bool shifted, Index ffn_expansion, Rng& rng);
    void collect(ParameterSet& set, const std::string& prefix);
};

/// Layers l and l+1 of a topological stage:
///   zh_l  = P-Grapher(z_{l-1}) + z_{l-1},  z_l     = FFN(zh_l) + zh_l
///   zh_l1 = SW-Grapher(z_l) + z_l,         z_{l+1} = FFN(zh_l1) + zh_l1
Var evig_block_pair(const Var& z, EViGBlockParams& params, const ForwardOptions& opts = {});

}  // namespace nextou
