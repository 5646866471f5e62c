#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nextou/layers.hpp"

namespace nextou {

/// Directed k-NN edge set over a batch of node sets. For center i of item b
/// the sources are `neighbors[(b * num_nodes + i) * k + j]`; slot value -1
/// marks an unused slot left by K clamping.
struct PatchGraph {
    Index batch = 0;
    Index num_nodes = 0;
    Index k = 0;
    std::vector<Index> neighbors;
    /// Batch items whose K had to be clamped to (valid tokens - 1).
    Index clamped_items = 0;

    Index source(Index b, Index center, Index slot) const {
        return neighbors[static_cast<std::size_t>((b * num_nodes + center) * k + slot)];
    }
};

namespace detail {

template <typename Scalar>
void select_nearest(const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>& x,
                    Index center, Index k, const std::uint8_t* valid,
                    std::vector<std::pair<Scalar, Index>>& scratch, Index* out) {
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dist =
        (x.rowwise() - x.row(center)).rowwise().squaredNorm();
    scratch.clear();
    for (Index j = 0; j < x.rows(); ++j) {
        if (j == center || (valid && !valid[j])) continue;
        scratch.emplace_back(dist[j], j);
    }
    const Index take = std::min<Index>(k, static_cast<Index>(scratch.size()));
    std::partial_sort(scratch.begin(), scratch.begin() + take, scratch.end());
    for (Index j = 0; j < k; ++j) out[j] = j < take ? scratch[static_cast<std::size_t>(j)].second : -1;
}

}  // namespace detail

/// K nearest neighbors (Euclidean, self excluded, ties to the lowest index)
/// of every node in a (batch, N, dim) node set. Requires K < N.
template <typename Scalar>
PatchGraph knn_graph(const BasicTensor<Scalar>& nodes, Index k) {
    if (nodes.rank() != 3) {
        throw InvalidArgument("knn_graph: expected (batch, nodes, dim), got " + shape_to_string(nodes.shape()));
    }
    const Index n = nodes.dim(1);
    if (k < 1 || k >= n) {
        throw InvalidArgument("knn_graph: K=" + std::to_string(k) + " must satisfy 1 <= K < N=" + std::to_string(n));
    }
    if (!nodes.data().allFinite()) throw InvalidArgument("knn_graph: node features must be finite");
    PatchGraph g{nodes.dim(0), n, k, {}, 0};
    g.neighbors.resize(static_cast<std::size_t>(g.batch * n * k));
    std::vector<std::pair<Scalar, Index>> scratch;
    for (Index b = 0; b < g.batch; ++b) {
        const auto x = nodes.matrix(n, nodes.dim(2), b * n * nodes.dim(2));
        for (Index i = 0; i < n; ++i) {
            detail::select_nearest<Scalar>(x, i, k, nullptr, scratch, g.neighbors.data() + (b * n + i) * k);
        }
    }
    return g;
}

/// k-NN restricted to valid candidates (`valid` is (batch * N) flags). Items
/// with V valid nodes and K >= V use K' = V - 1; the remaining slots are -1.
template <typename Scalar>
PatchGraph knn_graph_masked(const BasicTensor<Scalar>& nodes, Index k, const std::vector<std::uint8_t>& valid) {
    if (nodes.rank() != 3) {
        throw InvalidArgument("knn_graph_masked: expected (batch, nodes, dim), got " + shape_to_string(nodes.shape()));
    }
    const Index n = nodes.dim(1);
    if (k < 1) throw InvalidArgument("knn_graph_masked: K must be positive");
    if (static_cast<Index>(valid.size()) != nodes.dim(0) * n) {
        throw InvalidArgument("knn_graph_masked: validity mask size mismatch");
    }
    PatchGraph g{nodes.dim(0), n, k, {}, 0};
    g.neighbors.assign(static_cast<std::size_t>(g.batch * n * k), -1);
    std::vector<std::pair<Scalar, Index>> scratch;
    for (Index b = 0; b < g.batch; ++b) {
        const std::uint8_t* vb = valid.data() + b * n;
        const Index num_valid = std::count(vb, vb + n, std::uint8_t{1});
        if (k >= num_valid) ++g.clamped_items;
        const Index effective_k = std::clamp<Index>(num_valid - 1, 0, k);
        const auto x = nodes.matrix(n, nodes.dim(2), b * n * nodes.dim(2));
        // Invalid (padding) centers get neighbors too; their outputs are discarded.
        for (Index i = 0; i < n; ++i) {
            Index* out = g.neighbors.data() + (b * n + i) * k;
            detail::select_nearest<Scalar>(x, i, effective_k, vb, scratch, out);
        }
    }
    return g;
}

struct GraphConvParams {
    Index num_heads = 1;
    Index in_dim = 0;
    Index out_dim = 0;
    Var weight;  // (num_heads, out_dim / num_heads, 2 * in_dim / num_heads)
    Var bias;    // (out_dim)
    NormKind normalization_kind = NormKind::instance;

    static GraphConvParams create(Index in_dim, Index out_dim, Index num_heads, NormKind kind, Rng& rng);
    void collect(ParameterSet& set, const std::string& prefix);
};

/// m_i = elementwise max over sources j of (x_j - x_i); zero when a center
/// has no sources.
Var max_relative_aggregate(const Var& nodes, const PatchGraph& graph);

/// Head h maps concat(x_i[h-slice], m_i[h-slice]) through its own linear
/// map; head outputs are concatenated along features.
Var multi_head_update(const Var& nodes, const Var& aggregate, const GraphConvParams& params);

/// Max-relative graph convolution on (batch, N, in_dim) -> (batch, N, out_dim).
Var max_relative_conv(const Var& nodes, const PatchGraph& graph, const GraphConvParams& params);

}  // namespace nextou
