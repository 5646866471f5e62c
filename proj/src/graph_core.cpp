#include "nextou/graph_core.hpp"

#include <limits>
#include <memory>

namespace nextou {

GraphConvParams GraphConvParams::create(Index in_dim, Index out_dim, Index num_heads, NormKind kind,
                                        Rng& rng) {
    if (num_heads < 1 || in_dim % num_heads != 0 || out_dim % num_heads != 0) {
        throw InvalidArgument("GraphConvParams: in_dim=" + std::to_string(in_dim) + " and out_dim=" +
                              std::to_string(out_dim) + " must be divisible by num_heads=" +
                              std::to_string(num_heads));
    }
    GraphConvParams p;
    p.num_heads = num_heads;
    p.in_dim = in_dim;
    p.out_dim = out_dim;
    const Index fan_in = 2 * in_dim / num_heads;
    p.weight = Var::parameter(uniform_init({num_heads, out_dim / num_heads, fan_in}, fan_in, rng));
    p.bias = Var::parameter(uniform_init({out_dim}, fan_in, rng));
    p.normalization_kind = kind;
    return p;
}

void GraphConvParams::collect(ParameterSet& set, const std::string& prefix) {
    set.add(prefix + ".weight", weight);
    set.add(prefix + ".bias", bias);
}

Var max_relative_aggregate(const Var& nodes, const PatchGraph& graph) {
    const Tensor& x = nodes.value();
    if (x.rank() != 3 || x.dim(0) != graph.batch || x.dim(1) != graph.num_nodes) {
        throw InvalidArgument("max_relative_aggregate: nodes " + shape_to_string(x.shape()) +
                              " do not match graph (" + std::to_string(graph.batch) + ", " +
                              std::to_string(graph.num_nodes) + ")");
    }
    const Index batch = graph.batch, n = graph.num_nodes, k = graph.k, dim = x.dim(2);
    Tensor out(x.shape());
    // Winning source per (b, i, d); -1 when the center has no sources.
    auto winner = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.numel()), -1);
    for (Index b = 0; b < batch; ++b) {
        for (Index i = 0; i < n; ++i) {
            const double* xi = x.raw() + (b * n + i) * dim;
            double* m = out.raw() + (b * n + i) * dim;
            Index* w = winner->data() + (b * n + i) * dim;
            for (Index d = 0; d < dim; ++d) m[d] = -std::numeric_limits<double>::infinity();
            bool any = false;
            for (Index s = 0; s < k; ++s) {
                const Index j = graph.source(b, i, s);
                if (j < 0) continue;
                any = true;
                const double* xj = x.raw() + (b * n + j) * dim;
                for (Index d = 0; d < dim; ++d) {
                    const double diff = xj[d] - xi[d];
                    if (diff > m[d]) {
                        m[d] = diff;
                        w[d] = j;
                    }
                }
            }
            if (!any) std::fill(m, m + dim, 0.0);
        }
    }
    return make_result(std::move(out), {nodes}, [winner, batch, n, dim](detail::Node& node) {
        auto* g = node.input_grad(0);
        if (!g) return;
        for (Index b = 0; b < batch; ++b) {
            for (Index i = 0; i < n; ++i) {
                const Index off = (b * n + i) * dim;
                for (Index d = 0; d < dim; ++d) {
                    const Index j = (*winner)[static_cast<std::size_t>(off + d)];
                    if (j < 0) continue;
                    const double gm = node.grad[off + d];
                    (*g)[(b * n + j) * dim + d] += gm;
                    (*g)[off + d] -= gm;
                }
            }
        }
    });
}

Var multi_head_update(const Var& nodes, const Var& aggregate, const GraphConvParams& params) {
    const Tensor& x = nodes.value();
    if (x.rank() != 3 || x.dim(2) != params.in_dim || aggregate.shape() != x.shape()) {
        throw InvalidArgument("multi_head_update: node features " + shape_to_string(x.shape()) +
                              " do not match in_dim=" + std::to_string(params.in_dim));
    }
    const Index batch = x.dim(0), n = x.dim(1), heads = params.num_heads;
    const Index din = params.in_dim, dout = params.out_dim;
    const Index dh = din / heads, oh = dout / heads;
    using RowMatrix = Tensor::RowMatrix;
    using ConstMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
    using Map = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;

    Tensor out({batch, n, dout});
    const Tensor& wt = params.weight.value();
    for (Index b = 0; b < batch; ++b) {
        for (Index h = 0; h < heads; ++h) {
            ConstMap xh(x.raw() + b * n * din + h * dh, n, dh, Eigen::OuterStride<>(din));
            ConstMap mh(aggregate.value().raw() + b * n * din + h * dh, n, dh, Eigen::OuterStride<>(din));
            auto w = wt.matrix(oh, 2 * dh, h * oh * 2 * dh);
            Map o(out.raw() + b * n * dout + h * oh, n, oh, Eigen::OuterStride<>(dout));
            o.noalias() = xh * w.leftCols(dh).transpose() + mh * w.rightCols(dh).transpose();
            o.rowwise() += params.bias.value().data().segment(h * oh, oh).matrix().transpose();
        }
    }
    return make_result(std::move(out), {nodes, aggregate, params.weight, params.bias},
                       [=](detail::Node& node) {
                           const Tensor& xv = node.inputs[0]->value;
                           const Tensor& mv = node.inputs[1]->value;
                           const Tensor& wv = node.inputs[2]->value;
                           auto* gx = node.input_grad(0);
                           auto* gm = node.input_grad(1);
                           auto* gw = node.input_grad(2);
                           auto* gb = node.input_grad(3);
                           for (Index b = 0; b < batch; ++b) {
                               for (Index h = 0; h < heads; ++h) {
                                   ConstMap go(node.grad.raw() + b * n * dout + h * oh, n, oh,
                                               Eigen::OuterStride<>(dout));
                                   auto w = wv.matrix(oh, 2 * dh, h * oh * 2 * dh);
                                   if (gx) {
                                       Map(gx->data() + b * n * din + h * dh, n, dh, Eigen::OuterStride<>(din))
                                           .noalias() += go * w.leftCols(dh);
                                   }
                                   if (gm) {
                                       Map(gm->data() + b * n * din + h * dh, n, dh, Eigen::OuterStride<>(din))
                                           .noalias() += go * w.rightCols(dh);
                                   }
                                   if (gw) {
                                       Eigen::Map<RowMatrix> gwh(gw->data() + h * oh * 2 * dh, oh, 2 * dh);
                                       ConstMap xh(xv.raw() + b * n * din + h * dh, n, dh, Eigen::OuterStride<>(din));
                                       ConstMap mh(mv.raw() + b * n * din + h * dh, n, dh, Eigen::OuterStride<>(din));
                                       gwh.leftCols(dh).noalias() += go.transpose() * xh;
                                       gwh.rightCols(dh).noalias() += go.transpose() * mh;
                                   }
                                   if (gb) {
                                       gb->segment(h * oh, oh) += go.colwise().sum().transpose().array();
                                   }
                               }
                           }
                       });
}

Var max_relative_conv(const Var& nodes, const PatchGraph& graph, const GraphConvParams& params) {
    return multi_head_update(nodes, max_relative_aggregate(nodes, graph), params);
}

}  // namespace nextou
