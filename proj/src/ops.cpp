#include "nextou/ops.hpp"

#include <cmath>

namespace nextou {

namespace {

using RowMatrix = Tensor::RowMatrix;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                              " vs " + shape_to_string(b.shape()));
    }
}

void require_fmap(const Var& x, const char* op) {
    if (x.value().rank() < 3) {
        throw InvalidArgument(std::string(op) + ": expected (batch, channels, spatial...), got " +
                              shape_to_string(x.shape()));
    }
}

struct FmapDims {
    Index batch, channels, spatial;
};

FmapDims fmap_dims(const Tensor& t) {
    return {t.dim(0), t.dim(1), shape_numel(spatial_extents(t.shape()))};
}

/// For each kernel offset and output position, the flat input position or -1
/// when the tap falls in the zero padding.
std::vector<Index> conv3_table(const Shape& in, const Shape& out, const Shape& stride) {
    const Index rank = static_cast<Index>(in.size());
    Index taps = 1;
    for (Index a = 0; a < rank; ++a) taps *= 3;
    const Index so = shape_numel(out);
    std::vector<Index> table(static_cast<std::size_t>(taps * so));
    const Shape kernel(in.size(), 3);
    std::vector<Index> k(in.size()), o(in.size());
    for (Index kk = 0; kk < taps; ++kk) {
        unravel(kk, kernel, k.data());
        for (Index op = 0; op < so; ++op) {
            unravel(op, out, o.data());
            Index flat = 0;
            bool inside = true;
            for (Index a = 0; a < rank; ++a) {
                const Index pos = o[a] * stride[a] + k[a] - 1;
                if (pos < 0 || pos >= in[a]) {
                    inside = false;
                    break;
                }
                flat = flat * in[a] + pos;
            }
            table[kk * so + op] = inside ? flat : -1;
        }
    }
    return table;
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape(), a.value().data() + b.value().data());
    return make_result(std::move(out), {a, b}, [](detail::Node& n) {
        if (auto* g = n.input_grad(0)) *g += n.grad.data();
        if (auto* g = n.input_grad(1)) *g += n.grad.data();
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape(), a.value().data() - b.value().data());
    return make_result(std::move(out), {a, b}, [](detail::Node& n) {
        if (auto* g = n.input_grad(0)) *g += n.grad.data();
        if (auto* g = n.input_grad(1)) *g -= n.grad.data();
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape(), a.value().data() * b.value().data());
    return make_result(std::move(out), {a, b}, [](detail::Node& n) {
        if (auto* g = n.input_grad(0)) *g += n.grad.data() * n.inputs[1]->value.data();
        if (auto* g = n.input_grad(1)) *g += n.grad.data() * n.inputs[0]->value.data();
    });
}

Var scale(const Var& a, double factor) {
    Tensor out(a.shape(), a.value().data() * factor);
    return make_result(std::move(out), {a}, [factor](detail::Node& n) {
        if (auto* g = n.input_grad(0)) *g += n.grad.data() * factor;
    });
}

Var sum(const Var& a) {
    Tensor out = Tensor::constant({1}, a.value().data().sum());
    return make_result(std::move(out), {a}, [](detail::Node& n) {
        if (auto* g = n.input_grad(0)) *g += n.grad[0];
    });
}

Var mean(const Var& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var add_batch_broadcast(const Var& x, const Var& p) {
    const Shape& xs = x.shape();
    const Shape& ps = p.shape();
    if (ps.empty() || ps[0] != 1 || ps.size() != xs.size() ||
        !std::equal(ps.begin() + 1, ps.end(), xs.begin() + 1)) {
        throw InvalidArgument("add_batch_broadcast: cannot broadcast " + shape_to_string(ps) +
                              " onto " + shape_to_string(xs));
    }
    const Index batch = xs[0];
    const Index item = p.numel();
    Tensor out = x.value();
    for (Index b = 0; b < batch; ++b) out.data().segment(b * item, item) += p.value().data();
    return make_result(std::move(out), {x, p}, [batch, item](detail::Node& n) {
        if (auto* g = n.input_grad(0)) *g += n.grad.data();
        if (auto* g = n.input_grad(1)) {
            for (Index b = 0; b < batch; ++b) *g += n.grad.data().segment(b * item, item);
        }
    });
}

Var pointwise_linear(const Var& x, const Var& weight, const Var& bias) {
    require_fmap(x, "pointwise_linear");
    const auto [batch, cin, s] = fmap_dims(x.value());
    const Index cout = weight.value().dim(0);
    if (weight.value().rank() != 2 || weight.value().dim(1) != cin || bias.numel() != cout) {
        throw InvalidArgument("pointwise_linear: weight " + shape_to_string(weight.shape()) +
                              " does not match input channels " + std::to_string(cin));
    }
    Shape out_shape = x.shape();
    out_shape[1] = cout;
    Tensor out(out_shape);
    ConstMatrixMap w(weight.value().raw(), cout, cin);
    ConstVectorMap bvec(bias.value().raw(), cout);
    for (Index b = 0; b < batch; ++b) {
        auto ob = out.matrix(cout, s, b * cout * s);
        ob.noalias() = w * x.value().matrix(cin, s, b * cin * s);
        ob.colwise() += bvec;
    }
    return make_result(std::move(out), {x, weight, bias}, [batch, cin, cout, s](detail::Node& n) {
        const Tensor& xv = n.inputs[0]->value;
        ConstMatrixMap w(n.inputs[1]->value.raw(), cout, cin);
        auto* gx = n.input_grad(0);
        auto* gw = n.input_grad(1);
        auto* gb = n.input_grad(2);
        for (Index b = 0; b < batch; ++b) {
            auto go = n.grad.matrix(cout, s, b * cout * s);
            if (gx) MatrixMap(gx->data() + b * cin * s, cin, s).noalias() += w.transpose() * go;
            if (gw) MatrixMap(gw->data(), cout, cin).noalias() += go * xv.matrix(cin, s, b * cin * s).transpose();
            if (gb) Eigen::Map<Eigen::VectorXd>(gb->data(), cout) += go.rowwise().sum();
        }
    });
}

Var conv3(const Var& x, const Var& weight, const Var& bias, const Shape& stride) {
    require_fmap(x, "conv3");
    const Shape in_ext = spatial_extents(x.shape());
    const Index rank = static_cast<Index>(in_ext.size());
    if (static_cast<Index>(stride.size()) != rank) throw InvalidArgument("conv3: stride rank mismatch");
    const auto [batch, cin, si] = fmap_dims(x.value());
    Index taps = 1;
    for (Index a = 0; a < rank; ++a) taps *= 3;
    const Index cout = weight.value().dim(0);
    if (weight.value().rank() != 2 || weight.value().dim(1) != cin * taps || bias.numel() != cout) {
        throw InvalidArgument("conv3: weight " + shape_to_string(weight.shape()) +
                              " does not match input channels " + std::to_string(cin));
    }
    Shape out_ext(in_ext.size());
    for (Index a = 0; a < rank; ++a) out_ext[a] = (in_ext[a] - 1) / stride[a] + 1;
    const Index so = shape_numel(out_ext);
    auto table = std::make_shared<std::vector<Index>>(conv3_table(in_ext, out_ext, stride));

    Shape out_shape{batch, cout};
    out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
    Tensor out(out_shape);
    ConstMatrixMap w(weight.value().raw(), cout, cin * taps);
    ConstVectorMap bvec(bias.value().raw(), cout);

    auto fill_columns = [table, cin, taps, si, so](const double* xb, RowMatrix& col) {
        for (Index ci = 0; ci < cin; ++ci) {
            const double* xc = xb + ci * si;
            for (Index kk = 0; kk < taps; ++kk) {
                const Index* t = table->data() + kk * so;
                double* row = col.data() + (ci * taps + kk) * so;
                for (Index o = 0; o < so; ++o) row[o] = t[o] >= 0 ? xc[t[o]] : 0.0;
            }
        }
    };

    RowMatrix col(cin * taps, so);
    for (Index b = 0; b < batch; ++b) {
        fill_columns(x.value().raw() + b * cin * si, col);
        auto ob = out.matrix(cout, so, b * cout * so);
        ob.noalias() = w * col;
        ob.colwise() += bvec;
    }

    return make_result(std::move(out), {x, weight, bias},
                       [=](detail::Node& n) {
                           const Tensor& xv = n.inputs[0]->value;
                           ConstMatrixMap wm(n.inputs[1]->value.raw(), cout, cin * taps);
                           auto* gx = n.input_grad(0);
                           auto* gw = n.input_grad(1);
                           auto* gb = n.input_grad(2);
                           RowMatrix cols(cin * taps, so);
                           RowMatrix dcol;
                           for (Index b = 0; b < batch; ++b) {
                               auto go = n.grad.matrix(cout, so, b * cout * so);
                               if (gw) {
                                   fill_columns(xv.raw() + b * cin * si, cols);
                                   MatrixMap(gw->data(), cout, cin * taps).noalias() += go * cols.transpose();
                               }
                               if (gb) Eigen::Map<Eigen::VectorXd>(gb->data(), cout) += go.rowwise().sum();
                               if (gx) {
                                   dcol.noalias() = wm.transpose() * go;
                                   double* gxb = gx->data() + b * cin * si;
                                   for (Index ci = 0; ci < cin; ++ci) {
                                       for (Index kk = 0; kk < taps; ++kk) {
                                           const Index* t = table->data() + kk * so;
                                           const double* row = dcol.data() + (ci * taps + kk) * so;
                                           double* gxc = gxb + ci * si;
                                           for (Index o = 0; o < so; ++o) {
                                               if (t[o] >= 0) gxc[t[o]] += row[o];
                                           }
                                       }
                                   }
                               }
                           }
                       });
}

Var conv_transpose(const Var& x, const Var& weight, const Var& bias, const Shape& stride) {
    require_fmap(x, "conv_transpose");
    const Shape in_ext = spatial_extents(x.shape());
    const Index rank = static_cast<Index>(in_ext.size());
    if (static_cast<Index>(stride.size()) != rank) {
        throw InvalidArgument("conv_transpose: stride rank mismatch");
    }
    const auto [batch, cin, si] = fmap_dims(x.value());
    const Index taps = shape_numel(stride);
    const Index cout = bias.numel();
    if (weight.value().rank() != 2 || weight.value().dim(0) != cin ||
        weight.value().dim(1) != cout * taps) {
        throw InvalidArgument("conv_transpose: weight " + shape_to_string(weight.shape()) +
                              " does not match (" + std::to_string(cin) + ", " +
                              std::to_string(cout * taps) + ")");
    }
    Shape out_ext(in_ext.size());
    for (Index a = 0; a < rank; ++a) out_ext[a] = in_ext[a] * stride[a];
    const Index so = shape_numel(out_ext);

    auto table = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(taps * si));
    {
        std::vector<Index> p(in_ext.size()), i(in_ext.size()), o(in_ext.size());
        for (Index pk = 0; pk < taps; ++pk) {
            unravel(pk, stride, p.data());
            for (Index ip = 0; ip < si; ++ip) {
                unravel(ip, in_ext, i.data());
                for (Index a = 0; a < rank; ++a) o[a] = i[a] * stride[a] + p[a];
                (*table)[pk * si + ip] = ravel(o.data(), out_ext);
            }
        }
    }

    Shape out_shape{batch, cout};
    out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
    Tensor out(out_shape);
    ConstMatrixMap w(weight.value().raw(), cin, cout * taps);
    RowMatrix y;
    for (Index b = 0; b < batch; ++b) {
        y.noalias() = w.transpose() * x.value().matrix(cin, si, b * cin * si);
        double* ob = out.raw() + b * cout * so;
        for (Index co = 0; co < cout; ++co) {
            const double bc = bias.value()[co];
            for (Index pk = 0; pk < taps; ++pk) {
                const Index* t = table->data() + pk * si;
                const double* yr = y.data() + (co * taps + pk) * si;
                for (Index ip = 0; ip < si; ++ip) ob[co * so + t[ip]] = yr[ip] + bc;
            }
        }
    }

    return make_result(std::move(out), {x, weight, bias}, [=](detail::Node& n) {
        const Tensor& xv = n.inputs[0]->value;
        ConstMatrixMap wm(n.inputs[1]->value.raw(), cin, cout * taps);
        auto* gx = n.input_grad(0);
        auto* gw = n.input_grad(1);
        auto* gb = n.input_grad(2);
        RowMatrix dy(cout * taps, si);
        for (Index b = 0; b < batch; ++b) {
            const double* go = n.grad.raw() + b * cout * so;
            for (Index co = 0; co < cout; ++co) {
                for (Index pk = 0; pk < taps; ++pk) {
                    const Index* t = table->data() + pk * si;
                    double* dr = dy.data() + (co * taps + pk) * si;
                    for (Index ip = 0; ip < si; ++ip) dr[ip] = go[co * so + t[ip]];
                }
                if (gb) (*gb)[co] += Eigen::Map<const Eigen::ArrayXd>(go + co * so, so).sum();
            }
            if (gw) MatrixMap(gw->data(), cin, cout * taps).noalias() += xv.matrix(cin, si, b * cin * si) * dy.transpose();
            if (gx) MatrixMap(gx->data() + b * cin * si, cin, si).noalias() += wm * dy;
        }
    });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_fmap(x, "instance_norm");
    const auto [batch, channels, s] = fmap_dims(x.value());
    if (gamma.numel() != channels || beta.numel() != channels) {
        throw InvalidArgument("instance_norm: affine size does not match channels");
    }
    Tensor out(x.shape());
    auto xhat = std::make_shared<Eigen::ArrayXd>(x.numel());
    auto inv_std = std::make_shared<Eigen::ArrayXd>(batch * channels);
    for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < channels; ++c) {
            const Index off = (b * channels + c) * s;
            auto xs = x.value().data().segment(off, s);
            const double mu = xs.mean();
            const double var = (xs - mu).square().mean();
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[b * channels + c] = is;
            xhat->segment(off, s) = (xs - mu) * is;
            out.data().segment(off, s) = xhat->segment(off, s) * gamma.value()[c] + beta.value()[c];
        }
    }
    return make_result(std::move(out), {x, gamma, beta}, [=](detail::Node& n) {
        auto* gx = n.input_grad(0);
        auto* gg = n.input_grad(1);
        auto* gbeta = n.input_grad(2);
        const Tensor& gam = n.inputs[1]->value;
        for (Index b = 0; b < batch; ++b) {
            for (Index c = 0; c < channels; ++c) {
                const Index off = (b * channels + c) * s;
                auto dy = n.grad.data().segment(off, s);
                auto xh = xhat->segment(off, s);
                if (gg) (*gg)[c] += (dy * xh).sum();
                if (gbeta) (*gbeta)[c] += dy.sum();
                if (gx) {
                    const Eigen::ArrayXd dxh = dy * gam[c];
                    const double sdx = dxh.sum();
                    const double sdxx = (dxh * xh).sum();
                    gx->segment(off, s) += (*inv_std)[b * channels + c] / static_cast<double>(s) *
                                           (static_cast<double>(s) * dxh - sdx - xh * sdxx);
                }
            }
        }
    });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
    require_fmap(x, "batch_norm");
    const auto [batch, channels, s] = fmap_dims(x.value());
    if (gamma.numel() != channels || beta.numel() != channels || running_mean.numel() != channels ||
        running_var.numel() != channels) {
        throw InvalidArgument("batch_norm: parameter size does not match channels");
    }
    const Index count = batch * s;
    Tensor out(x.shape());
    auto xhat = std::make_shared<Eigen::ArrayXd>(x.numel());
    auto inv_std = std::make_shared<Eigen::ArrayXd>(channels);
    for (Index c = 0; c < channels; ++c) {
        double mu = 0.0, var = 0.0;
        if (training) {
            for (Index b = 0; b < batch; ++b) mu += x.value().data().segment((b * channels + c) * s, s).sum();
            mu /= static_cast<double>(count);
            for (Index b = 0; b < batch; ++b) {
                var += (x.value().data().segment((b * channels + c) * s, s) - mu).square().sum();
            }
            var /= static_cast<double>(count);
            const double unbiased = count > 1 ? var * count / static_cast<double>(count - 1) : var;
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
        } else {
            mu = running_mean[c];
            var = running_var[c];
        }
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[c] = is;
        for (Index b = 0; b < batch; ++b) {
            const Index off = (b * channels + c) * s;
            xhat->segment(off, s) = (x.value().data().segment(off, s) - mu) * is;
            out.data().segment(off, s) = xhat->segment(off, s) * gamma.value()[c] + beta.value()[c];
        }
    }
    return make_result(std::move(out), {x, gamma, beta}, [=](detail::Node& n) {
        auto* gx = n.input_grad(0);
        auto* gg = n.input_grad(1);
        auto* gbeta = n.input_grad(2);
        const Tensor& gam = n.inputs[1]->value;
        for (Index c = 0; c < channels; ++c) {
            double sdy = 0.0, sdyx = 0.0;
            for (Index b = 0; b < batch; ++b) {
                const Index off = (b * channels + c) * s;
                sdy += n.grad.data().segment(off, s).sum();
                sdyx += (n.grad.data().segment(off, s) * xhat->segment(off, s)).sum();
            }
            if (gg) (*gg)[c] += sdyx;
            if (gbeta) (*gbeta)[c] += sdy;
            if (!gx) continue;
            const double is = (*inv_std)[c];
            for (Index b = 0; b < batch; ++b) {
                const Index off = (b * channels + c) * s;
                auto dy = n.grad.data().segment(off, s);
                if (training) {
                    const double cnt = static_cast<double>(count);
                    gx->segment(off, s) += gam[c] * is / cnt *
                                           (cnt * dy - sdy - xhat->segment(off, s) * sdyx);
                } else {
                    gx->segment(off, s) += dy * (gam[c] * is);
                }
            }
        }
    });
}

Var gelu(const Var& x) {
    const auto& xv = x.value().data();
    Tensor out(x.shape(), 0.5 * xv * (1.0 + (xv * M_SQRT1_2).unaryExpr([](double v) { return std::erf(v); })));
    return make_result(std::move(out), {x}, [](detail::Node& n) {
        if (auto* g = n.input_grad(0)) {
            const auto& v = n.inputs[0]->value.data();
            const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
            const Eigen::ArrayXd cdf =
                0.5 * (1.0 + (v * M_SQRT1_2).unaryExpr([](double t) { return std::erf(t); }));
            const Eigen::ArrayXd pdf = (-0.5 * v.square()).exp() * inv_sqrt_2pi;
            *g += n.grad.data() * (cdf + v * pdf);
        }
    });
}

Var leaky_relu(const Var& x, double slope) {
    const auto& xv = x.value().data();
    Tensor out(x.shape(), (xv > 0.0).select(xv, xv * slope));
    return make_result(std::move(out), {x}, [slope](detail::Node& n) {
        if (auto* g = n.input_grad(0)) {
            const auto& v = n.inputs[0]->value.data();
            *g += (v > 0.0).select(n.grad.data(), n.grad.data() * slope);
        }
    });
}

Var softmax_channels(const Var& x) {
    require_fmap(x, "softmax_channels");
    const auto [batch, channels, s] = fmap_dims(x.value());
    Tensor out(x.shape());
    for (Index b = 0; b < batch; ++b) {
        auto xb = x.value().matrix(channels, s, b * channels * s);
        auto ob = out.matrix(channels, s, b * channels * s);
        const Eigen::RowVectorXd mx = xb.colwise().maxCoeff();
        ob = (xb.rowwise() - mx).array().exp().matrix();
        const Eigen::RowVectorXd denom = ob.colwise().sum();
        ob.array().rowwise() /= denom.array();
    }
    return make_result(std::move(out), {x}, [batch, channels, s](detail::Node& n) {
        auto* g = n.input_grad(0);
        if (!g) return;
        for (Index b = 0; b < batch; ++b) {
            auto y = n.value.matrix(channels, s, b * channels * s);
            auto dy = n.grad.matrix(channels, s, b * channels * s);
            const Eigen::RowVectorXd dot = (y.array() * dy.array()).colwise().sum();
            MatrixMap(g->data() + b * channels * s, channels, s).array() +=
                y.array() * (dy.array().rowwise() - dot.array());
        }
    });
}

Var concat_channels(const Var& a, const Var& b) {
    require_fmap(a, "concat_channels");
    require_fmap(b, "concat_channels");
    if (a.value().dim(0) != b.value().dim(0) ||
        spatial_extents(a.shape()) != spatial_extents(b.shape())) {
        throw InvalidArgument("concat_channels: incompatible " + shape_to_string(a.shape()) +
                              " and " + shape_to_string(b.shape()));
    }
    const auto [batch, ca, s] = fmap_dims(a.value());
    const Index cb = b.value().dim(1);
    Shape out_shape = a.shape();
    out_shape[1] = ca + cb;
    Tensor out(out_shape);
    for (Index i = 0; i < batch; ++i) {
        out.data().segment(i * (ca + cb) * s, ca * s) = a.value().data().segment(i * ca * s, ca * s);
        out.data().segment((i * (ca + cb) + ca) * s, cb * s) = b.value().data().segment(i * cb * s, cb * s);
    }
    return make_result(std::move(out), {a, b}, [batch, ca, cb, s](detail::Node& n) {
        auto* ga = n.input_grad(0);
        auto* gb = n.input_grad(1);
        for (Index i = 0; i < batch; ++i) {
            if (ga) ga->segment(i * ca * s, ca * s) += n.grad.data().segment(i * (ca + cb) * s, ca * s);
            if (gb) gb->segment(i * cb * s, cb * s) += n.grad.data().segment((i * (ca + cb) + ca) * s, cb * s);
        }
    });
}

Var gather(const Var& x, IndexMap index, Shape out_shape) {
    if (static_cast<Index>(index->size()) != shape_numel(out_shape)) {
        throw InvalidArgument("gather: index size does not match output shape");
    }
    Tensor out(std::move(out_shape));
    const auto& xv = x.value().data();
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) out[static_cast<Index>(i)] = xv[idx[i]];
    }
    return make_result(std::move(out), {x}, [index](detail::Node& n) {
        auto* g = n.input_grad(0);
        if (!g) return;
        const auto& ix = *index;
        for (std::size_t i = 0; i < ix.size(); ++i) {
            if (ix[i] >= 0) (*g)[ix[i]] += n.grad[static_cast<Index>(i)];
        }
    });
}

Var scatter(const Var& x, IndexMap index, Shape out_shape) {
    if (static_cast<Index>(index->size()) != x.numel()) {
        throw InvalidArgument("scatter: index size does not match input");
    }
    Tensor out(std::move(out_shape));
    const auto& xv = x.value().data();
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) out[idx[i]] += xv[static_cast<Index>(i)];
    }
    return make_result(std::move(out), {x}, [index](detail::Node& n) {
        auto* g = n.input_grad(0);
        if (!g) return;
        const auto& ix = *index;
        for (std::size_t i = 0; i < ix.size(); ++i) {
            if (ix[i] >= 0) (*g)[static_cast<Index>(i)] += n.grad[ix[i]];
        }
    });
}

Var to_tokens(const Var& fmap) {
    require_fmap(fmap, "to_tokens");
    const auto [batch, channels, s] = fmap_dims(fmap.value());
    Tensor out({batch, s, channels});
    for (Index b = 0; b < batch; ++b) {
        out.matrix(s, channels, b * s * channels) = fmap.value().matrix(channels, s, b * channels * s).transpose();
    }
    return make_result(std::move(out), {fmap}, [batch, channels, s](detail::Node& n) {
        if (auto* g = n.input_grad(0)) {
            for (Index b = 0; b < batch; ++b) {
                MatrixMap(g->data() + b * channels * s, channels, s) +=
                    n.grad.matrix(s, channels, b * s * channels).transpose();
            }
        }
    });
}

Var from_tokens(const Var& tokens, const Shape& extents) {
    if (tokens.value().rank() != 3 || tokens.value().dim(1) != shape_numel(extents)) {
        throw InvalidArgument("from_tokens: " + shape_to_string(tokens.shape()) +
                              " does not match extents " + shape_to_string(extents));
    }
    const Index batch = tokens.value().dim(0);
    const Index s = tokens.value().dim(1);
    const Index channels = tokens.value().dim(2);
    Shape out_shape{batch, channels};
    out_shape.insert(out_shape.end(), extents.begin(), extents.end());
    Tensor out(out_shape);
    for (Index b = 0; b < batch; ++b) {
        out.matrix(channels, s, b * channels * s) = tokens.value().matrix(s, channels, b * s * channels).transpose();
    }
    return make_result(std::move(out), {tokens}, [batch, channels, s](detail::Node& n) {
        if (auto* g = n.input_grad(0)) {
            for (Index b = 0; b < batch; ++b) {
                MatrixMap(g->data() + b * s * channels, s, channels) +=
                    n.grad.matrix(channels, s, b * channels * s).transpose();
            }
        }
    });
}

}  // namespace nextou
