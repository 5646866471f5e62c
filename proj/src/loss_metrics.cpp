#include "nextou/loss_metrics.hpp"
#include "nextou/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace nextou {

namespace {

constexpr double kLogFloor = 1e-12;

struct PairDims {
    Index batch, classes, spatial;
};

PairDims check_pair(const Var& f, const Tensor& g, const BinaryMask* mask) {
    if (f.value().rank() < 3 || f.shape() != g.shape()) {
        throw InvalidArgument("loss: likelihood " + shape_to_string(f.shape()) + " and ground truth " +
                              shape_to_string(g.shape()) + " must share a (batch, classes, spatial...) shape");
    }
    PairDims d{f.value().dim(0), f.value().dim(1), 0};
    d.spatial = f.numel() / (d.batch * d.classes);
    if (mask) {
        Shape expected{d.batch};
        const Shape ext = spatial_extents(f.shape());
        expected.insert(expected.end(), ext.begin(), ext.end());
        if (mask->shape() != expected) {
            throw InvalidArgument("loss: mask " + shape_to_string(mask->shape()) + " does not match " +
                                  shape_to_string(expected));
        }
    }
    return d;
}

/// Mask value broadcast over classes: mask index of entry (b, c, p).
inline double mask_at(const BinaryMask* mask, Index b, Index p, Index spatial) {
    return mask ? static_cast<double>((*mask)[b * spatial + p]) : 1.0;
}

void check_label_pair(const LabelMap& pred, const LabelMap& gt, std::int32_t class_id, Index num_classes) {
    if (pred.shape() != gt.shape()) {
        throw InvalidArgument("metric: label maps " + shape_to_string(pred.shape()) + " and " +
                              shape_to_string(gt.shape()) + " differ in shape");
    }
    if (class_id < 0 || class_id >= num_classes) {
        throw InvalidArgument("metric: unknown class id " + std::to_string(class_id) + " (num_classes " +
                              std::to_string(num_classes) + ")");
    }
}

/// Linear-interpolation percentile (numpy default) of unsorted values.
double percentile_of(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

/// 1D lower-envelope squared distance transform (Felzenszwalb & Huttenlocher).
void edt_1d(const double* f, Index n, Index stride, double* out, std::vector<Index>& v, std::vector<double>& z,
            std::vector<double>& buf) {
    for (Index i = 0; i < n; ++i) buf[i] = f[i * stride];
    constexpr double inf = std::numeric_limits<double>::infinity();
    Index k = -1;
    for (Index q = 0; q < n; ++q) {
        if (buf[q] == inf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        double s;
        while (true) {
            const Index p = v[k];
            s = ((buf[q] + double(q * q)) - (buf[p] + double(p * p))) / (2.0 * double(q - p));
            if (s <= z[k] && k > 0) {
                --k;
            } else {
                break;
            }
        }
        if (s <= z[k]) {
            v[k] = q;  // k == 0: the new parabola dominates everywhere
            z[k + 1] = inf;
            continue;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    if (k < 0) {
        for (Index q = 0; q < n; ++q) out[q * stride] = inf;
        return;
    }
    Index j = 0;
    for (Index q = 0; q < n; ++q) {
        while (z[j + 1] < double(q)) ++j;
        const double d = double(q - v[j]);
        out[q * stride] = d * d + buf[v[j]];
    }
}

}  // namespace

LossConfig LossConfig::defaults_for_rank(Index spatial_rank) {
    LossConfig c;
    c.lambda_bti = spatial_rank == 3 ? 1e-6 : 1e-4;
    return c;
}

void LossConfig::validate() const {
    if (!std::isfinite(lambda_dice) || !std::isfinite(lambda_bti) || lambda_dice < 0 || lambda_bti < 0) {
        throw ConfigError("loss weights must be finite and non-negative");
    }
}

Tensor one_hot(const LabelMap& labels, Index num_classes) {
    if (labels.rank() < 2) throw InvalidArgument("one_hot: expected (batch, spatial...) labels");
    const Index batch = labels.dim(0);
    const Index s = labels.numel() / batch;
    Shape shape{batch, num_classes};
    shape.insert(shape.end(), labels.shape().begin() + 1, labels.shape().end());
    Tensor out(shape);
    for (Index b = 0; b < batch; ++b) {
        for (Index p = 0; p < s; ++p) {
            const std::int32_t c = labels[b * s + p];
            if (c < 0 || c >= num_classes) {
                throw InvalidArgument("one_hot: label " + std::to_string(c) + " outside [0, " +
                                      std::to_string(num_classes) + ")");
            }
            out[(b * num_classes + c) * s + p] = 1.0;
        }
    }
    return out;
}

Var ce_loss(const Var& f, const Tensor& g, const BinaryMask* mask) {
    const auto [batch, classes, s] = check_pair(f, g, mask);
    const double inv_m = 1.0 / static_cast<double>(batch * s);
    double loss = 0.0;
    for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < classes; ++c) {
            for (Index p = 0; p < s; ++p) {
                const double v = mask_at(mask, b, p, s);
                const Index i = (b * classes + c) * s + p;
                const double gv = g[i] * v;
                if (gv != 0.0) loss -= gv * std::log(std::max(f.value()[i] * v, kLogFloor));
            }
        }
    }
    auto mask_copy = mask ? std::make_shared<BinaryMask>(*mask) : nullptr;
    auto gt = std::make_shared<Tensor>(g);
    return make_result(Tensor::constant({1}, loss * inv_m), {f},
                       [=, batch = batch, classes = classes, s = s](detail::Node& n) {
                           auto* gf = n.input_grad(0);
                           if (!gf) return;
                           const Tensor& fv = n.inputs[0]->value;
                           const double scale = n.grad[0] * inv_m;
                           for (Index b = 0; b < batch; ++b) {
                               for (Index c = 0; c < classes; ++c) {
                                   for (Index p = 0; p < s; ++p) {
                                       const double v = mask_at(mask_copy.get(), b, p, s);
                                       const Index i = (b * classes + c) * s + p;
                                       const double fm = fv[i] * v;
                                       if ((*gt)[i] * v != 0.0 && fm > kLogFloor) {
                                           (*gf)[i] -= scale * (*gt)[i] * v * v / fm;
                                       }
                                   }
                               }
                           }
                       });
}

Var dice_loss(const Var& f, const Tensor& g, const BinaryMask* mask, double eps) {
    const auto [batch, classes, s] = check_pair(f, g, mask);
    if (classes < 2) throw InvalidArgument("dice_loss: needs at least two classes");
    // Per foreground class: intersection, prediction mass, ground-truth mass.
    auto sums = std::make_shared<Eigen::ArrayX3d>(Eigen::ArrayX3d::Zero(classes, 3));
    for (Index b = 0; b < batch; ++b) {
        for (Index c = 1; c < classes; ++c) {
            for (Index p = 0; p < s; ++p) {
                const double v = mask_at(mask, b, p, s);
                const Index i = (b * classes + c) * s + p;
                const double fm = f.value()[i] * v, gm = g[i] * v;
                (*sums)(c, 0) += fm * gm;
                (*sums)(c, 1) += fm;
                (*sums)(c, 2) += gm;
            }
        }
    }
    double mean_dice = 0.0;
    for (Index c = 1; c < classes; ++c) {
        mean_dice += (2.0 * (*sums)(c, 0) + eps) / ((*sums)(c, 1) + (*sums)(c, 2) + eps);
    }
    mean_dice /= static_cast<double>(classes - 1);
    auto mask_copy = mask ? std::make_shared<BinaryMask>(*mask) : nullptr;
    auto gt = std::make_shared<Tensor>(g);
    return make_result(Tensor::constant({1}, 1.0 - mean_dice), {f},
                       [=, batch = batch, classes = classes, s = s](detail::Node& n) {
                           auto* gf = n.input_grad(0);
                           if (!gf) return;
                           const double scale = -n.grad[0] / static_cast<double>(classes - 1);
                           for (Index c = 1; c < classes; ++c) {
                               const double num = 2.0 * (*sums)(c, 0) + eps;
                               const double den = (*sums)(c, 1) + (*sums)(c, 2) + eps;
                               for (Index b = 0; b < batch; ++b) {
                                   for (Index p = 0; p < s; ++p) {
                                       const double v = mask_at(mask_copy.get(), b, p, s);
                                       if (v == 0.0) continue;
                                       const Index i = (b * classes + c) * s + p;
                                       const double gm = (*gt)[i] * v;
                                       (*gf)[i] += scale * v * (2.0 * gm * den - num) / (den * den);
                                   }
                               }
                           }
                       });
}

Var pixel_loss(const Var& f, const Tensor& g, const LossConfig& cfg, const BinaryMask* mask) {
    Var ce = ce_loss(f, g, mask);
    if (cfg.pixel_ce_only) return ce;
    return add(ce, scale(dice_loss(f, g, mask), cfg.lambda_dice));
}

Var bti_loss(const Var& f, const Tensor& g, const CriticalPixelMap& v, const LossConfig& cfg) {
    return pixel_loss(f, g, cfg, &v);
}

LossBreakdown total_loss(const Var& f, const Tensor& g, const ClassTree& tree, const LossConfig& cfg) {
    cfg.validate();
    if (f.value().rank() < 3 || f.value().dim(1) != tree.num_classes()) {
        throw InvalidArgument("total_loss: likelihood channels do not match the class tree (" +
                              std::to_string(tree.num_classes()) + " classes)");
    }
    LossBreakdown out;
    const CriticalPixelMap v = bti_critical_map(argmax_labels(f.value()), tree, out.budget);
    out.critical_voxels = v.data().cast<Index>().sum();
    Var ce = ce_loss(f, g);
    Var dice = dice_loss(f, g);
    Var bti = bti_loss(f, g, v, cfg);
    out.ce = ce.value()[0];
    out.dice = dice.value()[0];
    out.bti = bti.value()[0];
    out.total = add(add(ce, scale(dice, cfg.lambda_dice)), scale(bti, cfg.lambda_bti));
    return out;
}

double dsc(const LabelMap& pred, const LabelMap& gt, std::int32_t class_id, Index num_classes) {
    check_label_pair(pred, gt, class_id, num_classes);
    const auto a = (pred.data() == class_id);
    const auto b = (gt.data() == class_id);
    const double inter = static_cast<double>((a && b).count());
    const double total = static_cast<double>(a.count() + b.count());
    return total == 0.0 ? 1.0 : 2.0 * inter / total;
}

BinaryMask surface_voxels(const LabelMap& labels, std::int32_t class_id) {
    const Shape& shape = labels.shape();
    const Index rank = labels.rank();
    const Shape strides = row_major_strides(shape);
    BinaryMask out(shape);
    std::vector<Index> coord(static_cast<std::size_t>(rank));
    for (Index i = 0; i < labels.numel(); ++i) {
        if (labels[i] != class_id) continue;
        unravel(i, shape, coord.data());
        bool surface = false;
        for (Index a = 1; a < rank && !surface; ++a) {
            surface = coord[a] == 0 || coord[a] == shape[a] - 1 || labels[i - strides[a]] != class_id ||
                      labels[i + strides[a]] != class_id;
        }
        out[i] = surface ? 1 : 0;
    }
    return out;
}

Tensor squared_distance_transform(const BinaryMask& seeds) {
    const Shape& shape = seeds.shape();
    Tensor dist(shape);
    constexpr double inf = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < seeds.numel(); ++i) dist[i] = seeds[i] ? 0.0 : inf;
    const Shape strides = row_major_strides(shape);
    Index longest = 0;
    for (Index e : shape) longest = std::max(longest, e);
    std::vector<Index> v(static_cast<std::size_t>(longest));
    std::vector<double> z(static_cast<std::size_t>(longest + 1)), buf(static_cast<std::size_t>(longest));
    for (Index axis = 1; axis < seeds.rank(); ++axis) {
        const Index n = shape[axis];
        const Index stride = strides[axis];
        Index outer = 1;
        for (Index a = 0; a < axis; ++a) outer *= shape[a];
        for (Index o = 0; o < outer; ++o) {
            for (Index in = 0; in < stride; ++in) {
                double* line = dist.raw() + o * n * stride + in;
                edt_1d(line, n, stride, line, v, z, buf);
            }
        }
    }
    return dist;
}

double hausdorff(const LabelMap& pred, const LabelMap& gt, std::int32_t class_id, Index num_classes,
                 double percentile) {
    check_label_pair(pred, gt, class_id, num_classes);
    if (pred.rank() < 2 || pred.dim(0) != 1) {
        throw InvalidArgument("hausdorff: expects a single case shaped (1, spatial...)");
    }
    if (!(percentile > 0.0 && percentile <= 100.0)) throw InvalidArgument("hausdorff: percentile must be in (0, 100]");
    const BinaryMask sa = surface_voxels(pred, class_id);
    const BinaryMask sb = surface_voxels(gt, class_id);
    const bool ea = sa.data().cast<int>().sum() == 0;
    const bool eb = sb.data().cast<int>().sum() == 0;
    if (ea && eb) return 0.0;
    if (ea || eb) {
        double diag = 0.0;
        for (Index a = 1; a < pred.rank(); ++a) diag += double(pred.dim(a)) * double(pred.dim(a));
        return std::sqrt(diag);
    }
    const Tensor to_b = squared_distance_transform(sb);
    const Tensor to_a = squared_distance_transform(sa);
    std::vector<double> d_ab, d_ba;
    for (Index i = 0; i < sa.numel(); ++i) {
        if (sa[i]) d_ab.push_back(std::sqrt(to_b[i]));
        if (sb[i]) d_ba.push_back(std::sqrt(to_a[i]));
    }
    return std::max(percentile_of(std::move(d_ab), percentile), percentile_of(std::move(d_ba), percentile));
}

Index count_forbidden_adjacencies(const LabelMap& labels,
                                  const std::vector<std::pair<std::int32_t, std::int32_t>>& forbidden) {
    if (labels.rank() < 2) throw InvalidArgument("count_forbidden_adjacencies: expected (batch, spatial...)");
    if (forbidden.empty() || labels.numel() == 0) return 0;
    const Index num_classes = labels.data().maxCoeff() + 1;
    std::vector<std::uint8_t> bad(static_cast<std::size_t>(num_classes * num_classes), 0);
    for (const auto& [a, b] : forbidden) {
        if (a < num_classes && b < num_classes && a >= 0 && b >= 0) {
            bad[static_cast<std::size_t>(a * num_classes + b)] = 1;
            bad[static_cast<std::size_t>(b * num_classes + a)] = 1;
        }
    }
    const Shape& shape = labels.shape();
    const Index rank = labels.rank() - 1;
    // Lexicographically positive offsets of the Moore neighborhood: each
    // unordered pair is visited once.
    std::vector<Shape> offsets;
    const Index taps = static_cast<Index>(std::pow(3, rank));
    for (Index t = 0; t < taps; ++t) {
        Shape off(static_cast<std::size_t>(rank));
        Index r = t;
        for (Index a = rank - 1; a >= 0; --a) {
            off[a] = r % 3 - 1;
            r /= 3;
        }
        const auto first = std::find_if(off.begin(), off.end(), [](Index x) { return x != 0; });
        if (first != off.end() && *first > 0) offsets.push_back(off);
    }
    const Shape strides = row_major_strides(shape);
    Index count = 0;
    std::vector<Index> coord(shape.size());
    for (Index i = 0; i < labels.numel(); ++i) {
        unravel(i, shape, coord.data());
        for (const Shape& off : offsets) {
            Index j = i;
            bool inside = true;
            for (Index a = 0; a < rank; ++a) {
                const Index c = coord[a + 1] + off[a];
                if (c < 0 || c >= shape[a + 1]) {
                    inside = false;
                    break;
                }
                j += off[a] * strides[a + 1];
            }
            if (inside && bad[static_cast<std::size_t>(labels[i] * num_classes + labels[j])]) ++count;
        }
    }
    return count;
}

}  // namespace nextou
