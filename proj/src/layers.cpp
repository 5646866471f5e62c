#include "nextou/layers.hpp"

#include <cmath>

namespace nextou {

Tensor uniform_init(Shape shape, Index fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

Norm Norm::create(Index channels, NormKind kind, bool zero_affine) {
    Norm n;
    n.kind = kind;
    n.gamma = Var::parameter(Tensor::constant({channels}, zero_affine ? 0.0 : 1.0));
    n.beta = Var::parameter(Tensor({channels}));
    if (kind == NormKind::batch) {
        n.running_mean = Tensor({channels});
        n.running_var = Tensor::constant({channels}, 1.0);
    }
    return n;
}

Var Norm::operator()(const Var& x, bool training) {
    if (kind == NormKind::instance) return instance_norm(x, gamma, beta);
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
}

void Norm::collect(ParameterSet& set, const std::string& prefix) {
    set.add(prefix + ".gamma", gamma);
    set.add(prefix + ".beta", beta);
    if (kind == NormKind::batch) {
        set.add_buffer(prefix + ".running_mean", running_mean);
        set.add_buffer(prefix + ".running_var", running_var);
    }
}

PointwiseLinear PointwiseLinear::create(Index in, Index out, Rng& rng) {
    return {Var::parameter(uniform_init({out, in}, in, rng)),
            Var::parameter(uniform_init({out}, in, rng))};
}

void PointwiseLinear::collect(ParameterSet& set, const std::string& prefix) {
    set.add(prefix + ".weight", weight);
    set.add(prefix + ".bias", bias);
}

ConvNormAct ConvNormAct::create(Index in, Index out, Shape stride, NormKind kind, Rng& rng) {
    Index taps = 1;
    for (std::size_t a = 0; a < stride.size(); ++a) taps *= 3;
    ConvNormAct c;
    c.weight = Var::parameter(uniform_init({out, in * taps}, in * taps, rng));
    c.bias = Var::parameter(uniform_init({out}, in * taps, rng));
    c.norm = Norm::create(out, kind);
    c.stride = std::move(stride);
    return c;
}

Var ConvNormAct::operator()(const Var& x, bool training) {
    return leaky_relu(norm(conv3(x, weight, bias, stride), training));
}

void ConvNormAct::collect(ParameterSet& set, const std::string& prefix) {
    set.add(prefix + ".weight", weight);
    set.add(prefix + ".bias", bias);
    norm.collect(set, prefix + ".norm");
}

ConvTranspose ConvTranspose::create(Index in, Index out, Shape stride, Rng& rng) {
    const Index taps = shape_numel(stride);
    ConvTranspose t;
    t.weight = Var::parameter(uniform_init({in, out * taps}, in, rng));
    t.bias = Var::parameter(uniform_init({out}, in, rng));
    t.stride = std::move(stride);
    return t;
}

void ConvTranspose::collect(ParameterSet& set, const std::string& prefix) {
    set.add(prefix + ".weight", weight);
    set.add(prefix + ".bias", bias);
}

}  // namespace nextou
