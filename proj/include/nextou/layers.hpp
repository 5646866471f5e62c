#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "nextou/ops.hpp"

namespace nextou {

enum class NormKind { batch, instance };

using Rng = std::mt19937_64;

struct ParameterRef {
    std::string name;
    Var* var;
};

struct BufferRef {
    std::string name;
    Tensor* tensor;
};

/// Flat registry of named learnable parameters and non-learnable buffers
/// (running statistics) of a model.
class ParameterSet {
public:
    void add(std::string name, Var& var) { params_.push_back({std::move(name), &var}); }
    void add_buffer(std::string name, Tensor& tensor) { buffers_.push_back({std::move(name), &tensor}); }

    const std::vector<ParameterRef>& params() const { return params_; }
    const std::vector<BufferRef>& buffers() const { return buffers_; }

    Index count() const {
        Index n = 0;
        for (const auto& p : params_) n += p.var->numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.var->zero_grad();
    }

    /// Overwrites every learnable parameter (not buffers) with `value`.
    void fill(double value) {
        for (auto& p : params_) p.var->mutable_value().data().setConstant(value);
    }

private:
    std::vector<ParameterRef> params_;
    std::vector<BufferRef> buffers_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Tensor uniform_init(Shape shape, Index fan_in, Rng& rng);

struct Norm {
    NormKind kind = NormKind::instance;
    Var gamma;
    Var beta;
    Tensor running_mean;
    Tensor running_var;

    /// `zero_affine` makes the layer output exactly zero until trained.
    static Norm create(Index channels, NormKind kind, bool zero_affine = false);

    Var operator()(const Var& x, bool training);
    void collect(ParameterSet& set, const std::string& prefix);
};

struct PointwiseLinear {
    Var weight;  // (out, in)
    Var bias;    // (out)

    static PointwiseLinear create(Index in, Index out, Rng& rng);

    Var operator()(const Var& x) const { return pointwise_linear(x, weight, bias); }
    void collect(ParameterSet& set, const std::string& prefix);
};

/// 3^rank convolution (padding 1) followed by normalization and LeakyReLU.
struct ConvNormAct {
    Var weight;  // (out, in * 3^rank)
    Var bias;
    Norm norm;
    Shape stride;

    static ConvNormAct create(Index in, Index out, Shape stride, NormKind kind, Rng& rng);

    Var operator()(const Var& x, bool training);
    void collect(ParameterSet& set, const std::string& prefix);
};

struct ConvTranspose {
    Var weight;  // (in, out * prod(stride))
    Var bias;
    Shape stride;

    static ConvTranspose create(Index in, Index out, Shape stride, Rng& rng);

    Var operator()(const Var& x) const { return conv_transpose(x, weight, bias, stride); }
    void collect(ParameterSet& set, const std::string& prefix);
};

}  // namespace nextou
