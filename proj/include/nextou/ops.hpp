#pragma once

#include <memory>
#include <vector>

#include "nextou/autograd.hpp"

// Differentiable tensor ops over the autograd tape. Feature maps are
// (batch, channels, spatial...) and token sets are (batch, tokens, channels).

namespace nextou {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var sum(const Var& a);
Var mean(const Var& a);

/// x + p where p has shape (1, rest...) and is broadcast over the batch axis.
Var add_batch_broadcast(const Var& x, const Var& p);

/// 1x1 linear map over channels: weight (c_out, c_in), bias (c_out).
Var pointwise_linear(const Var& x, const Var& weight, const Var& bias);

/// 3^rank convolution with zero padding 1 and per-axis stride.
/// weight (c_out, c_in * 3^rank), bias (c_out).
Var conv3(const Var& x, const Var& weight, const Var& bias, const Shape& stride);

/// Transposed convolution with kernel == stride per axis (non-overlapping
/// upsampling). weight (c_in, c_out * prod(stride)), bias (c_out).
Var conv_transpose(const Var& x, const Var& weight, const Var& bias, const Shape& stride);

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// Training mode normalizes with batch statistics and updates the running
/// estimates in place; eval mode uses the running estimates.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

Var gelu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.01);

/// Softmax over the channel axis of a (batch, channels, spatial...) map.
Var softmax_channels(const Var& x);

Var concat_channels(const Var& a, const Var& b);

using IndexMap = std::shared_ptr<const std::vector<Index>>;

/// out[i] = index[i] >= 0 ? x[index[i]] : 0, for flat indices into x.
Var gather(const Var& x, IndexMap index, Shape out_shape);

/// out = zeros(out_shape); out[index[i]] += x[i] for index[i] >= 0.
Var scatter(const Var& x, IndexMap index, Shape out_shape);

/// (batch, channels, spatial...) -> (batch, prod(spatial), channels).
Var to_tokens(const Var& fmap);

/// (batch, tokens, channels) -> (batch, channels, extents...).
Var from_tokens(const Var& tokens, const Shape& extents);

}  // namespace nextou
