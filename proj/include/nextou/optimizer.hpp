#pragma once

#include <vector>

#include "nextou/layers.hpp"
#include "nextou/run_config.hpp"

namespace nextou {

/// Momentum SGD (optionally Nesterov) with L2 weight
/// decay, global-norm gradient clipping and poly learning-rate decay
/// lr_t = lr * (1 - t / T)^power.
class Sgd {
public:
    Sgd(ParameterSet params, OptimizerConfig config, Index total_iterations);

    double learning_rate(Index iteration) const;
    /// Applies one update from the current gradients; returns the pre-clip
    /// gradient norm. Parameters without a gradient are left untouched.
    double step(Index iteration);

    std::vector<Tensor>& momentum() { return momentum_; }
    const std::vector<Tensor>& momentum() const { return momentum_; }
    const ParameterSet& params() const { return params_; }

private:
    ParameterSet params_;
    OptimizerConfig config_;
    Index total_;
    std::vector<Tensor> momentum_;
};

}  // namespace nextou
