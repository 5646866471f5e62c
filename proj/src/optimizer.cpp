#include "nextou/optimizer.hpp"

#include <algorithm>
#include <cmath>

namespace nextou {

Sgd::Sgd(ParameterSet params, OptimizerConfig config, Index total_iterations)
    : params_(std::move(params)), config_(std::move(config)), total_(total_iterations) {
    config_.validate();
    for (const ParameterRef& p : params_.params()) momentum_.emplace_back(p.var->shape());
}

double Sgd::learning_rate(Index iteration) const {
    if (config_.schedule == "constant" || total_ <= 0) return config_.learning_rate;
    const double frac = std::clamp(1.0 - double(iteration) / double(total_), 0.0, 1.0);
    return config_.learning_rate * std::pow(frac, config_.poly_power);
}

double Sgd::step(Index iteration) {
    const auto& ps = params_.params();
    double sq = 0.0;
    for (const ParameterRef& p : ps) {
        if (p.var->has_grad()) sq += p.var->grad().data().square().sum();
    }
    const double norm = std::sqrt(sq);
    const double clip = config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
    const double lr = learning_rate(iteration);
    const double mu = config_.momentum;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Var& v = *ps[i].var;
        if (!v.has_grad()) continue;
        auto& w = v.mutable_value().data();
        const Tensor::Array g = clip * v.grad().data() + config_.weight_decay * w;
        auto& m = momentum_[i].data();
        m = mu * m + g;
        if (config_.nesterov) {
            w -= lr * (g + mu * m);
        } else {
            w -= lr * m;
        }
    }
    return norm;
}

}  // namespace nextou
