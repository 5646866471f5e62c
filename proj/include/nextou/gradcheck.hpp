#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nextou/layers.hpp"

namespace nextou {

struct GradcheckReport {
    std::string component;
    Shape shape;
    Index checked_entries = 0;
    double max_abs_error = 0.0;
    /// max |analytic - numeric| / max(max |numeric|, 1e-12) over all checked entries.
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;

    std::string to_json() const;
};

struct GradcheckOptions {
    double step = 1e-6;
    /// Input entries checked (all when the input is smaller).
    Index max_input_entries = 256;
    /// Parameter entries checked, sampled across all parameters.
    Index max_param_entries = 96;
    std::uint64_t seed = 7;
};

/// Central differences of L = sum(R * f(x)) for a fixed random R, against
/// reverse-mode gradients w.r.t. x and the given parameters.
GradcheckReport gradcheck_function(const std::string& name, const std::function<Var(const Var&)>& f, const Tensor& x,
                                   ParameterSet params, double tolerance, const GradcheckOptions& options = {});

/// Registered components: ffn, max_relative_conv, p_grapher, sw_grapher,
/// eviG_block_pair, total_loss, max_pool_with_indices, network.
std::vector<std::string> gradcheck_components();

/// Runs the named component on its default shape (or `shape` when given).
/// A negative tolerance selects the component default. Throws Error with
/// code unknown_component for unregistered names.
GradcheckReport gradcheck(const std::string& component, const Shape& shape = {}, double tolerance = -1.0,
                          const GradcheckOptions& options = {});

/// Values spread evenly over [-1, 1] in random order, so no two entries tie.
Tensor tie_free_input(const Shape& shape, std::uint64_t seed);

}  // namespace nextou
