#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nextou/bti.hpp"

namespace nextou {

struct BenchReport {
    Index num_classes = 0;
    Shape extents;
    InteractionBudget ti_budget;   // per run
    InteractionBudget bti_budget;  // per run
    std::vector<double> ti_seconds;
    std::vector<double> bti_seconds;
    double ti_median = 0.0;
    double bti_median = 0.0;
    bool maps_equal = false;
    Index ti_critical = 0;
    Index bti_critical = 0;

    double ratio() const { return ti_median > 0.0 ? bti_median / ti_median : 0.0; }
    std::string to_json() const;
};

/// Times ti_critical_map (all pairs) against bti_critical_map on the same
/// uniformly random label map of shape (1, extents...).
BenchReport bench_ti_bti(Index num_classes, const Shape& extents, const ClassTree& tree, Index repeats = 5,
                         std::uint64_t seed = 0);

LabelMap random_labels(const Shape& shape, Index num_classes, std::uint64_t seed);

double median(std::vector<double> values);

}  // namespace nextou
