#include "nextou/bench.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include <nlohmann/json.hpp>

#include "nextou/error.hpp"

namespace nextou {

LabelMap random_labels(const Shape& shape, Index num_classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    LabelMap labels(shape);
    for (Index i = 0; i < labels.numel(); ++i) labels[i] = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(num_classes));
    return labels;
}

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

BenchReport bench_ti_bti(Index num_classes, const Shape& extents, const ClassTree& tree, Index repeats,
                         std::uint64_t seed) {
    if (num_classes < 2) throw InvalidArgument("bench: needs at least two classes");
    if (tree.num_classes() != num_classes) {
        throw InvalidArgument("bench: tree has " + std::to_string(tree.num_classes()) + " classes, expected " +
                              std::to_string(num_classes));
    }
    if (repeats < 1) throw InvalidArgument("bench: repeats must be >= 1");
    Shape shape{1};
    shape.insert(shape.end(), extents.begin(), extents.end());
    const LabelMap labels = random_labels(shape, num_classes, seed);

    BenchReport r;
    r.num_classes = num_classes;
    r.extents = extents;
    CriticalPixelMap ti, bti;
    using clock = std::chrono::steady_clock;
    // Alternate the two so drift in machine load hits both equally.
    for (Index k = 0; k < repeats; ++k) {
        InteractionBudget tb, bb;
        auto t0 = clock::now();
        ti = ti_critical_map(labels, num_classes, {}, tb);
        auto t1 = clock::now();
        bti = bti_critical_map(labels, tree, bb);
        auto t2 = clock::now();
        r.ti_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
        r.bti_seconds.push_back(std::chrono::duration<double>(t2 - t1).count());
        r.ti_budget = tb;
        r.bti_budget = bb;
    }
    r.ti_median = median(r.ti_seconds);
    r.bti_median = median(r.bti_seconds);
    r.maps_equal = ti == bti;
    r.ti_critical = ti.data().cast<Index>().sum();
    r.bti_critical = bti.data().cast<Index>().sum();
    return r;
}

std::string BenchReport::to_json() const {
    nlohmann::json j = {{"classes", num_classes},
                        {"extents", extents},
                        {"ti_conv_count", ti_budget.conv_count},
                        {"bti_conv_count", bti_budget.conv_count},
                        {"bti_skipped_divisions", bti_budget.skipped_divisions},
                        {"ti_seconds", ti_seconds},
                        {"bti_seconds", bti_seconds},
                        {"ti_median", ti_median},
                        {"bti_median", bti_median},
                        {"ratio", ratio()},
                        {"maps_equal", maps_equal},
                        {"ti_critical", ti_critical},
                        {"bti_critical", bti_critical}};
    return j.dump();
}

}  // namespace nextou
