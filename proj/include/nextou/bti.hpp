#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nextou/tensor.hpp"

namespace nextou {

/// Binary masks and label maps are (batch, spatial...) with any spatial rank;
/// the batch axis is never dilated across.
using CriticalPixelMap = BinaryMask;

/// Mask-dilation convolutions performed; TI costs c(c-1), BTI 2(c-1).
struct InteractionBudget {
    Index conv_count = 0;
    /// Divisions skipped because one side holds only unconstrained classes.
    Index skipped_divisions = 0;
};

enum class ConstraintKind {
    exclusion,   // the two sides must not touch
    containment, // the left side must not touch anything outside left ∪ right
};

struct Division {
    std::vector<std::int32_t> left;
    std::vector<std::int32_t> right;
    ConstraintKind kind = ConstraintKind::exclusion;
};

/// Binary tree over class ids. Leaves are classes; every internal node
/// splits its merged class set into the (left, right) pair checked by one
/// division.
///
/// Text form: `[[[0,1],2],3]`. `[a<b]` makes a containment division (a lies
/// inside b), leaves may carry names (`3:aorta`) and `~0` marks class 0 as
/// unconstrained.
class ClassTree {
public:
    struct Node {
        std::int32_t class_id = -1;  // leaves only
        std::string name;
        Index left = -1;
        Index right = -1;
        ConstraintKind kind = ConstraintKind::exclusion;
        std::vector<std::int32_t> classes;  // merged class set of the subtree
    };

    static ClassTree parse(std::string_view text);
    static ClassTree balanced(Index num_classes);
    static ClassTree chain(Index num_classes);

    Index num_classes() const { return num_leaves(); }
    Index num_leaves() const;    // n_0
    Index num_internal() const;  // n_2
    Index num_divisions() const { return num_internal(); }

    /// Divisions in post-order (children before parents).
    std::vector<Division> divisions() const;
    bool is_unconstrained(std::int32_t class_id) const;
    const std::vector<Node>& nodes() const { return nodes_; }
    Index root() const { return root_; }

    std::string to_string() const;

private:
    void validate() const;
    void finish();

    std::vector<Node> nodes_;
    std::vector<std::int32_t> unconstrained_;
    Index root_ = -1;
};

/// One-iteration dilation with the all-ones 3^rank kernel over the spatial
/// axes of a (batch, spatial...) mask.
BinaryMask dilate(const BinaryMask& mask);

/// Critical pixels where two disjoint masks touch:
/// (dilate(a) & b) | (dilate(b) & a). Costs two convolutions.
CriticalPixelMap pairwise_critical(const BinaryMask& mask_a, const BinaryMask& mask_b, InteractionBudget& budget);

/// Original TI module: union over the given class pairs (all unordered
/// pairs when empty).
CriticalPixelMap ti_critical_map(const LabelMap& labels, Index num_classes,
                                 const std::vector<std::pair<std::int32_t, std::int32_t>>& pairs,
                                 InteractionBudget& budget);

/// Critical map of a single division on merged class masks.
CriticalPixelMap division_critical_map(const LabelMap& labels, const Division& division, Index num_classes,
                                       InteractionBudget& budget);

/// BTI module: union of division_critical_map over the tree's divisions.
CriticalPixelMap bti_critical_map(const LabelMap& labels, const ClassTree& tree, InteractionBudget& budget);

/// All unordered pairs {i, j} with i < j < num_classes.
std::vector<std::pair<std::int32_t, std::int32_t>> all_class_pairs(Index num_classes);

/// Per-voxel argmax over the channel axis of (batch, classes, spatial...);
/// ties go to the lowest class id.
LabelMap argmax_labels(const Tensor& scores);

/// Binary mask of voxels whose label is in `classes`.
BinaryMask class_mask(const LabelMap& labels, const std::vector<std::int32_t>& classes, Index num_classes);

}  // namespace nextou
