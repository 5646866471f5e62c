#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "nextou/autograd.hpp"
#include "nextou/bti.hpp"

namespace nextou {

struct LossConfig {
    double lambda_dice = 1.0;
    double lambda_bti = 1e-4;
    /// L_pixel inside the BTI term: ce + lambda_dice * dice, or ce alone.
    bool pixel_ce_only = false;

    /// lambda_bti = 1e-4 for 2D and 1e-6 for 3D.
    static LossConfig defaults_for_rank(Index spatial_rank);
    void validate() const;
};

inline constexpr double kDiceEpsilon = 1e-5;

/// (batch, spatial...) labels -> (batch, classes, spatial...) one-hot.
Tensor one_hot(const LabelMap& labels, Index num_classes);

/// Cross-entropy of probabilities f against one-hot g, averaged over all
/// voxels. With `mask`, f and g are multiplied by the mask first.
Var ce_loss(const Var& f, const Tensor& g, const BinaryMask* mask = nullptr);

/// 1 - mean over foreground classes (1..c-1) of (2 sum fg + eps) / (sum f + sum g + eps),
/// sums taken over the whole batch.
Var dice_loss(const Var& f, const Tensor& g, const BinaryMask* mask = nullptr, double eps = kDiceEpsilon);

/// ce (+ lambda_dice * dice unless pixel_ce_only).
Var pixel_loss(const Var& f, const Tensor& g, const LossConfig& cfg, const BinaryMask* mask = nullptr);

/// L_pixel(f * V, g * V).
Var bti_loss(const Var& f, const Tensor& g, const CriticalPixelMap& v, const LossConfig& cfg);

struct LossBreakdown {
    Var total;
    double ce = 0.0;
    double dice = 0.0;
    double bti = 0.0;
    Index critical_voxels = 0;
    InteractionBudget budget;
};

/// ce + lambda_dice * dice + lambda_bti * bti, with V from the BTI map of
/// argmax(f). V is treated as a constant of f.
LossBreakdown total_loss(const Var& f, const Tensor& g, const ClassTree& tree, const LossConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation metrics on hard labels. Both maps must have identical shape.

/// Hard Dice for one class; 1 when the class is absent from both maps.
double dsc(const LabelMap& pred, const LabelMap& gt, std::int32_t class_id, Index num_classes);

/// Symmetric surface distance in voxel units for one case (batch 1):
/// percentile 100 gives the Hausdorff distance, 95 the HD95
/// (max of the two directed 95th percentiles). Empty vs empty gives 0;
/// empty vs non-empty gives the volume diagonal.
double hausdorff(const LabelMap& pred, const LabelMap& gt, std::int32_t class_id, Index num_classes,
                 double percentile = 100.0);

/// Voxels of `class_id` with a face neighbor of another class or outside the volume.
BinaryMask surface_voxels(const LabelMap& labels, std::int32_t class_id);

/// Exact squared Euclidean distance from every voxel of a (batch, spatial...)
/// grid to the nearest set voxel of `seeds` (per batch item).
Tensor squared_distance_transform(const BinaryMask& seeds);

/// Unordered Moore-neighbor voxel pairs whose labels form a forbidden pair.
Index count_forbidden_adjacencies(const LabelMap& labels,
                                  const std::vector<std::pair<std::int32_t, std::int32_t>>& forbidden);

}  // namespace nextou
