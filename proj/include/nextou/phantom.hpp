#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nextou/bti.hpp"
#include "nextou/tensor.hpp"

namespace nextou {

enum class PhantomKind { tube2d, nested_rings2d, branching_tree3d, nested_shells3d };

PhantomKind parse_phantom_kind(const std::string& name);
std::string phantom_kind_name(PhantomKind kind);
Index phantom_rank(PhantomKind kind);

using ClassPairs = std::vector<std::pair<std::int32_t, std::int32_t>>;

struct PhantomSpec {
    PhantomKind kind = PhantomKind::tube2d;
    Shape extents{64, 64};
    Index num_classes = 2;
    double noise_sigma = 0.1;
    /// Pairs that must never touch in the label map (Moore neighborhood).
    /// Empty means the kind's natural pairs, see natural_forbidden_pairs.
    ClassPairs forbidden_adjacency;
    std::uint64_t seed = 0;
    /// Fraction of the outermost structure layer rendered with background
    /// intensity (labels unchanged); makes the topology prior informative.
    double occlusion = 0.0;
    Index max_retries = 16;

    void validate() const;
};

/// Pairs the generator satisfies by construction: in the nested kinds every
/// layer only touches its direct neighbors; tube and tree cores never touch
/// the background.
ClassPairs natural_forbidden_pairs(PhantomKind kind, Index num_classes);

/// Containment chain `[[2<1]<0]` style tree matching the nesting order.
ClassTree default_tree(PhantomKind kind, Index num_classes);

struct Phantom {
    Tensor image;     // (1, 1, spatial...)
    LabelMap labels;  // (1, spatial...)
    Index attempts = 1;
};

/// Deterministic per seed. Throws GenerationError when no attempt within
/// max_retries satisfies the forbidden adjacencies.
Phantom generate_phantom(const PhantomSpec& spec);

/// Splitmix-based combination of two seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Spec of the i-th member of a derived family (same geometry parameters,
/// seed mixed with `index`).
PhantomSpec phantom_variant(const PhantomSpec& base, std::uint64_t stream, std::uint64_t index);

/// Generates specs in parallel when workers > 1; results are ordered by index.
std::vector<Phantom> generate_phantoms(const std::vector<PhantomSpec>& specs, Index workers = 0);

/// Number of face-connected components of the voxels labeled != 0.
Index foreground_components(const LabelMap& labels);

}  // namespace nextou
