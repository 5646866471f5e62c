#include "nextou/phantom.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <numbers>
#include <random>
#include <thread>

#include "nextou/error.hpp"

namespace nextou {

namespace {

using Rng = std::mt19937_64;
using Vec3 = std::array<double, 3>;

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct Segment {
    Vec3 a, b;
    double radius;
    bool core;
};

double segment_distance(const Vec3& p, const Segment& s) {
    Vec3 ab{}, ap{};
    double len2 = 0.0, t = 0.0;
    for (int i = 0; i < 3; ++i) {
        ab[i] = s.b[i] - s.a[i];
        ap[i] = p[i] - s.a[i];
        len2 += ab[i] * ab[i];
        t += ab[i] * ap[i];
    }
    t = len2 > 0.0 ? std::clamp(t / len2, 0.0, 1.0) : 0.0;
    double d2 = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double d = ap[i] - t * ab[i];
        d2 += d * d;
    }
    return std::sqrt(d2);
}

/// Voxel coordinates as (z, y, x); 2D grids use z = 0.
Vec3 coord_of(Index i, const Shape& extents) {
    Vec3 c{0.0, 0.0, 0.0};
    Index r = i;
    for (Index a = static_cast<Index>(extents.size()) - 1, slot = 2; a >= 0; --a, --slot) {
        c[static_cast<std::size_t>(slot)] = static_cast<double>(r % extents[a]);
        r /= extents[a];
    }
    return c;
}

/// Tubes: class 1 within the segment radius, class 2 (when present) within
/// 0.4 of it on segments thick enough to keep a wall around the core.
LabelMap render_segments(const Shape& extents, const std::vector<Segment>& segments, Index num_classes) {
    Shape shape{1};
    shape.insert(shape.end(), extents.begin(), extents.end());
    LabelMap labels(shape);
    for (Index i = 0; i < labels.numel(); ++i) {
        const Vec3 p = coord_of(i, extents);
        std::int32_t label = 0;
        for (const Segment& s : segments) {
            const double d = segment_distance(p, s);
            if (num_classes > 2 && s.core && d <= 0.4 * s.radius) {
                label = 2;
                break;
            }
            if (d <= s.radius) label = 1;
        }
        labels[i] = label;
    }
    return labels;
}

std::vector<Segment> tube_geometry(const PhantomSpec& spec, Rng& rng) {
    const double h = double(spec.extents[0]), w = double(spec.extents[1]);
    const double m = std::min(h, w);
    const double radius = spec.num_classes > 2 ? uniform(rng, 4.0, std::max(4.5, 0.1 * m))
                                               : uniform(rng, std::max(1.5, 0.04 * m), std::max(2.0, 0.07 * m));
    const bool vertical = uniform(rng, 0.0, 1.0) < 0.5;
    const double along = vertical ? h : w, across = vertical ? w : h;
    const double margin = radius + 2.0;
    const double amp1 = uniform(rng, 0.05, 0.2) * across, amp2 = uniform(rng, 0.0, 0.08) * across;
    const double f1 = uniform(rng, 0.5, 1.5), f2 = uniform(rng, 1.5, 3.0);
    const double p1 = uniform(rng, 0.0, 2 * std::numbers::pi), p2 = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double mid = across / 2.0 + uniform(rng, -0.1, 0.1) * across;
    const Index samples = static_cast<Index>(along);
    std::vector<Segment> segments;
    Vec3 prev{};
    for (Index s = 0; s <= samples; ++s) {
        const double t = margin + (along - 2 * margin) * double(s) / double(samples);
        const double u = t / along;
        double c = mid + amp1 * std::sin(2 * std::numbers::pi * f1 * u + p1) +
                   amp2 * std::sin(2 * std::numbers::pi * f2 * u + p2);
        c = std::clamp(c, margin, across - margin);
        const Vec3 p = vertical ? Vec3{0.0, t, c} : Vec3{0.0, c, t};
        if (s > 0) segments.push_back({prev, p, radius, true});
        prev = p;
    }
    return segments;
}

std::vector<Segment> tree_geometry(const PhantomSpec& spec, Rng& rng) {
    const Shape& e = spec.extents;
    const double m = double(*std::min_element(e.begin(), e.end()));
    // Grow along the longest axis from one face.
    const auto axis = static_cast<std::size_t>(std::max_element(e.begin(), e.end()) - e.begin());
    Vec3 start{double(e[0]) / 2, double(e[1]) / 2, double(e[2]) / 2};
    for (std::size_t a = 0; a < 3; ++a) {
        if (a != axis) start[a] += uniform(rng, -0.1, 0.1) * double(e[a]);
    }
    start[axis] = 2.0;
    Vec3 dir{0.0, 0.0, 0.0};
    dir[axis] = 1.0;
    const double root_radius = spec.num_classes > 2 ? uniform(rng, 4.0, std::max(4.5, 0.12 * m))
                                                    : uniform(rng, std::max(1.5, 0.05 * m), std::max(2.0, 0.08 * m));
    std::vector<Segment> segments;
    struct Tip {
        Vec3 p, d;
        double len, radius;
        int depth;
    };
    std::vector<Tip> stack{{start, dir, 0.45 * double(e[axis]), root_radius, 0}};
    while (!stack.empty()) {
        const Tip t = stack.back();
        stack.pop_back();
        Vec3 end{};
        for (int i = 0; i < 3; ++i) end[i] = t.p[i] + t.len * t.d[i];
        segments.push_back({t.p, end, t.radius, t.radius >= 3.5});
        if (t.depth == 2) continue;
        // Random unit vector orthogonal to d spans the branching plane.
        Vec3 r{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
        double dot = 0.0;
        for (int i = 0; i < 3; ++i) dot += r[i] * t.d[i];
        double norm = 0.0;
        for (int i = 0; i < 3; ++i) {
            r[i] -= dot * t.d[i];
            norm += r[i] * r[i];
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        for (double sign : {-1.0, 1.0}) {
            const double angle = uniform(rng, 0.45, 0.8);
            Tip child{end, {}, t.len * 0.7, std::max(1.0, t.radius * 0.75), t.depth + 1};
            for (int i = 0; i < 3; ++i) {
                child.d[i] = std::cos(angle) * t.d[i] + sign * std::sin(angle) * r[i] / norm;
            }
            stack.push_back(child);
        }
    }
    return segments;
}

/// Nested layers: voxel label is the deepest layer whose (modulated) radius
/// contains it. Layer thicknesses shrink inwards.
LabelMap nested_geometry(const PhantomSpec& spec, Rng& rng, Vec3& center) {
    const Shape& e = spec.extents;
    const bool three_d = e.size() == 3;
    const double m = double(*std::min_element(e.begin(), e.end()));
    center = {0.0, 0.0, 0.0};
    for (std::size_t a = 0; a < e.size(); ++a) {
        center[3 - e.size() + a] = double(e[a]) / 2 + uniform(rng, -0.08, 0.08) * double(e[a]);
    }
    const Index layers = spec.num_classes - 1;
    std::vector<double> radii(static_cast<std::size_t>(layers));
    radii[0] = uniform(rng, 0.28, 0.38) * m;
    for (Index k = 1; k < layers; ++k) {
        // At least 2.5 voxels so classes two layers apart never touch diagonally.
        const double thickness =
            std::max(2.5, radii[0] * uniform(rng, 0.25, 0.4) / double(std::max<Index>(layers - 1, 1)));
        radii[k] = radii[k - 1] - thickness;
    }
    const double a1 = uniform(rng, 0.0, 0.08), a2 = uniform(rng, 0.0, 0.06);
    const double p1 = uniform(rng, 0.0, 2 * std::numbers::pi), p2 = uniform(rng, 0.0, 2 * std::numbers::pi);
    Shape shape{1};
    shape.insert(shape.end(), e.begin(), e.end());
    LabelMap labels(shape);
    for (Index i = 0; i < labels.numel(); ++i) {
        const Vec3 p = coord_of(i, e);
        const double dz = p[0] - center[0], dy = p[1] - center[1], dx = p[2] - center[2];
        const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
        const double theta = std::atan2(dy, dx);
        const double phi = three_d && r > 0 ? std::acos(std::clamp(dz / r, -1.0, 1.0)) : 0.0;
        const double rho = 1.0 + a1 * std::sin(2 * theta + p1) + a2 * std::sin(3 * (three_d ? phi : theta) + p2);
        std::int32_t label = 0;
        for (Index k = 0; k < layers; ++k) {
            if (r < radii[static_cast<std::size_t>(k)] * rho) label = static_cast<std::int32_t>(k + 1);
        }
        labels[i] = label;
    }
    return labels;
}

bool forbidden_pairs_clear(const LabelMap& labels, Index num_classes, const ClassPairs& pairs) {
    if (pairs.empty()) return true;
    InteractionBudget budget;
    return ti_critical_map(labels, num_classes, pairs, budget).data().cast<int>().sum() == 0;
}

Tensor render_image(const PhantomSpec& spec, const LabelMap& labels, const Vec3& center, Rng& rng) {
    const Shape& e = spec.extents;
    Shape shape{1, 1};
    shape.insert(shape.end(), e.begin(), e.end());
    Tensor image(shape);
    const double denom = double(spec.num_classes - 1);
    const bool nested = spec.kind == PhantomKind::nested_rings2d || spec.kind == PhantomKind::nested_shells3d;
    // Occluded arc (nested kinds) or slab (tubes) of the outermost layer.
    const double occ_start = uniform(rng, 0.0, 1.0);
    const auto occluded = [&](const Vec3& p) {
        if (spec.occlusion <= 0.0) return false;
        double u;
        if (nested) {
            u = (std::atan2(p[1] - center[1], p[2] - center[2]) + std::numbers::pi) / (2 * std::numbers::pi);
        } else {
            u = p[2] / double(e.back());
        }
        const double rel = u - occ_start;
        return rel - std::floor(rel) < spec.occlusion;
    };
    std::array<double, 3> freq{}, phase{};
    for (std::size_t a = 0; a < 3; ++a) {
        freq[a] = uniform(rng, 0.5, 1.5);
        phase[a] = uniform(rng, 0.0, 2 * std::numbers::pi);
    }
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (Index i = 0; i < labels.numel(); ++i) {
        const Vec3 p = coord_of(i, e);
        const std::int32_t k = labels[i];
        double v = double(k) / denom;
        if (k == 1 && occluded(p)) v = 0.0;
        double bias = 0.0;
        for (std::size_t a = 0; a < 3; ++a) {
            const double extent = a + e.size() >= 3 ? double(e[a + e.size() - 3]) : 1.0;
            bias += 0.05 * std::sin(2 * std::numbers::pi * freq[a] * p[a] / extent + phase[a]);
        }
        image[i] = v + bias + (spec.noise_sigma > 0 ? noise(rng) : 0.0);
    }
    return image;
}

}  // namespace

PhantomKind parse_phantom_kind(const std::string& name) {
    if (name == "tube2d") return PhantomKind::tube2d;
    if (name == "nested_rings2d") return PhantomKind::nested_rings2d;
    if (name == "branching_tree3d") return PhantomKind::branching_tree3d;
    if (name == "nested_shells3d") return PhantomKind::nested_shells3d;
    throw ConfigError("unknown phantom kind '" + name + "'");
}

std::string phantom_kind_name(PhantomKind kind) {
    switch (kind) {
        case PhantomKind::tube2d: return "tube2d";
        case PhantomKind::nested_rings2d: return "nested_rings2d";
        case PhantomKind::branching_tree3d: return "branching_tree3d";
        case PhantomKind::nested_shells3d: return "nested_shells3d";
    }
    return "?";
}

Index phantom_rank(PhantomKind kind) {
    return kind == PhantomKind::tube2d || kind == PhantomKind::nested_rings2d ? 2 : 3;
}

void PhantomSpec::validate() const {
    const Index rank = phantom_rank(kind);
    if (static_cast<Index>(extents.size()) != rank) {
        throw ConfigError(phantom_kind_name(kind) + " needs " + std::to_string(rank) + " extents");
    }
    for (Index e : extents) {
        if (e < 16) throw ConfigError("phantom extents must be >= 16 per axis, got " + std::to_string(e));
    }
    const bool tubular = kind == PhantomKind::tube2d || kind == PhantomKind::branching_tree3d;
    if (tubular ? (num_classes < 2 || num_classes > 3) : num_classes < 2) {
        throw ConfigError(phantom_kind_name(kind) + ": unsupported num_classes " + std::to_string(num_classes));
    }
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma must be >= 0");
    if (!(occlusion >= 0.0 && occlusion < 1.0)) throw ConfigError("occlusion must be in [0, 1)");
    if (max_retries < 1) throw ConfigError("max_retries must be >= 1");
    for (const auto& [a, b] : forbidden_adjacency) {
        if (a < 0 || b < 0 || a >= num_classes || b >= num_classes || a == b) {
            throw ConfigError("forbidden pair (" + std::to_string(a) + ", " + std::to_string(b) + ") is invalid");
        }
    }
}

ClassPairs natural_forbidden_pairs(PhantomKind kind, Index num_classes) {
    ClassPairs pairs;
    for (std::int32_t i = 0; i < num_classes; ++i) {
        for (std::int32_t j = i + 2; j < num_classes; ++j) pairs.emplace_back(i, j);
    }
    (void)kind;  // tubes with a core have classes {0,1,2}: only (0, 2), same rule
    return pairs;
}

ClassTree default_tree(PhantomKind kind, Index num_classes) {
    (void)kind;
    std::string text = std::to_string(num_classes - 1);
    for (Index k = num_classes - 2; k >= 0; --k) text = "[" + text + "<" + std::to_string(k) + "]";
    if (num_classes == 2) text = "[0,1]";
    return ClassTree::parse(text);
}

Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const ClassPairs pairs =
        spec.forbidden_adjacency.empty() ? natural_forbidden_pairs(spec.kind, spec.num_classes) : spec.forbidden_adjacency;
    for (Index attempt = 0; attempt < spec.max_retries; ++attempt) {
        Rng rng(splitmix(spec.seed ^ splitmix(static_cast<std::uint64_t>(attempt) + 0x51ed)));
        Vec3 center{};
        LabelMap labels;
        switch (spec.kind) {
            case PhantomKind::tube2d:
                labels = render_segments(spec.extents, tube_geometry(spec, rng), spec.num_classes);
                break;
            case PhantomKind::branching_tree3d:
                labels = render_segments(spec.extents, tree_geometry(spec, rng), spec.num_classes);
                break;
            case PhantomKind::nested_rings2d:
            case PhantomKind::nested_shells3d:
                labels = nested_geometry(spec, rng, center);
                break;
        }
        if (!forbidden_pairs_clear(labels, spec.num_classes, pairs)) continue;
        if (spec.kind == PhantomKind::tube2d && foreground_components(labels) != 1) continue;
        Phantom out;
        out.image = render_image(spec, labels, center, rng);
        out.labels = std::move(labels);
        out.attempts = attempt + 1;
        return out;
    }
    throw GenerationError(phantom_kind_name(spec.kind) + ": forbidden adjacencies still present after " +
                          std::to_string(spec.max_retries) + " attempts (seed " + std::to_string(spec.seed) + ")");
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix(splitmix(a) ^ (b + 0x632be59bd9b4e019ULL)); }

PhantomSpec phantom_variant(const PhantomSpec& base, std::uint64_t stream, std::uint64_t index) {
    PhantomSpec s = base;
    s.seed = splitmix(splitmix(base.seed ^ splitmix(stream)) + index);
    return s;
}

std::vector<Phantom> generate_phantoms(const std::vector<PhantomSpec>& specs, Index workers) {
    std::vector<Phantom> out(specs.size());
    if (workers <= 1 || specs.size() < 2) {
        for (std::size_t i = 0; i < specs.size(); ++i) out[i] = generate_phantom(specs[i]);
        return out;
    }
    std::vector<std::exception_ptr> errors(specs.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < specs.size(); i = next++) {
            try {
                out[i] = generate_phantom(specs[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(workers), specs.size());
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

Index foreground_components(const LabelMap& labels) {
    const Shape& shape = labels.shape();
    const Shape strides = row_major_strides(shape);
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(labels.numel()), 0);
    std::vector<Index> stack;
    std::vector<Index> coord(shape.size());
    Index components = 0;
    for (Index start = 0; start < labels.numel(); ++start) {
        if (labels[start] == 0 || seen[static_cast<std::size_t>(start)]) continue;
        ++components;
        stack.push_back(start);
        seen[static_cast<std::size_t>(start)] = 1;
        while (!stack.empty()) {
            const Index i = stack.back();
            stack.pop_back();
            unravel(i, shape, coord.data());
            for (std::size_t a = 1; a < shape.size(); ++a) {
                for (Index step : {-1, 1}) {
                    const Index c = coord[a] + step;
                    if (c < 0 || c >= shape[a]) continue;
                    const Index j = i + step * strides[a];
                    if (labels[j] != 0 && !seen[static_cast<std::size_t>(j)]) {
                        seen[static_cast<std::size_t>(j)] = 1;
                        stack.push_back(j);
                    }
                }
            }
        }
    }
    return components;
}

}  // namespace nextou
