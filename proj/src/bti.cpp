#include "nextou/bti.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <sstream>

namespace nextou {

namespace {

class TreeParser {
public:
    explicit TreeParser(std::string_view text) : text_(text) {}

    Index parse(std::vector<ClassTree::Node>& nodes, std::vector<std::int32_t>& unconstrained) {
        const Index root = parse_node(nodes, unconstrained);
        skip_space();
        if (pos_ != text_.size()) fail("trailing characters");
        return root;
    }

private:
    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError("class tree: " + what + " at offset " + std::to_string(pos_) + " in '" +
                          std::string(text_) + "'");
    }

    void skip_space() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    bool accept(char c) {
        skip_space();
        if (pos_ < text_.size() && text_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    void expect(char c) {
        if (!accept(c)) fail(std::string("expected '") + c + "'");
    }

    std::string parse_name() {
        skip_space();
        const std::size_t start = pos_;
        while (pos_ < text_.size() &&
               (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_' || text_[pos_] == '-')) {
            ++pos_;
        }
        if (start == pos_) fail("expected a name after ':'");
        return std::string(text_.substr(start, pos_ - start));
    }

    Index parse_node(std::vector<ClassTree::Node>& nodes, std::vector<std::int32_t>& unconstrained) {
        ClassTree::Node node;
        if (accept('[')) {
            node.left = parse_node(nodes, unconstrained);
            if (accept('<')) {
                node.kind = ConstraintKind::containment;
            } else {
                expect(',');
            }
            node.right = parse_node(nodes, unconstrained);
            expect(']');
        } else {
            const bool free = accept('~');
            skip_space();
            const std::size_t start = pos_;
            while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
            if (start == pos_) fail("expected '[' or a class id");
            node.class_id = std::stoi(std::string(text_.substr(start, pos_ - start)));
            if (free) unconstrained.push_back(node.class_id);
        }
        if (accept(':')) node.name = parse_name();
        nodes.push_back(std::move(node));
        return static_cast<Index>(nodes.size()) - 1;
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

void check_label_range(const LabelMap& labels, Index num_classes) {
    if (labels.numel() == 0) return;
    const auto lo = labels.data().minCoeff();
    const auto hi = labels.data().maxCoeff();
    if (lo < 0 || hi >= num_classes) {
        throw InvalidArgument("label values must lie in [0, " + std::to_string(num_classes) + "), found range [" +
                              std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
}

}  // namespace

ClassTree ClassTree::parse(std::string_view text) {
    ClassTree tree;
    tree.root_ = TreeParser(text).parse(tree.nodes_, tree.unconstrained_);
    tree.finish();
    return tree;
}

ClassTree ClassTree::balanced(Index num_classes) {
    if (num_classes < 2) throw ConfigError("class tree needs at least two classes");
    std::function<std::string(Index, Index)> build = [&](Index lo, Index hi) -> std::string {
        if (hi - lo == 1) return std::to_string(lo);
        const Index mid = lo + (hi - lo + 1) / 2;
        return "[" + build(lo, mid) + "," + build(mid, hi) + "]";
    };
    return parse(build(0, num_classes));
}

ClassTree ClassTree::chain(Index num_classes) {
    if (num_classes < 2) throw ConfigError("class tree needs at least two classes");
    std::string text = "0";
    for (Index c = 1; c < num_classes; ++c) text = "[" + text + "," + std::to_string(c) + "]";
    return parse(text);
}

void ClassTree::finish() {
    // Children precede parents in nodes_, so one forward pass fills the sets.
    for (Node& n : nodes_) {
        if (n.left < 0) {
            n.classes = {n.class_id};
        } else {
            n.classes = nodes_[n.left].classes;
            const auto& r = nodes_[n.right].classes;
            n.classes.insert(n.classes.end(), r.begin(), r.end());
            std::sort(n.classes.begin(), n.classes.end());
        }
    }
    validate();
}

void ClassTree::validate() const {
    const Index c = num_leaves();
    if (c < 2) throw ConfigError("class tree needs at least two leaves");
    std::vector<int> seen(static_cast<std::size_t>(c), 0);
    for (const Node& n : nodes_) {
        if (n.left >= 0) continue;
        if (n.class_id < 0 || n.class_id >= c) {
            throw ConfigError("class tree: leaf id " + std::to_string(n.class_id) + " outside [0, " +
                              std::to_string(c) + ")");
        }
        if (seen[static_cast<std::size_t>(n.class_id)]++) {
            throw ConfigError("class tree: class " + std::to_string(n.class_id) + " appears in more than one leaf");
        }
    }
    if (num_internal() != c - 1) throw ConfigError("class tree: n_2 != n_0 - 1");
}

Index ClassTree::num_leaves() const {
    return std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.left < 0; });
}

Index ClassTree::num_internal() const {
    return std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.left >= 0; });
}

std::vector<Division> ClassTree::divisions() const {
    std::vector<Division> out;
    for (const Node& n : nodes_) {
        if (n.left < 0) continue;
        out.push_back({nodes_[n.left].classes, nodes_[n.right].classes, n.kind});
    }
    return out;
}

bool ClassTree::is_unconstrained(std::int32_t class_id) const {
    return std::find(unconstrained_.begin(), unconstrained_.end(), class_id) != unconstrained_.end();
}

std::string ClassTree::to_string() const {
    std::function<void(Index, std::ostringstream&)> emit = [&](Index i, std::ostringstream& out) {
        const Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.left < 0) {
            if (is_unconstrained(n.class_id)) out << '~';
            out << n.class_id;
        } else {
            out << '[';
            emit(n.left, out);
            out << (n.kind == ConstraintKind::containment ? '<' : ',');
            emit(n.right, out);
            out << ']';
        }
        if (!n.name.empty()) out << ':' << n.name;
    };
    std::ostringstream out;
    emit(root_, out);
    return out.str();
}

BinaryMask dilate(const BinaryMask& mask) {
    if (mask.rank() < 2) throw InvalidArgument("dilate: expected (batch, spatial...)");
    BinaryMask cur = mask;
    const Shape& shape = mask.shape();
    for (Index axis = 1; axis < mask.rank(); ++axis) {
        Index outer = 1, inner = 1;
        for (Index a = 0; a < axis; ++a) outer *= shape[a];
        for (Index a = axis + 1; a < mask.rank(); ++a) inner *= shape[a];
        const Index n = shape[axis];
        BinaryMask next = cur;
        const std::uint8_t* src = cur.raw();
        std::uint8_t* dst = next.raw();
        for (Index o = 0; o < outer; ++o) {
            for (Index i = 0; i < n; ++i) {
                std::uint8_t* row = dst + (o * n + i) * inner;
                if (i > 0) {
                    const std::uint8_t* prev = src + (o * n + i - 1) * inner;
                    for (Index j = 0; j < inner; ++j) row[j] |= prev[j];
                }
                if (i + 1 < n) {
                    const std::uint8_t* succ = src + (o * n + i + 1) * inner;
                    for (Index j = 0; j < inner; ++j) row[j] |= succ[j];
                }
            }
        }
        cur = std::move(next);
    }
    return cur;
}

CriticalPixelMap pairwise_critical(const BinaryMask& mask_a, const BinaryMask& mask_b, InteractionBudget& budget) {
    if (mask_a.shape() != mask_b.shape()) {
        throw InvalidArgument("pairwise_critical: mask shapes " + shape_to_string(mask_a.shape()) + " and " +
                              shape_to_string(mask_b.shape()) + " differ");
    }
    if ((mask_a.data() > 1).any() || (mask_b.data() > 1).any()) {
        throw InvalidArgument("pairwise_critical: masks must be binary");
    }
    if ((mask_a.data() * mask_b.data()).any()) {
        throw InvalidArgument("pairwise_critical: masks overlap; labels must partition space");
    }
    const BinaryMask da = dilate(mask_a);
    const BinaryMask db = dilate(mask_b);
    budget.conv_count += 2;
    CriticalPixelMap out(mask_a.shape());
    out.data() = (da.data() * mask_b.data()) + (db.data() * mask_a.data());
    return out;
}

BinaryMask class_mask(const LabelMap& labels, const std::vector<std::int32_t>& classes, Index num_classes) {
    std::vector<std::uint8_t> member(static_cast<std::size_t>(num_classes), 0);
    for (std::int32_t c : classes) member[static_cast<std::size_t>(c)] = 1;
    BinaryMask mask(labels.shape());
    const std::int32_t* l = labels.raw();
    std::uint8_t* m = mask.raw();
    for (Index i = 0; i < labels.numel(); ++i) m[i] = member[static_cast<std::size_t>(l[i])];
    return mask;
}

std::vector<std::pair<std::int32_t, std::int32_t>> all_class_pairs(Index num_classes) {
    std::vector<std::pair<std::int32_t, std::int32_t>> pairs;
    for (std::int32_t i = 0; i < num_classes; ++i) {
        for (std::int32_t j = i + 1; j < num_classes; ++j) pairs.emplace_back(i, j);
    }
    return pairs;
}

CriticalPixelMap ti_critical_map(const LabelMap& labels, Index num_classes,
                                 const std::vector<std::pair<std::int32_t, std::int32_t>>& pairs,
                                 InteractionBudget& budget) {
    check_label_range(labels, num_classes);
    const auto all = pairs.empty() ? all_class_pairs(num_classes) : pairs;
    CriticalPixelMap v(labels.shape());
    for (const auto& [a, b] : all) {
        if (a < 0 || b < 0 || a >= num_classes || b >= num_classes || a == b) {
            throw InvalidArgument("ti_critical_map: invalid class pair (" + std::to_string(a) + ", " +
                                  std::to_string(b) + ")");
        }
        const BinaryMask ma(labels.shape(), (labels.data() == a).cast<std::uint8_t>());
        const BinaryMask mb(labels.shape(), (labels.data() == b).cast<std::uint8_t>());
        const CriticalPixelMap part = pairwise_critical(ma, mb, budget);
        v.data() = v.data().max(part.data());
    }
    return v;
}

CriticalPixelMap division_critical_map(const LabelMap& labels, const Division& division, Index num_classes,
                                       InteractionBudget& budget) {
    check_label_range(labels, num_classes);
    const BinaryMask left = class_mask(labels, division.left, num_classes);
    BinaryMask right;
    if (division.kind == ConstraintKind::exclusion) {
        right = class_mask(labels, division.right, num_classes);
    } else {
        std::vector<std::int32_t> outside;
        for (std::int32_t c = 0; c < num_classes; ++c) {
            const bool in_left = std::find(division.left.begin(), division.left.end(), c) != division.left.end();
            const bool in_right = std::find(division.right.begin(), division.right.end(), c) != division.right.end();
            if (!in_left && !in_right) outside.push_back(c);
        }
        right = class_mask(labels, outside, num_classes);
    }
    return pairwise_critical(left, right, budget);
}

CriticalPixelMap bti_critical_map(const LabelMap& labels, const ClassTree& tree, InteractionBudget& budget) {
    const Index c = tree.num_classes();
    check_label_range(labels, c);
    CriticalPixelMap v(labels.shape());
    auto all_free = [&tree](const std::vector<std::int32_t>& side) {
        return std::all_of(side.begin(), side.end(), [&tree](std::int32_t k) { return tree.is_unconstrained(k); });
    };
    for (const Division& d : tree.divisions()) {
        if (all_free(d.left) || all_free(d.right)) {
            ++budget.skipped_divisions;
            continue;
        }
        const CriticalPixelMap part = division_critical_map(labels, d, c, budget);
        v.data() = v.data().max(part.data());
    }
    return v;
}

LabelMap argmax_labels(const Tensor& scores) {
    if (scores.rank() < 3) throw InvalidArgument("argmax_labels: expected (batch, classes, spatial...)");
    const Index batch = scores.dim(0), classes = scores.dim(1);
    const Index s = scores.numel() / (batch * classes);
    Shape shape{batch};
    const Shape ext = spatial_extents(scores.shape());
    shape.insert(shape.end(), ext.begin(), ext.end());
    LabelMap labels(shape);
    for (Index b = 0; b < batch; ++b) {
        for (Index p = 0; p < s; ++p) {
            std::int32_t best = 0;
            double best_v = scores[(b * classes) * s + p];
            for (Index c = 1; c < classes; ++c) {
                const double v = scores[(b * classes + c) * s + p];
                if (v > best_v) {
                    best_v = v;
                    best = static_cast<std::int32_t>(c);
                }
            }
            labels[b * s + p] = best;
        }
    }
    return labels;
}

}  // namespace nextou
