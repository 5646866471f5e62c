#include <doctest.h>

#include <random>

#include "nextou/bti.hpp"
#include "oracles.hpp"

using namespace nextou;

namespace {

std::set<std::int32_t> as_set(const std::vector<std::int32_t>& v) { return {v.begin(), v.end()}; }

std::set<std::int32_t> complement(const std::set<std::int32_t>& a, const std::set<std::int32_t>& b, Index c) {
    std::set<std::int32_t> out;
    for (std::int32_t k = 0; k < c; ++k) {
        if (!a.count(k) && !b.count(k)) out.insert(k);
    }
    return out;
}

BinaryMask tree_oracle(const LabelMap& labels, const ClassTree& tree) {
    BinaryMask v(labels.shape());
    for (const Division& d : tree.divisions()) {
        const auto a = as_set(d.left), r = as_set(d.right);
        const auto b = d.kind == ConstraintKind::exclusion ? r : complement(a, r, tree.num_classes());
        v = oracle::mask_union(v, oracle::scan_critical(labels, a, b));
    }
    return v;
}

}  // namespace

TEST_CASE("pairwise: masks two pixels apart never touch") {
    BinaryMask a({1, 1, 8}), b({1, 1, 8});
    a[0] = a[1] = 1;
    b[4] = b[5] = 1;
    InteractionBudget budget;
    const auto v = pairwise_critical(a.reshaped({1, 8}), b.reshaped({1, 8}), budget);
    CHECK((v.data() == 0).all());
    CHECK(budget.conv_count == 2);
}

TEST_CASE("pairwise: 1D [A,A,B,B] marks the boundary pair") {
    const BinaryMask a = BinaryMask::from_values({1, 4}, {1, 1, 0, 0});
    const BinaryMask b = BinaryMask::from_values({1, 4}, {0, 0, 1, 1});
    InteractionBudget budget;
    const auto v = pairwise_critical(a, b, budget);
    CHECK(v == BinaryMask::from_values({1, 4}, {0, 1, 1, 0}));
}

TEST_CASE("pairwise: random 32x32 two-class layout matches the neighborhood scan") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const LabelMap l = oracle::blob_labels({1, 32, 32}, 2, seed);
        InteractionBudget budget;
        const auto v = pairwise_critical(class_mask(l, {0}, 2), class_mask(l, {1}, 2), budget);
        CHECK(v == oracle::scan_critical(l, {0}, {1}));
    }
}

TEST_CASE("pairwise: overlapping masks are rejected") {
    const BinaryMask a = BinaryMask::from_values({1, 3}, {1, 1, 0});
    const BinaryMask b = BinaryMask::from_values({1, 3}, {0, 1, 1});
    InteractionBudget budget;
    CHECK_THROWS_AS(pairwise_critical(a, b, budget), InvalidArgument);
}

TEST_CASE("dilation never crosses batch items") {
    BinaryMask m({2, 3});
    m[2] = 1;  // last pixel of item 0
    const BinaryMask d = dilate(m);
    CHECK(d == BinaryMask::from_values({2, 3}, {0, 1, 1, 0, 0, 0}));
}

TEST_CASE("budgets: TI is c(c-1), BTI is 2(c-1) for c in 2..20") {
    const LabelMap l = oracle::blob_labels({1, 12, 12}, 20, 3, 0);
    for (Index c = 2; c <= 20; ++c) {
        LabelMap lc = l;
        for (Index i = 0; i < lc.numel(); ++i) lc[i] %= static_cast<std::int32_t>(c);
        InteractionBudget ti, bb, bc;
        ti_critical_map(lc, c, {}, ti);
        bti_critical_map(lc, ClassTree::balanced(c), bb);
        bti_critical_map(lc, ClassTree::chain(c), bc);
        CHECK(ti.conv_count == c * (c - 1));
        CHECK(bb.conv_count == 2 * (c - 1));
        CHECK(bc.conv_count == 2 * (c - 1));
    }
}

TEST_CASE("TI: c=2 equals pairwise, c=4 equals the union of six pair scans") {
    const LabelMap l2 = oracle::blob_labels({1, 20, 20}, 2, 5);
    InteractionBudget b2, bp;
    CHECK(ti_critical_map(l2, 2, {}, b2) == pairwise_critical(class_mask(l2, {0}, 2), class_mask(l2, {1}, 2), bp));
    CHECK(b2.conv_count == 2);

    const LabelMap l4 = oracle::blob_labels({2, 24, 24}, 4, 6);
    BinaryMask want(l4.shape());
    for (std::int32_t i = 0; i < 4; ++i) {
        for (std::int32_t j = i + 1; j < 4; ++j) want = oracle::mask_union(want, oracle::scan_critical(l4, {i}, {j}));
    }
    InteractionBudget b4;
    CHECK(ti_critical_map(l4, 4, {}, b4) == want);
}

TEST_CASE("TI: labels out of range are rejected") {
    LabelMap l({1, 4, 4});
    l[3] = 5;
    InteractionBudget b;
    CHECK_THROWS_AS(ti_critical_map(l, 4, {}, b), InvalidArgument);
}

TEST_CASE("BTI: c=2 is identical to TI") {
    const LabelMap l = oracle::blob_labels({1, 24, 24}, 2, 7);
    InteractionBudget ti, bti;
    CHECK(bti_critical_map(l, ClassTree::parse("[0,1]"), bti) == ti_critical_map(l, 2, {}, ti));
    CHECK(ti.conv_count == bti.conv_count);
}

TEST_CASE("BTI: chain tree on c=4 equals the merged-mask oracle") {
    const ClassTree tree = ClassTree::parse("[[[0,1],2],3]");
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const LabelMap l = oracle::blob_labels({1, 24, 24}, 4, 10 + seed);
        BinaryMask want = oracle::scan_critical(l, {0}, {1});
        want = oracle::mask_union(want, oracle::scan_critical(l, {0, 1}, {2}));
        want = oracle::mask_union(want, oracle::scan_critical(l, {0, 1, 2}, {3}));
        InteractionBudget b;
        CHECK(bti_critical_map(l, tree, b) == want);
    }
}

TEST_CASE("BTI: random trees match the division scan in 2D and 3D") {
    std::mt19937_64 rng(20);
    const std::vector<std::string> trees{"[[0,1],[2,3]]", "[[[0,1],2],3]", "[0,[1,[2,3]]]", "[[2<1]<[0,3]]",
                                         "[[3,0],[1<2]]"};
    for (int trial = 0; trial < 10; ++trial) {
        const Shape shape = trial % 2 ? Shape{1, 10, 11, 12} : Shape{2, 24, 28};
        const LabelMap l = oracle::blob_labels(shape, 4, rng(), 1);
        const ClassTree tree = ClassTree::parse(trees[trial % trees.size()]);
        InteractionBudget b;
        CHECK(bti_critical_map(l, tree, b) == tree_oracle(l, tree));
    }
}

TEST_CASE("BTI: rebalancing leaves inside one side leaves V unchanged") {
    const LabelMap l = oracle::blob_labels({1, 30, 30}, 6, 30);
    InteractionBudget b1, b2;
    // Divisions touching the inner structure of the left side differ, so
    // compare the single top-level division only.
    const Division top1 = ClassTree::parse("[[[0,1],2],[3,[4,5]]]").divisions().back();
    const Division top2 = ClassTree::parse("[[0,[2,1]],[[5,3],4]]").divisions().back();
    CHECK(division_critical_map(l, top1, 6, b1) == division_critical_map(l, top2, 6, b2));
}

TEST_CASE("BTI: adding a division can only grow V") {
    const LabelMap l = oracle::blob_labels({1, 30, 30}, 4, 31);
    const ClassTree tree = ClassTree::parse("[[0,1],[2,3]]");
    BinaryMask acc(l.shape());
    for (const Division& d : tree.divisions()) {
        InteractionBudget b;
        const BinaryMask next = oracle::mask_union(acc, division_critical_map(l, d, 4, b));
        for (Index i = 0; i < acc.numel(); ++i) CHECK(next[i] >= acc[i]);
        acc = next;
    }
    InteractionBudget b;
    CHECK(bti_critical_map(l, tree, b) == acc);
}

TEST_CASE("BTI: identical inputs give identical maps") {
    const LabelMap l = oracle::blob_labels({1, 8, 9, 10}, 5, 32);
    InteractionBudget b1, b2;
    CHECK(bti_critical_map(l, ClassTree::balanced(5), b1) == bti_critical_map(l, ClassTree::balanced(5), b2));
}

TEST_CASE("BTI: containment checks the inner class against everything outside its container") {
    // 1D: class 2 inside class 1, background 0 outside. 2 touching 0 is critical.
    const LabelMap ok = LabelMap::from_values({1, 7}, {0, 1, 1, 2, 1, 1, 0});
    const LabelMap bad = LabelMap::from_values({1, 7}, {0, 2, 1, 1, 1, 1, 0});
    const ClassTree tree = ClassTree::parse("[[2<1]<0]");
    InteractionBudget b;
    // [2<1] checks 2 vs 0; the root division checks {1,2} vs nothing.
    const auto v_ok = bti_critical_map(ok, tree, b);
    CHECK((v_ok.data() == 0).all());
    const auto v_bad = bti_critical_map(bad, tree, b);
    CHECK(v_bad == BinaryMask::from_values({1, 7}, {1, 1, 0, 0, 0, 0, 0}));
}

TEST_CASE("tree: parse, counts and round trip") {
    const ClassTree t = ClassTree::parse("[[[0:bg,1],2],3:aorta]");
    CHECK(t.num_leaves() == 4);
    CHECK(t.num_internal() == 3);
    CHECK(t.num_divisions() == 3);
    const auto divs = t.divisions();
    CHECK(divs[0].left == std::vector<std::int32_t>{0});
    CHECK(divs[2].right == std::vector<std::int32_t>{3});
    CHECK(ClassTree::parse(t.to_string()).to_string() == t.to_string());
    for (Index c = 2; c <= 20; ++c) {
        CHECK(ClassTree::balanced(c).num_internal() == c - 1);
        CHECK(ClassTree::chain(c).num_leaves() == c);
    }
}

TEST_CASE("tree: invalid trees are configuration errors") {
    for (const char* bad : {"", "[0,1", "[0,0]", "[0,2]", "[[0,1],[1,2]]", "[0,1,2]", "[a,1]", "[0,1]x", "[-1,0]"}) {
        INFO(bad);
        CHECK_THROWS_AS(ClassTree::parse(bad), ConfigError);
    }
}

TEST_CASE("tree: unconstrained classes skip divisions and report them") {
    const ClassTree t = ClassTree::parse("[~0,[1,2]]");
    CHECK(t.is_unconstrained(0));
    const LabelMap l = oracle::blob_labels({1, 16, 16}, 3, 40);
    InteractionBudget b;
    const auto v = bti_critical_map(l, t, b);
    CHECK(b.skipped_divisions == 1);
    CHECK(b.conv_count == 2);
    CHECK(v == oracle::scan_critical(l, {1}, {2}));
}

TEST_CASE("argmax: ties go to the lowest class") {
    const Tensor s = Tensor::from_values({1, 3, 2}, {0.2, 0.5, 0.5, 0.1, 0.5, 0.5});
    CHECK(argmax_labels(s) == LabelMap::from_values({1, 2}, {1, 0}));
}
