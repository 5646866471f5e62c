#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "nextou/bench.hpp"
#include "nextou/checkpoint.hpp"
#include "nextou/data_io.hpp"
#include "nextou/gradcheck.hpp"
#include "nextou/run_config.hpp"
#include "nextou/trainer.hpp"
#include "oracles.hpp"

using namespace nextou;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("nextou_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

const char* kTinyConfig = R"(
seed: 5
iterations: 4
batch_size: 2
log_every: 1
network:
  spatial_rank: 2
  base_channels: 4
  num_conv_stages: 1
  num_topo_stages: 1
  pool_flags: [[0, 0], [1, 1]]
  knn_schedule: [4]
  num_heads: 2
  num_classes: 2
  pgrapher_pool: [true]
  patch_size: [16, 16]
loss:
  lambda_bti: 0.5
optimizer:
  learning_rate: 0.01
data:
  phantom:
    kind: tube2d
    extents: [16, 16]
    num_classes: 2
  train_cases: 4
  val_cases: 2
)";

RunConfig tiny(const std::string& out) {
    RunConfig c = RunConfig::parse(kTinyConfig);
    c.output_dir = out;
    return c;
}

/// Checkpoints embed the config (including output_dir), so compare tensors.
bool same_tensors(const fs::path& a, const fs::path& b) {
    const Checkpoint ca = load_checkpoint(a), cb = load_checkpoint(b);
    if (ca.iteration != cb.iteration || ca.entries.size() != cb.entries.size()) return false;
    for (std::size_t i = 0; i < ca.entries.size(); ++i) {
        if (ca.entries[i].name != cb.entries[i].name || !(ca.entries[i].value == cb.entries[i].value)) return false;
    }
    return true;
}

bool same_parameters(Network& a, Network& b) {
    const ParameterSet pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.params().size(); ++i) {
        if (!(pa.params()[i].var->value() == pb.params()[i].var->value())) return false;
    }
    for (std::size_t i = 0; i < pa.buffers().size(); ++i) {
        if (!(*pa.buffers()[i].tensor == *pb.buffers()[i].tensor)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("phantom: same seed gives identical outputs") {
    for (PhantomKind kind : {PhantomKind::tube2d, PhantomKind::nested_rings2d, PhantomKind::branching_tree3d,
                             PhantomKind::nested_shells3d}) {
        PhantomSpec s;
        s.kind = kind;
        s.extents = Shape(static_cast<std::size_t>(phantom_rank(kind)), phantom_rank(kind) == 3 ? 24 : 48);
        s.num_classes = 3;
        s.seed = 17;
        const Phantom a = generate_phantom(s), b = generate_phantom(s);
        CHECK(a.image == b.image);
        CHECK(a.labels == b.labels);
        s.seed = 18;
        CHECK_FALSE(generate_phantom(s).labels == a.labels);
    }
}

TEST_CASE("phantom: nested rings have an empty critical map under their tree") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        PhantomSpec s;
        s.kind = PhantomKind::nested_rings2d;
        s.extents = {64, 64};
        s.num_classes = 3;
        s.seed = seed;
        const Phantom p = generate_phantom(s);
        InteractionBudget b;
        const auto v = bti_critical_map(p.labels, default_tree(s.kind, 3), b);
        CHECK((v.data() == 0).all());
        CHECK(oracle::forbidden_pairs(p.labels, {{0, 2}}) == 0);
        // Every class is present.
        for (std::int32_t k = 0; k < 3; ++k) CHECK((p.labels.data() == k).any());
    }
}

TEST_CASE("phantom: 3D shells respect their forbidden pairs") {
    for (Index c : {3, 4}) {
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            PhantomSpec s;
            s.kind = PhantomKind::nested_shells3d;
            s.extents = {24, 24, 24};
            s.num_classes = c;
            s.seed = seed;
            const Phantom p = generate_phantom(s);
            CHECK(oracle::forbidden_pairs(p.labels, natural_forbidden_pairs(s.kind, c)) == 0);
        }
    }
}

TEST_CASE("phantom: tube foreground is one connected component") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        PhantomSpec s;
        s.seed = seed;
        const Phantom p = generate_phantom(s);
        CHECK(foreground_components(p.labels) == 1);
        CHECK(p.image.shape() == Shape{1, 1, 64, 64});
    }
    PhantomSpec t;
    t.kind = PhantomKind::branching_tree3d;
    t.extents = {32, 32, 32};
    CHECK(foreground_components(generate_phantom(t).labels) == 1);
}

TEST_CASE("phantom: unsatisfiable adjacency fails after bounded retries") {
    PhantomSpec s;
    s.forbidden_adjacency = {{0, 1}};
    s.max_retries = 3;
    CHECK_THROWS_AS(generate_phantom(s), GenerationError);
}

TEST_CASE("phantom: invalid specs are rejected") {
    PhantomSpec s;
    s.extents = {15, 64};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.extents = {64, 64, 64};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK_THROWS_AS(parse_phantom_kind("torus"), ConfigError);
}

TEST_CASE("phantom: the worker pool returns results in index order") {
    std::vector<PhantomSpec> specs;
    PhantomSpec base;
    base.extents = {32, 32};
    for (std::uint64_t i = 0; i < 6; ++i) specs.push_back(phantom_variant(base, 1, i));
    const auto serial = generate_phantoms(specs, 1);
    const auto pooled = generate_phantoms(specs, 3);
    for (std::size_t i = 0; i < specs.size(); ++i) CHECK(serial[i].labels == pooled[i].labels);
}

TEST_CASE("raw io: float32 volumes round trip and corruption is detected") {
    const fs::path dir = scratch("rawio");
    fs::create_directories(dir);
    PhantomSpec s;
    s.extents = {20, 24};
    const Phantom p = generate_phantom(s);
    write_raw(dir / "a_image.raw", p.image);
    write_raw_labels(dir / "a_label.raw", p.labels);
    const Tensor img = read_raw(dir / "a_image.raw");
    CHECK(img.shape() == p.image.shape());
    CHECK((img.data() - p.image.data().cast<float>().cast<double>()).abs().maxCoeff() == 0.0);
    CHECK(read_raw_labels(dir / "a_label.raw") == p.labels);
    CHECK(read_raw_header(dir / "a_image.raw").spacing.size() == 3);

    const auto cases = list_cases(dir);
    REQUIRE(cases.size() == 1);
    CHECK(cases[0].name == "a");

    // Truncated payload.
    fs::resize_file(dir / "a_image.raw", 100);
    CHECK_THROWS_AS(read_raw(dir / "a_image.raw"), CorruptedRecord);
    // Bad dtype.
    std::ofstream(dir / "a_label.hdr") << "shape: 1 20 24\ndtype: int16\n";
    CHECK_THROWS_AS(read_raw(dir / "a_label.raw"), CorruptedRecord);
    CHECK_THROWS_AS(read_raw(dir / "missing.raw"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("config: parse, serialize and reparse") {
    const RunConfig c = RunConfig::parse(kTinyConfig);
    CHECK(c.network.base_channels == 4);
    CHECK(c.loss.lambda_bti == 0.5);
    CHECK(c.tree.num_classes() == 2);
    const RunConfig again = RunConfig::parse(c.to_yaml());
    CHECK(again.to_yaml() == c.to_yaml());
}

TEST_CASE("config: errors are configuration errors with the offending key") {
    auto error_of = [](const std::string& text) -> std::string {
        try {
            RunConfig::parse(text);
        } catch (const ConfigError& e) {
            return e.what();
        }
        return "";
    };
    CHECK(error_of(std::string(kTinyConfig) + "bogus: 1\n").find("bogus") != std::string::npos);
    std::string bad_axis = kTinyConfig;
    bad_axis.replace(bad_axis.find("patch_size: [16, 16]"), 20, "patch_size: [16, 15]");
    CHECK(error_of(bad_axis).find("axis w") != std::string::npos);
    std::string bad_tree = std::string(kTinyConfig) + "tree: \"[[0,1],2]\"\n";
    CHECK(error_of(bad_tree).find("classes") != std::string::npos);
    CHECK_FALSE(error_of("network: [1, 2]\n").empty());
    CHECK_FALSE(error_of("::: not yaml").empty());
}

TEST_CASE("config: the shipped configs load") {
    for (const char* name : {"tube2d_toy.yaml", "rings2d_topo.yaml"}) {
        INFO(name);
        CHECK_NOTHROW(RunConfig::load(fs::path(NEXTOU_SOURCE_DIR) / "configs" / name));
    }
}

TEST_CASE("checkpoint: save/load is bit-exact and corruption is detected") {
    const fs::path dir = scratch("ckpt");
    fs::create_directories(dir);
    Trainer t(tiny(dir.string()));
    t.step();
    const Checkpoint c = t.checkpoint();
    save_checkpoint(dir / "c.bin", c);
    const Checkpoint l = load_checkpoint(dir / "c.bin");
    CHECK(l.iteration == 1);
    CHECK(l.config_yaml == c.config_yaml);
    REQUIRE(l.entries.size() == c.entries.size());
    for (std::size_t i = 0; i < c.entries.size(); ++i) {
        CHECK(l.entries[i].name == c.entries[i].name);
        CHECK(l.entries[i].value == c.entries[i].value);
    }
    std::string bytes = slurp(dir / "c.bin");
    bytes[bytes.size() / 2] ^= 0x40;
    std::ofstream(dir / "bad.bin", std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.bin"), CorruptedRecord);
    std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, 20);
    CHECK_THROWS_AS(load_checkpoint(dir / "short.bin"), CorruptedRecord);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint: resuming gives the same next step as an uninterrupted run") {
    const fs::path dir = scratch("resume");
    fs::create_directories(dir);
    Trainer full(tiny(dir.string()));
    full.step();
    full.step();
    const Checkpoint mid = full.checkpoint();
    save_checkpoint(dir / "mid.bin", mid);
    const StepRecord want = full.step();

    Trainer resumed(tiny(dir.string()));
    resumed.restore(load_checkpoint(dir / "mid.bin"));
    CHECK(resumed.iteration() == 2);
    const StepRecord got = resumed.step();
    CHECK(got.loss == want.loss);
    CHECK(got.grad_norm == want.grad_norm);
    CHECK(same_parameters(full.network(), resumed.network()));
    fs::remove_all(dir);
}

TEST_CASE("checkpoint: restore rejects mismatched tensors") {
    Trainer t(tiny(scratch("mismatch").string()));
    Checkpoint c = t.checkpoint();
    c.entries[0].value = Tensor({1});
    CHECK_THROWS_AS(t.restore(c), CorruptedRecord);
    c = t.checkpoint();
    c.entries.pop_back();
    CHECK_THROWS_AS(t.restore(c), CorruptedRecord);
}

TEST_CASE("train: two identical runs produce identical metric reports") {
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    train(tiny(a.string()));
    train(tiny(b.string()));
    CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
    CHECK(slurp(a / "train_log.jsonl") == slurp(b / "train_log.jsonl"));
    CHECK(same_tensors(a / "checkpoint.bin", b / "checkpoint.bin"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("train: stop and resume reaches the uninterrupted result") {
    const fs::path a = scratch("stop_a"), b = scratch("stop_b");
    const TrainingReport full = train(tiny(a.string()));
    TrainOptions stop;
    stop.stop_at = 2;
    train(tiny(b.string()), stop);
    TrainOptions resume;
    resume.resume = true;
    const TrainingReport rest = train(tiny(b.string()), resume);
    CHECK(rest.start_iteration == 2);
    CHECK(rest.iterations_run == 2);
    CHECK(summary_json(rest.final) == summary_json(full.final));
    CHECK(same_tensors(a / "checkpoint.bin", b / "checkpoint.bin"));
    // A changed config refuses to resume.
    RunConfig other = tiny(b.string());
    other.loss.lambda_bti = 0.25;
    CHECK_THROWS_AS(train(other, resume), ConfigError);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("train: zero iterations echo the initial metrics") {
    RunConfig c = tiny(scratch("zero").string());
    c.iterations = 0;
    const TrainingReport r = train(c);
    CHECK(r.iterations_run == 0);
    CHECK(r.history.empty());
    CHECK(summary_json(r.final) == summary_json(r.initial));
    fs::remove_all(c.output_dir);
}

TEST_CASE("train: steps log the conv budget and the seed fixes data order") {
    Trainer t(tiny(scratch("budget").string()));
    const StepRecord r = t.step();
    CHECK(r.conv_count == 2);
    CHECK(std::isfinite(r.loss));
    Trainer u(tiny(scratch("budget").string()));
    CHECK(t.batch_indices(7) == u.batch_indices(7));
    RunConfig other = tiny(scratch("budget").string());
    other.seed = 6;
    Trainer v(other);
    bool differs = false;
    for (Index i = 0; i < 5; ++i) differs = differs || v.batch_indices(i) != t.batch_indices(i);
    CHECK(differs);
}

TEST_CASE("train: a non-finite batch aborts with a diagnostic dump") {
    const fs::path dir = scratch("nan");
    RunConfig c = tiny(dir.string());
    Dataset data = make_dataset(c);
    for (auto& ec : data.train) ec.image[5] = std::nan("");
    Trainer t(c, data);
    CHECK_THROWS_AS(t.step(), NumericalError);
    CHECK(fs::exists(dir / "nan_dump" / "iter_0.json"));
    CHECK(fs::exists(dir / "nan_dump" / "iter_0_image.raw"));
    fs::remove_all(dir);
}

TEST_CASE("bench: budgets and map agreement") {
    const BenchReport r = bench_ti_bti(18, {16, 16, 16}, ClassTree::balanced(18), 1, 3);
    CHECK(r.ti_budget.conv_count == 306);
    CHECK(r.bti_budget.conv_count == 34);
    const BenchReport r2 = bench_ti_bti(2, {32, 32}, ClassTree::parse("[0,1]"), 3, 4);
    CHECK(r2.maps_equal);
    CHECK(r2.ti_critical == r2.bti_critical);
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
}

TEST_CASE("gradcheck: every registered component passes its tolerance") {
    for (const std::string& name : gradcheck_components()) {
        const GradcheckReport r = gradcheck(name);
        INFO(r.to_json());
        CHECK(r.passed);
        CHECK(r.checked_entries > 0);
    }
}

TEST_CASE("gradcheck: a wrong gradient is caught") {
    // y = x^2 with a backward pass that forgets the factor 2.
    auto bad = [](const Var& x) {
        Tensor v = x.value();
        v.data() = v.data().square();
        return make_result(std::move(v), {x}, [](detail::Node& n) {
            if (auto* g = n.input_grad(0)) *g += n.grad.data() * n.inputs[0]->value.data();
        });
    };
    const GradcheckReport r = gradcheck_function("bad", bad, tie_free_input({3, 4}, 1), {}, 1e-4);
    CHECK_FALSE(r.passed);
}

TEST_CASE("gradcheck: unknown components are reported by code") {
    try {
        gradcheck("nope");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::unknown_component);
    }
}
