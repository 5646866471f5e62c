#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
    int status = 0;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

const fs::path& workdir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "nextou_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

Result run(const std::string& args) {
    const fs::path out = workdir() / "stdout.txt", err = workdir() / "stderr.txt";
    const std::string cmd = std::string(NEXTOU_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

/// Nonzero exit and exactly one stderr line `error <CODE>: ...`.
void check_error(const Result& r, const std::string& code) {
    INFO("stderr: " << r.err);
    CHECK(r.status != 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
    CHECK(std::regex_search(r.err, std::regex("^error " + code + ": ")));
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTiny = R"(seed: 2
iterations: 3
batch_size: 2
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
data:
  phantom:
    kind: tube2d
    extents: [16, 16]
    num_classes: 2
  train_cases: 4
  val_cases: 2
)";

}  // namespace

TEST_CASE("cli: usage errors") {
    check_error(run(""), "E_USAGE");
    check_error(run("frobnicate"), "E_USAGE");
    check_error(run("train"), "E_USAGE");
    check_error(run("bench-bti --classes x --extent 4 --tree chain"), "E_USAGE");
}

TEST_CASE("cli: train reports missing and invalid configs") {
    check_error(run("train --config /nonexistent/run.yaml"), "E_IO");
    write(workdir() / "bad.yaml", std::string(kTiny) + "bogus: 3\n");
    check_error(run("train --config " + (workdir() / "bad.yaml").string()), "E_CONFIG");
}

TEST_CASE("cli: train, export phantoms, eval") {
    const fs::path cfg = workdir() / "tiny.yaml", out = workdir() / "run";
    write(cfg, kTiny);
    const Result t = run("train --config " + cfg.string() + " --output-dir " + out.string());
    INFO(t.err);
    REQUIRE(t.status == 0);
    CHECK(nlohmann::json::parse(t.out)["iterations_run"] == 3);
    CHECK(fs::exists(out / "checkpoint.bin"));

    write(workdir() / "spec.yaml", "kind: tube2d\nextents: [16, 16]\nnum_classes: 2\nseed: 9\ncount: 2\n");
    const Result p = run("phantom --spec " + (workdir() / "spec.yaml").string() + " --out " +
                         (workdir() / "cases").string());
    REQUIRE(p.status == 0);
    CHECK(fs::exists(workdir() / "cases" / "case_001_label.raw"));
    CHECK(fs::exists(workdir() / "cases" / "case_001_label.hdr"));

    const Result e = run("eval --checkpoint " + (out / "checkpoint.bin").string() + " --data " +
                         (workdir() / "cases").string() + " --overlay-dir " + (workdir() / "overlays").string());
    INFO(e.err);
    CHECK(e.status == 0);
    CHECK(e.out.find("\"cases\":2") != std::string::npos);
    CHECK(fs::exists(workdir() / "overlays" / "case_000_pred.ppm"));
}

TEST_CASE("cli: eval rejects corrupted checkpoints and missing data") {
    write(workdir() / "junk.bin", "NXTUCKPTgarbage");
    check_error(run("eval --checkpoint " + (workdir() / "junk.bin").string() + " --data " + workdir().string()),
                "E_CORRUPTED_RECORD");
    check_error(run("eval --checkpoint /nonexistent.bin --data /tmp"), "E_IO");
}

TEST_CASE("cli: bench-bti budgets and errors") {
    const Result r = run("bench-bti --classes 18 --extent 8 --tree balanced --repeats 1");
    REQUIRE(r.status == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["ti_conv_count"] == 306);
    CHECK(j["bti_conv_count"] == 34);
    write(workdir() / "bad_tree.txt", "[0,1\n");
    check_error(run("bench-bti --classes 2 --extent 8 --tree " + (workdir() / "bad_tree.txt").string()), "E_CONFIG");
    check_error(run("bench-bti --classes 4 --extent 8 --tree chain --rank 5"), "E_INVALID_ARGUMENT");
}

TEST_CASE("cli: gradcheck pass, fail and unknown component") {
    CHECK(run("gradcheck --component max_pool_with_indices").status == 0);
    check_error(run("gradcheck --component nope"), "E_UNKNOWN_COMPONENT");
    check_error(run("gradcheck --component ffn --tolerance 1e-300"), "E_GRADCHECK_FAILED");
}

TEST_CASE("cli: phantom generation failures") {
    write(workdir() / "unsat.yaml", "kind: tube2d\nforbidden_adjacency: [[0, 1]]\nmax_retries: 2\n");
    check_error(run("phantom --spec " + (workdir() / "unsat.yaml").string() + " --out " + workdir().string()),
                "E_GENERATION");
    write(workdir() / "small.yaml", "kind: tube2d\nextents: [8, 8]\n");
    check_error(run("phantom --spec " + (workdir() / "small.yaml").string() + " --out " + workdir().string()),
                "E_CONFIG");
}

TEST_CASE("cli: tree-info and params") {
    const Result t = run("tree-info --tree chain --classes 18");
    REQUIRE(t.status == 0);
    const auto j = nlohmann::json::parse(t.out);
    CHECK(j["bti_convolutions"] == 34);
    CHECK(j["ti_convolutions"] == 306);
    const std::string trees = std::string(NEXTOU_SOURCE_DIR) + "/configs/trees/";
    const Result chain = run("tree-info --tree " + trees + "chain4.txt");
    REQUIRE(chain.status == 0);
    CHECK(nlohmann::json::parse(chain.out)["tree"] == "[[[3<2]<1]<0]");
    const Result organs = run("tree-info --tree " + trees + "organs14.txt");
    REQUIRE(organs.status == 0);
    CHECK(nlohmann::json::parse(organs.out)["n0"] == 14);
    const Result shells = run("phantom --spec " + std::string(NEXTOU_SOURCE_DIR) +
                              "/configs/phantom_shells3d.yaml --out " + (workdir() / "shells").string());
    CHECK(shells.status == 0);
    CHECK(fs::exists(workdir() / "shells" / "case_003_label.raw"));
    const Result p = run("params --preset ravir_2d");
    REQUIRE(p.status == 0);
    CHECK(nlohmann::json::parse(p.out)["total"].get<long>() > 0);
    check_error(run("params --preset nope"), "E_CONFIG");
}
