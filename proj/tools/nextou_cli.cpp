// nextou command line: training, evaluation, TI/BTI benchmark, gradient
// checks and phantom export. Errors go to stderr as one line:
//   error <CODE>: <message>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nextou/bench.hpp"
#include "nextou/checkpoint.hpp"
#include "nextou/data_io.hpp"
#include "nextou/gradcheck.hpp"
#include "nextou/run_config.hpp"
#include "nextou/trainer.hpp"

namespace fs = std::filesystem;
using namespace nextou;
using nlohmann::json;

namespace {

int fail(std::string_view code, std::string message) {
    for (char& c : message) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    std::cerr << "error " << code << ": " << message << std::endl;
    return 1;
}

ClassTree load_tree(const std::string& arg, Index num_classes) {
    if (arg.empty() || arg == "balanced") return ClassTree::balanced(num_classes);
    if (arg == "chain") return ClassTree::chain(num_classes);
    std::string text = read_text_file(arg);
    // Allow comment lines in tree files.
    std::istringstream in(text);
    std::string line, body;
    while (std::getline(in, line)) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        body += line;
    }
    return ClassTree::parse(body);
}

Shape parse_shape(const std::string& text) {
    Shape s;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            s.push_back(std::stol(item));
        } catch (const std::exception&) {
            throw InvalidArgument("bad shape '" + text + "'");
        }
    }
    return s;
}

int cmd_train(const std::string& config_path, bool resume, const std::string& output_dir) {
    RunConfig config = RunConfig::load(config_path);
    if (!output_dir.empty()) config.output_dir = output_dir;
    TrainOptions opts;
    opts.resume = resume;
    const TrainingReport r = train(config, opts);
    json out = {{"iterations_run", r.iterations_run},
                {"start_iteration", r.start_iteration},
                {"initial", json::parse(summary_json(r.initial))},
                {"final", json::parse(summary_json(r.final))},
                {"wall_seconds", r.wall_seconds},
                {"checkpoint", r.checkpoint.string()}};
    if (!r.history.empty()) out["final_loss"] = r.history.back().loss;
    std::cout << out.dump() << std::endl;
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& overlay_dir) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    RunConfig config;
    Network net = network_from_checkpoint(ckpt, &config);
    const std::vector<EvalCase> cases = load_cases(data_dir);
    const ClassPairs forbidden = config.data.phantom.forbidden_adjacency.empty()
                                     ? natural_forbidden_pairs(config.data.phantom.kind, config.network.num_classes)
                                     : config.data.phantom.forbidden_adjacency;
    const EvalSummary s = evaluate_cases(net, cases, forbidden);
    std::cout << metrics_jsonl(s, "eval");
    std::cout << summary_json(s) << std::endl;
    if (!overlay_dir.empty()) {
        fs::create_directories(overlay_dir);
        NoGradGuard no_grad;
        for (const EvalCase& ec : cases) {
            const Var logits = net.forward(Var(ec.image), ForwardOptions{false});
            write_overlay_ppm(fs::path(overlay_dir) / (ec.name + "_pred.ppm"), ec.image, argmax_labels(logits.value()));
        }
    }
    return 0;
}

int cmd_bench(Index classes, Index extent, Index rank, const std::string& tree_arg, Index repeats, std::uint64_t seed) {
    if (rank != 2 && rank != 3) throw InvalidArgument("--rank must be 2 or 3");
    if (extent < 1) throw InvalidArgument("--extent must be >= 1");
    const ClassTree tree = load_tree(tree_arg, classes);
    const BenchReport r = bench_ti_bti(classes, Shape(static_cast<std::size_t>(rank), extent), tree, repeats, seed);
    std::cout << r.to_json() << std::endl;
    return 0;
}

int cmd_gradcheck(const std::string& component, const std::string& shape, double tolerance) {
    const std::vector<std::string> names = component == "all" ? gradcheck_components() : std::vector{component};
    bool ok = true;
    for (const std::string& name : names) {
        const GradcheckReport r = gradcheck(name, shape.empty() ? Shape{} : parse_shape(shape), tolerance);
        std::cout << r.to_json() << std::endl;
        ok = ok && r.passed;
    }
    return ok ? 0 : fail("E_GRADCHECK_FAILED", "relative error above tolerance for " + component);
}

int cmd_phantom(const std::string& spec_path, const std::string& out_dir) {
    Index count = 1;
    const PhantomSpec spec = parse_phantom_spec(read_text_file(spec_path), &count);
    fs::create_directories(out_dir);
    for (Index i = 0; i < count; ++i) {
        const PhantomSpec s = count == 1 ? spec : phantom_variant(spec, 0, static_cast<std::uint64_t>(i));
        const Phantom p = generate_phantom(s);
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03ld", static_cast<long>(i));
        write_raw(fs::path(out_dir) / (std::string(name) + "_image.raw"), p.image);
        write_raw_labels(fs::path(out_dir) / (std::string(name) + "_label.raw"), p.labels);
        json rec = {{"case", name}, {"kind", phantom_kind_name(s.kind)}, {"seed", s.seed}, {"attempts", p.attempts},
                    {"foreground_voxels", (p.labels.data() != 0).count()}};
        std::cout << rec.dump() << std::endl;
    }
    return 0;
}

int cmd_tree(const std::string& tree_arg, Index classes) {
    const ClassTree tree = load_tree(tree_arg, classes);
    const Index c = tree.num_classes();
    json out = {{"tree", tree.to_string()},
                {"n0", tree.num_leaves()},
                {"n2", tree.num_internal()},
                {"divisions", tree.num_divisions()},
                {"bti_convolutions", 2 * (c - 1)},
                {"ti_convolutions", c * (c - 1)}};
    std::cout << out.dump() << std::endl;
    return 0;
}

int cmd_params(const std::string& preset, const std::string& config_path) {
    NetworkConfig config;
    if (!config_path.empty()) {
        config = RunConfig::load(config_path).network;
    } else if (preset == "btcv_3d") {
        config = NetworkConfig::btcv_3d();
    } else if (preset == "ravir_2d") {
        config = NetworkConfig::ravir_2d();
    } else {
        throw ConfigError("unknown preset '" + preset + "'");
    }
    Network net(config, 0);
    json stages = json::array();
    for (const auto& [group, n] : net.parameter_breakdown()) stages.push_back({{"group", group}, {"parameters", n}});
    std::cout << json{{"total", net.parameter_count()}, {"groups", stages}}.dump() << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nextou: graph U-Net segmentation with binary-tree topological interaction"};
    app.require_subcommand(1);

    std::string config_path, output_dir, ckpt_path, data_dir, overlay_dir, tree_arg, component, shape, spec_path,
        out_dir, preset = "btcv_3d";
    bool resume = false;
    Index classes = 18, extent = 64, rank = 3, repeats = 5;
    std::uint64_t seed = 0;
    double tolerance = -1.0;

    auto* train_cmd = app.add_subcommand("train", "train on synthetic phantoms");
    train_cmd->add_option("--config", config_path, "run config (YAML)")->required();
    train_cmd->add_flag("--resume", resume, "continue from output_dir/checkpoint.bin");
    train_cmd->add_option("--output-dir", output_dir, "override output_dir");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on raw volumes");
    eval_cmd->add_option("--checkpoint", ckpt_path)->required();
    eval_cmd->add_option("--data", data_dir, "directory of <case>_image.raw / <case>_label.raw")->required();
    eval_cmd->add_option("--overlay-dir", overlay_dir, "write prediction overlays (PPM)");

    auto* bench_cmd = app.add_subcommand("bench-bti", "time TI against BTI critical maps");
    bench_cmd->add_option("--classes", classes)->required();
    bench_cmd->add_option("--extent", extent)->required();
    bench_cmd->add_option("--tree", tree_arg, "tree file, or 'balanced' / 'chain'")->required();
    bench_cmd->add_option("--rank", rank, "spatial rank (2 or 3)");
    bench_cmd->add_option("--repeats", repeats);
    bench_cmd->add_option("--seed", seed);

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
    grad_cmd->add_option("--component", component, "component name or 'all'")->required();
    grad_cmd->add_option("--shape", shape, "comma-separated input shape");
    grad_cmd->add_option("--tolerance", tolerance);

    auto* phantom_cmd = app.add_subcommand("phantom", "export synthetic phantoms as raw volumes");
    phantom_cmd->add_option("--spec", spec_path, "phantom spec (YAML)")->required();
    phantom_cmd->add_option("--out", out_dir)->required();

    auto* tree_cmd = app.add_subcommand("tree-info", "validate a class tree and print its counts");
    tree_cmd->add_option("--tree", tree_arg)->required();
    tree_cmd->add_option("--classes", classes, "class count for 'balanced' / 'chain'");

    auto* params_cmd = app.add_subcommand("params", "parameter count per stage");
    params_cmd->add_option("--preset", preset, "btcv_3d or ravir_2d");
    params_cmd->add_option("--config", config_path, "take the network from a run config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("E_USAGE", e.what()) + 1;
    }

    try {
        if (*train_cmd) return cmd_train(config_path, resume, output_dir);
        if (*eval_cmd) return cmd_eval(ckpt_path, data_dir, overlay_dir);
        if (*bench_cmd) return cmd_bench(classes, extent, rank, tree_arg, repeats, seed);
        if (*grad_cmd) return cmd_gradcheck(component, shape, tolerance);
        if (*phantom_cmd) return cmd_phantom(spec_path, out_dir);
        if (*tree_cmd) return cmd_tree(tree_arg, classes);
        if (*params_cmd) return cmd_params(preset, config_path);
    } catch (const Error& e) {
        return fail(error_code_name(e.code()), e.what());
    } catch (const std::exception& e) {
        return fail("E_INTERNAL", e.what());
    }
    return 0;
}
