#include "nextou/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace nextou {

namespace {

void check_keys(const YAML::Node& node, const std::string& where, const std::set<std::string>& allowed) {
    if (!node.IsMap()) throw ConfigError(where + ": expected a mapping");
    for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& out, const std::string& where) {
    if (!node[key]) return;
    try {
        out = node[key].as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

YAML::Node load_yaml(const std::string& text) {
    try {
        return YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("YAML: ") + e.what());
    }
}

NetworkConfig network_from(const YAML::Node& n) {
    const std::string w = "network";
    check_keys(n, w,
               {"spatial_rank", "in_channels", "base_channels", "num_conv_stages", "num_topo_stages", "pool_flags",
                "knn_schedule", "window_size", "num_heads", "num_classes", "ffn_expansion", "pgrapher_pool",
                "decoder_topo", "sw_shifted", "bottleneck", "patch_size", "preset"});
    NetworkConfig c;
    if (n["preset"]) {
        const auto preset = n["preset"].as<std::string>();
        if (preset == "btcv_3d") {
            c = NetworkConfig::btcv_3d();
        } else if (preset == "ravir_2d") {
            c = NetworkConfig::ravir_2d();
        } else {
            throw ConfigError("network.preset: unknown '" + preset + "'");
        }
    }
    read(n, "spatial_rank", c.spatial_rank, w);
    read(n, "in_channels", c.in_channels, w);
    read(n, "base_channels", c.base_channels, w);
    read(n, "num_conv_stages", c.num_conv_stages, w);
    read(n, "num_topo_stages", c.num_topo_stages, w);
    read(n, "pool_flags", c.pool_flags, w);
    read(n, "knn_schedule", c.knn_schedule, w);
    read(n, "window_size", c.window_size, w);
    read(n, "num_heads", c.num_heads, w);
    read(n, "num_classes", c.num_classes, w);
    read(n, "ffn_expansion", c.ffn_expansion, w);
    read(n, "pgrapher_pool", c.pgrapher_pool, w);
    read(n, "decoder_topo", c.decoder_topo, w);
    read(n, "sw_shifted", c.sw_shifted, w);
    read(n, "bottleneck", c.bottleneck, w);
    read(n, "patch_size", c.patch_size, w);
    return c;
}

PhantomSpec phantom_from(const YAML::Node& n, const std::string& w, Index* count) {
    std::set<std::string> keys{"kind",  "extents",   "num_classes", "noise_sigma", "forbidden_adjacency",
                               "seed", "occlusion", "max_retries"};
    if (count) keys.insert("count");
    check_keys(n, w, keys);
    PhantomSpec s;
    if (!n["kind"]) throw ConfigError(w + ".kind is required");
    s.kind = parse_phantom_kind(n["kind"].as<std::string>());
    read(n, "extents", s.extents, w);
    read(n, "num_classes", s.num_classes, w);
    read(n, "noise_sigma", s.noise_sigma, w);
    read(n, "seed", s.seed, w);
    read(n, "occlusion", s.occlusion, w);
    read(n, "max_retries", s.max_retries, w);
    if (n["forbidden_adjacency"]) {
        for (const auto& pair : n["forbidden_adjacency"]) {
            if (!pair.IsSequence() || pair.size() != 2) throw ConfigError(w + ".forbidden_adjacency: pairs [a, b] expected");
            s.forbidden_adjacency.emplace_back(pair[0].as<std::int32_t>(), pair[1].as<std::int32_t>());
        }
    }
    if (count) {
        *count = 1;
        read(n, "count", *count, w);
        if (*count < 1) throw ConfigError("count must be >= 1");
    }
    s.validate();
    return s;
}

void emit_phantom(YAML::Emitter& out, const PhantomSpec& s) {
    out << YAML::BeginMap;
    out << YAML::Key << "kind" << YAML::Value << phantom_kind_name(s.kind);
    out << YAML::Key << "extents" << YAML::Value << YAML::Flow << s.extents;
    out << YAML::Key << "num_classes" << YAML::Value << s.num_classes;
    out << YAML::Key << "noise_sigma" << YAML::Value << s.noise_sigma;
    out << YAML::Key << "forbidden_adjacency" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (const auto& [a, b] : s.forbidden_adjacency) out << YAML::Flow << std::vector<std::int32_t>{a, b};
    out << YAML::EndSeq;
    out << YAML::Key << "seed" << YAML::Value << s.seed;
    out << YAML::Key << "occlusion" << YAML::Value << s.occlusion;
    out << YAML::Key << "max_retries" << YAML::Value << s.max_retries;
    out << YAML::EndMap;
}

}  // namespace

void OptimizerConfig::validate() const {
    if (kind != "sgd") throw ConfigError("optimizer.kind: only 'sgd' is supported, got '" + kind + "'");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("optimizer.learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer.momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
    if (schedule != "poly" && schedule != "constant") {
        throw ConfigError("optimizer.schedule must be 'poly' or 'constant'");
    }
    if (!(poly_power > 0.0)) throw ConfigError("optimizer.poly_power must be > 0");
    if (!(grad_clip >= 0.0)) throw ConfigError("optimizer.grad_clip must be >= 0");
}

void RunConfig::validate() const {
    network.validate();
    loss.validate();
    optimizer.validate();
    data.phantom.validate();
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (data.train_cases < 1 || data.val_cases < 1) throw ConfigError("data.train_cases and data.val_cases must be >= 1");
    if (batch_size > data.train_cases) throw ConfigError("batch_size exceeds data.train_cases");
    if (log_every < 1 || checkpoint_every < 0) throw ConfigError("log_every must be >= 1, checkpoint_every >= 0");
    if (tree.num_classes() != network.num_classes) {
        throw ConfigError("tree has " + std::to_string(tree.num_classes()) + " classes, network.num_classes is " +
                          std::to_string(network.num_classes));
    }
    if (data.phantom.num_classes != network.num_classes) {
        throw ConfigError("data.phantom.num_classes differs from network.num_classes");
    }
    if (data.phantom.extents != network.patch_size) {
        throw ConfigError("data.phantom.extents " + shape_to_string(data.phantom.extents) +
                          " differ from network.patch_size " + shape_to_string(network.patch_size));
    }
    if (network.in_channels != 1) throw ConfigError("phantom images have one channel; network.in_channels must be 1");
}

RunConfig RunConfig::parse(const std::string& yaml_text) {
    const YAML::Node root = load_yaml(yaml_text);
    check_keys(root, "config",
               {"network", "loss", "tree", "optimizer", "data", "iterations", "batch_size", "seed", "output_dir",
                "log_every", "checkpoint_every", "write_plots"});
    RunConfig c;
    if (!root["network"]) throw ConfigError("config.network is required");
    c.network = network_from(root["network"]);
    c.loss = LossConfig::defaults_for_rank(c.network.spatial_rank);
    if (const YAML::Node l = root["loss"]) {
        check_keys(l, "loss", {"lambda_dice", "lambda_bti", "pixel_ce_only"});
        read(l, "lambda_dice", c.loss.lambda_dice, "loss");
        read(l, "lambda_bti", c.loss.lambda_bti, "loss");
        read(l, "pixel_ce_only", c.loss.pixel_ce_only, "loss");
    }
    if (const YAML::Node o = root["optimizer"]) {
        const std::string w = "optimizer";
        check_keys(o, w,
                   {"kind", "learning_rate", "momentum", "nesterov", "weight_decay", "schedule", "poly_power",
                    "grad_clip"});
        read(o, "kind", c.optimizer.kind, w);
        read(o, "learning_rate", c.optimizer.learning_rate, w);
        read(o, "momentum", c.optimizer.momentum, w);
        read(o, "nesterov", c.optimizer.nesterov, w);
        read(o, "weight_decay", c.optimizer.weight_decay, w);
        read(o, "schedule", c.optimizer.schedule, w);
        read(o, "poly_power", c.optimizer.poly_power, w);
        read(o, "grad_clip", c.optimizer.grad_clip, w);
    }
    const YAML::Node d = root["data"];
    if (!d) throw ConfigError("config.data is required");
    check_keys(d, "data", {"phantom", "train_cases", "val_cases", "workers"});
    if (!d["phantom"]) throw ConfigError("data.phantom is required");
    c.data.phantom = phantom_from(d["phantom"], "data.phantom", nullptr);
    read(d, "train_cases", c.data.train_cases, "data");
    read(d, "val_cases", c.data.val_cases, "data");
    read(d, "workers", c.data.workers, "data");
    if (root["tree"]) {
        c.tree = ClassTree::parse(root["tree"].as<std::string>());
    } else {
        c.tree = default_tree(c.data.phantom.kind, c.network.num_classes);
    }
    read(root, "iterations", c.iterations, "config");
    read(root, "batch_size", c.batch_size, "config");
    read(root, "seed", c.seed, "config");
    read(root, "output_dir", c.output_dir, "config");
    read(root, "log_every", c.log_every, "config");
    read(root, "checkpoint_every", c.checkpoint_every, "config");
    read(root, "write_plots", c.write_plots, "config");
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return parse(read_text_file(path)); }

std::string RunConfig::to_yaml() const {
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap;
    out << YAML::Key << "network" << YAML::Value << YAML::BeginMap;
    const NetworkConfig& n = network;
    out << YAML::Key << "spatial_rank" << YAML::Value << n.spatial_rank;
    out << YAML::Key << "in_channels" << YAML::Value << n.in_channels;
    out << YAML::Key << "base_channels" << YAML::Value << n.base_channels;
    out << YAML::Key << "num_conv_stages" << YAML::Value << n.num_conv_stages;
    out << YAML::Key << "num_topo_stages" << YAML::Value << n.num_topo_stages;
    out << YAML::Key << "pool_flags" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (const Shape& f : n.pool_flags) out << YAML::Flow << f;
    out << YAML::EndSeq;
    out << YAML::Key << "knn_schedule" << YAML::Value << YAML::Flow << n.knn_schedule;
    out << YAML::Key << "window_size" << YAML::Value << n.window_size;
    out << YAML::Key << "num_heads" << YAML::Value << n.num_heads;
    out << YAML::Key << "num_classes" << YAML::Value << n.num_classes;
    out << YAML::Key << "ffn_expansion" << YAML::Value << n.ffn_expansion;
    out << YAML::Key << "pgrapher_pool" << YAML::Value << YAML::Flow << n.resolved_pgrapher_pool();
    out << YAML::Key << "decoder_topo" << YAML::Value << n.decoder_topo;
    out << YAML::Key << "sw_shifted" << YAML::Value << n.sw_shifted;
    out << YAML::Key << "bottleneck" << YAML::Value << n.bottleneck;
    out << YAML::Key << "patch_size" << YAML::Value << YAML::Flow << n.patch_size;
    out << YAML::EndMap;
    out << YAML::Key << "loss" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "lambda_dice" << YAML::Value << loss.lambda_dice;
    out << YAML::Key << "lambda_bti" << YAML::Value << loss.lambda_bti;
    out << YAML::Key << "pixel_ce_only" << YAML::Value << loss.pixel_ce_only;
    out << YAML::EndMap;
    out << YAML::Key << "tree" << YAML::Value << YAML::DoubleQuoted << tree.to_string();
    out << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "kind" << YAML::Value << optimizer.kind;
    out << YAML::Key << "learning_rate" << YAML::Value << optimizer.learning_rate;
    out << YAML::Key << "momentum" << YAML::Value << optimizer.momentum;
    out << YAML::Key << "nesterov" << YAML::Value << optimizer.nesterov;
    out << YAML::Key << "weight_decay" << YAML::Value << optimizer.weight_decay;
    out << YAML::Key << "schedule" << YAML::Value << optimizer.schedule;
    out << YAML::Key << "poly_power" << YAML::Value << optimizer.poly_power;
    out << YAML::Key << "grad_clip" << YAML::Value << optimizer.grad_clip;
    out << YAML::EndMap;
    out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "phantom" << YAML::Value;
    emit_phantom(out, data.phantom);
    out << YAML::Key << "train_cases" << YAML::Value << data.train_cases;
    out << YAML::Key << "val_cases" << YAML::Value << data.val_cases;
    out << YAML::Key << "workers" << YAML::Value << data.workers;
    out << YAML::EndMap;
    out << YAML::Key << "iterations" << YAML::Value << iterations;
    out << YAML::Key << "batch_size" << YAML::Value << batch_size;
    out << YAML::Key << "seed" << YAML::Value << seed;
    out << YAML::Key << "output_dir" << YAML::Value << output_dir;
    out << YAML::Key << "log_every" << YAML::Value << log_every;
    out << YAML::Key << "checkpoint_every" << YAML::Value << checkpoint_every;
    out << YAML::Key << "write_plots" << YAML::Value << write_plots;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

NetworkConfig parse_network_config(const std::string& yaml_text) {
    NetworkConfig c = network_from(load_yaml(yaml_text));
    c.validate();
    return c;
}

PhantomSpec parse_phantom_spec(const std::string& yaml_text, Index* count) {
    return phantom_from(load_yaml(yaml_text), "phantom", count);
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace nextou
