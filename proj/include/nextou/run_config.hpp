#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "nextou/bti.hpp"
#include "nextou/loss_metrics.hpp"
#include "nextou/network.hpp"
#include "nextou/phantom.hpp"

namespace nextou {

struct OptimizerConfig {
    std::string kind = "sgd";
    double learning_rate = 0.01;
    double momentum = 0.99;
    bool nesterov = true;
    double weight_decay = 3e-5;
    std::string schedule = "poly";  // poly | constant
    double poly_power = 0.9;
    double grad_clip = 12.0;        // global L2 norm; 0 disables

    void validate() const;
};

struct DataConfig {
    PhantomSpec phantom;
    Index train_cases = 24;
    Index val_cases = 4;
    Index workers = 0;  // phantom generation threads
};

/// One training run. The seed fixes initialization, phantom seeds and batch order.
struct RunConfig {
    NetworkConfig network;
    LossConfig loss;
    ClassTree tree;
    OptimizerConfig optimizer;
    DataConfig data;
    Index iterations = 500;
    Index batch_size = 6;
    std::uint64_t seed = 0;
    std::string output_dir = "run";
    Index log_every = 10;
    Index checkpoint_every = 0;  // 0: final checkpoint only
    bool write_plots = false;

    void validate() const;

    static RunConfig parse(const std::string& yaml_text);
    static RunConfig load(const std::filesystem::path& path);
    std::string to_yaml() const;
};

NetworkConfig parse_network_config(const std::string& yaml_text);
/// Phantom file: PhantomSpec fields plus an optional `count` of cases.
PhantomSpec parse_phantom_spec(const std::string& yaml_text, Index* count = nullptr);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace nextou
