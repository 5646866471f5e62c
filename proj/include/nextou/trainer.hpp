#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nextou/checkpoint.hpp"
#include "nextou/network.hpp"
#include "nextou/optimizer.hpp"
#include "nextou/phantom.hpp"
#include "nextou/run_config.hpp"

namespace nextou {

struct EvalCase {
    std::string name;
    Tensor image;     // (1, 1, spatial...)
    LabelMap labels;  // (1, spatial...)
};

struct ClassMetrics {
    std::int32_t class_id = 0;
    double dsc = 0.0;
    double hd = 0.0;
    double hd95 = 0.0;
};

struct CaseMetrics {
    std::string name;
    std::vector<ClassMetrics> classes;  // foreground classes only
    Index forbidden_adjacencies = 0;
};

struct EvalSummary {
    std::vector<CaseMetrics> cases;
    double mean_dsc = 0.0;  // over cases and foreground classes
    double mean_hd = 0.0;
    double mean_hd95 = 0.0;
    Index forbidden_adjacencies = 0;  // summed over cases
};

/// Evaluation-mode inference, one case at a time, on hard argmax labels.
EvalSummary evaluate_cases(Network& net, const std::vector<EvalCase>& cases, const ClassPairs& forbidden);

struct StepRecord {
    Index iteration = 0;
    double learning_rate = 0.0;
    double loss = 0.0;
    double ce = 0.0;
    double dice = 0.0;
    double bti = 0.0;
    double grad_norm = 0.0;
    Index conv_count = 0;
    Index skipped_divisions = 0;
    Index critical_voxels = 0;
};

struct Dataset {
    std::vector<EvalCase> train;
    std::vector<EvalCase> val;
    ClassPairs forbidden;
};

/// Phantom pools derived from the run seed: train stream 1, validation stream 2.
Dataset make_dataset(const RunConfig& config);

/// Training state: network, optimizer, iteration counter and data pool.
class Trainer {
public:
    explicit Trainer(RunConfig config);
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;
    Trainer(RunConfig config, Dataset data);

    const RunConfig& config() const { return config_; }
    Index iteration() const { return iteration_; }
    Network& network() { return net_; }
    Sgd& optimizer() { return sgd_; }
    const Dataset& data() const { return data_; }

    /// Train pool indices used at `iteration`; a pure function of (seed, iteration).
    std::vector<Index> batch_indices(Index iteration) const;

    /// One forward/loss/backward/update. Throws NumericalError (after dumping
    /// the batch under output_dir/nan_dump) on a non-finite loss or gradient.
    StepRecord step();

    EvalSummary evaluate();

    Checkpoint checkpoint();
    void restore(const Checkpoint& ckpt);

private:
    RunConfig config_;
    Dataset data_;
    Network net_;
    Sgd sgd_;
    Index iteration_ = 0;
};

struct TrainingReport {
    Index start_iteration = 0;
    Index iterations_run = 0;
    EvalSummary initial;
    EvalSummary final;
    std::vector<StepRecord> history;
    double wall_seconds = 0.0;
    Index clamp_warnings = 0;
    std::filesystem::path checkpoint;
};

struct TrainOptions {
    /// Continue from output_dir/checkpoint.bin when present.
    bool resume = false;
    /// Stop (after checkpointing) once this iteration count is reached; -1 runs to the end.
    Index stop_at = -1;
    /// Write logs, metrics, checkpoints and plots under output_dir.
    bool write_files = true;
    /// Skip the initial evaluation pass.
    bool skip_initial_eval = false;
};

TrainingReport train(const RunConfig& config, const TrainOptions& options = {});

/// JSON text of per-class metric records, one line per class per case.
std::string metrics_jsonl(const EvalSummary& summary, const std::string& stage);
std::string summary_json(const EvalSummary& summary);

/// Network of a checkpoint, rebuilt from its embedded config.
Network network_from_checkpoint(const Checkpoint& ckpt, RunConfig* config_out = nullptr);

/// Cases from a raw-volume directory.
std::vector<EvalCase> load_cases(const std::filesystem::path& dir);

}  // namespace nextou
