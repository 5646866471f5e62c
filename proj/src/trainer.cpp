#include "nextou/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "nextou/data_io.hpp"
#include "nextou/loss_metrics.hpp"

namespace nextou {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kBatchStream = 0xba7c;

Tensor stack_images(const std::vector<EvalCase>& pool, const std::vector<Index>& idx) {
    Shape shape = pool[static_cast<std::size_t>(idx[0])].image.shape();
    const Index per = shape_numel(shape);
    shape[0] = static_cast<Index>(idx.size());
    Tensor out(shape);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        out.data().segment(static_cast<Index>(b) * per, per) = pool[static_cast<std::size_t>(idx[b])].image.data();
    }
    return out;
}

LabelMap stack_labels(const std::vector<EvalCase>& pool, const std::vector<Index>& idx) {
    Shape shape = pool[static_cast<std::size_t>(idx[0])].labels.shape();
    const Index per = shape_numel(shape);
    shape[0] = static_cast<Index>(idx.size());
    LabelMap out(shape);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        out.data().segment(static_cast<Index>(b) * per, per) = pool[static_cast<std::size_t>(idx[b])].labels.data();
    }
    return out;
}

json step_json(const StepRecord& r) {
    return {{"iteration", r.iteration},       {"lr", r.learning_rate},
            {"loss", r.loss},                 {"ce", r.ce},
            {"dice", r.dice},                 {"bti", r.bti},
            {"grad_norm", r.grad_norm},       {"conv_count", r.conv_count},
            {"skipped_divisions", r.skipped_divisions}, {"critical_voxels", r.critical_voxels}};
}

json summary_object(const EvalSummary& s) {
    return {{"mean_dsc", s.mean_dsc},
            {"mean_hd", s.mean_hd},
            {"mean_hd95", s.mean_hd95},
            {"forbidden_adjacencies", s.forbidden_adjacencies},
            {"cases", s.cases.size()}};
}

}  // namespace

EvalSummary evaluate_cases(Network& net, const std::vector<EvalCase>& cases, const ClassPairs& forbidden) {
    NoGradGuard no_grad;
    const Index c = net.config().num_classes;
    EvalSummary s;
    Index n = 0;
    for (const EvalCase& ec : cases) {
        const Var logits = net.forward(Var(ec.image), ForwardOptions{false});
        const LabelMap pred = argmax_labels(logits.value());
        CaseMetrics cm;
        cm.name = ec.name;
        for (std::int32_t k = 1; k < c; ++k) {
            ClassMetrics m;
            m.class_id = k;
            m.dsc = dsc(pred, ec.labels, k, c);
            m.hd = hausdorff(pred, ec.labels, k, c, 100.0);
            m.hd95 = hausdorff(pred, ec.labels, k, c, 95.0);
            s.mean_dsc += m.dsc;
            s.mean_hd += m.hd;
            s.mean_hd95 += m.hd95;
            ++n;
            cm.classes.push_back(m);
        }
        cm.forbidden_adjacencies = count_forbidden_adjacencies(pred, forbidden);
        s.forbidden_adjacencies += cm.forbidden_adjacencies;
        s.cases.push_back(std::move(cm));
    }
    if (n > 0) {
        s.mean_dsc /= double(n);
        s.mean_hd /= double(n);
        s.mean_hd95 /= double(n);
    }
    return s;
}

Dataset make_dataset(const RunConfig& config) {
    PhantomSpec base = config.data.phantom;
    base.seed = mix_seed(base.seed, config.seed);
    std::vector<PhantomSpec> specs;
    for (Index i = 0; i < config.data.train_cases; ++i) specs.push_back(phantom_variant(base, 1, static_cast<std::uint64_t>(i)));
    for (Index i = 0; i < config.data.val_cases; ++i) specs.push_back(phantom_variant(base, 2, static_cast<std::uint64_t>(i)));
    std::vector<Phantom> phantoms = generate_phantoms(specs, config.data.workers);
    Dataset d;
    for (Index i = 0; i < static_cast<Index>(phantoms.size()); ++i) {
        const bool train = i < config.data.train_cases;
        const Index local = train ? i : i - config.data.train_cases;
        EvalCase ec{(train ? "train_" : "val_") + std::to_string(local), std::move(phantoms[static_cast<std::size_t>(i)].image),
                    std::move(phantoms[static_cast<std::size_t>(i)].labels)};
        (train ? d.train : d.val).push_back(std::move(ec));
    }
    d.forbidden = config.data.phantom.forbidden_adjacency.empty()
                      ? natural_forbidden_pairs(config.data.phantom.kind, config.data.phantom.num_classes)
                      : config.data.phantom.forbidden_adjacency;
    return d;
}

Trainer::Trainer(RunConfig config) : Trainer(config, make_dataset(config)) {}

Trainer::Trainer(RunConfig config, Dataset data)
    : config_((config.validate(), std::move(config))),
      data_(std::move(data)),
      net_(config_.network, mix_seed(config_.seed, kInitStream)),
      sgd_(net_.parameters(), config_.optimizer, config_.iterations) {}

std::vector<Index> Trainer::batch_indices(Index iteration) const {
    std::mt19937_64 rng(mix_seed(mix_seed(config_.seed, kBatchStream), static_cast<std::uint64_t>(iteration)));
    std::vector<Index> pool(data_.train.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<Index>(i);
    // Partial Fisher-Yates with explicit integer draws (portable across standard libraries).
    for (Index b = 0; b < config_.batch_size; ++b) {
        const auto span = static_cast<std::uint64_t>(static_cast<Index>(pool.size()) - b);
        const Index j = b + static_cast<Index>(rng() % span);
        std::swap(pool[static_cast<std::size_t>(b)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(config_.batch_size));
    return pool;
}

StepRecord Trainer::step() {
    const std::vector<Index> idx = batch_indices(iteration_);
    const Tensor x = stack_images(data_.train, idx);
    const LabelMap labels = stack_labels(data_.train, idx);
    const Tensor g = one_hot(labels, config_.network.num_classes);

    ParameterSet params = net_.parameters();
    params.zero_grad();

    StepRecord r;
    r.iteration = iteration_;
    r.learning_rate = sgd_.learning_rate(iteration_);
    auto dump_and_throw = [&](const std::string& what) {
        const fs::path dir = fs::path(config_.output_dir) / "nan_dump";
        fs::create_directories(dir);
        const std::string stem = "iter_" + std::to_string(iteration_);
        write_raw(dir / (stem + "_image.raw"), x);
        write_raw_labels(dir / (stem + "_label.raw"), labels);
        json info = step_json(r);
        info["batch_indices"] = idx;
        info["reason"] = what;
        std::ofstream(dir / (stem + ".json")) << info.dump(2) << '\n';
        throw NumericalError(what + " at iteration " + std::to_string(iteration_) + "; batch dumped to " +
                             dir.string());
    };

    Var logits;
    try {
        logits = net_.forward(Var(x), ForwardOptions{true});
    } catch (const InvalidArgument& e) {
        // Non-finite activations trip the k-NN precondition before a loss exists.
        bool finite = x.data().allFinite();
        for (const ParameterRef& p : params.params()) finite = finite && p.var->value().data().allFinite();
        if (!finite) dump_and_throw(std::string("non-finite activations (") + e.what() + ")");
        throw;
    }
    if (!logits.value().data().allFinite()) dump_and_throw("non-finite logits");
    const LossBreakdown lb = total_loss(softmax_channels(logits), g, config_.tree, config_.loss);
    r.loss = lb.total.value()[0];
    r.ce = lb.ce;
    r.dice = lb.dice;
    r.bti = lb.bti;
    r.conv_count = lb.budget.conv_count;
    r.skipped_divisions = lb.budget.skipped_divisions;
    r.critical_voxels = lb.critical_voxels;

    if (!std::isfinite(r.loss)) dump_and_throw("non-finite loss");
    backward(lb.total);
    r.grad_norm = sgd_.step(iteration_);
    if (!std::isfinite(r.grad_norm)) dump_and_throw("non-finite gradient norm");
    ++iteration_;
    return r;
}

EvalSummary Trainer::evaluate() { return evaluate_cases(net_, data_.val, data_.forbidden); }

Checkpoint Trainer::checkpoint() {
    return Checkpoint::capture(config_.to_yaml(), iteration_, net_.parameters(), &sgd_.momentum());
}

void Trainer::restore(const Checkpoint& ckpt) {
    ParameterSet params = net_.parameters();
    ckpt.restore(params, &sgd_.momentum());
    iteration_ = ckpt.iteration;
}

TrainingReport train(const RunConfig& config, const TrainOptions& options) {
    const auto t0 = std::chrono::steady_clock::now();
    Trainer trainer(config);
    const fs::path out_dir = config.output_dir;
    const fs::path ckpt_path = out_dir / "checkpoint.bin";
    if (options.write_files) fs::create_directories(out_dir);

    TrainingReport report;
    report.checkpoint = ckpt_path;
    if (options.resume && fs::exists(ckpt_path)) {
        const Checkpoint ckpt = load_checkpoint(ckpt_path);
        if (RunConfig::parse(ckpt.config_yaml).to_yaml() != config.to_yaml()) {
            throw ConfigError("checkpoint " + ckpt_path.string() + " was written by a different config");
        }
        trainer.restore(ckpt);
    }
    report.start_iteration = trainer.iteration();
    if (!options.skip_initial_eval) report.initial = trainer.evaluate();

    std::ofstream log;
    if (options.write_files) {
        log.open(out_dir / "train_log.jsonl", report.start_iteration > 0 ? std::ios::app : std::ios::trunc);
    }
    const Index end = options.stop_at >= 0 ? std::min(options.stop_at, config.iterations) : config.iterations;
    while (trainer.iteration() < end) {
        const StepRecord r = trainer.step();
        report.history.push_back(r);
        if (log.is_open() && (r.iteration % config.log_every == 0 || trainer.iteration() == end)) {
            log << step_json(r).dump() << '\n';
        }
        if (options.write_files && config.checkpoint_every > 0 && trainer.iteration() % config.checkpoint_every == 0) {
            save_checkpoint(ckpt_path, trainer.checkpoint());
        }
    }
    report.iterations_run = trainer.iteration() - report.start_iteration;
    report.final = report.iterations_run == 0 && !options.skip_initial_eval ? report.initial : trainer.evaluate();
    report.clamp_warnings = trainer.network().clamp_warnings();
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (options.write_files) {
        save_checkpoint(ckpt_path, trainer.checkpoint());
        std::ofstream metrics(out_dir / "metrics.jsonl");
        if (!options.skip_initial_eval) metrics << metrics_jsonl(report.initial, "initial");
        metrics << metrics_jsonl(report.final, "final");
        json rep = {{"start_iteration", report.start_iteration},
                    {"iterations_run", report.iterations_run},
                    {"final", summary_object(report.final)},
                    {"clamp_warnings", report.clamp_warnings}};
        if (!options.skip_initial_eval) rep["initial"] = summary_object(report.initial);
        if (!report.history.empty()) rep["final_loss"] = report.history.back().loss;
        std::ofstream(out_dir / "report.json") << rep.dump(2) << '\n';
        if (config.write_plots) {
            std::vector<double> losses;
            for (const StepRecord& r : report.history) losses.push_back(r.loss);
            write_curve_svg(out_dir / "loss_curve.svg", losses, "training loss");
            if (!trainer.data().val.empty()) {
                NoGradGuard no_grad;
                const EvalCase& ec = trainer.data().val.front();
                const Var logits = trainer.network().forward(Var(ec.image), ForwardOptions{false});
                write_overlay_ppm(out_dir / "overlay_pred.ppm", ec.image, argmax_labels(logits.value()));
                write_overlay_ppm(out_dir / "overlay_gt.ppm", ec.image, ec.labels);
            }
        }
    }
    return report;
}

std::string metrics_jsonl(const EvalSummary& summary, const std::string& stage) {
    std::string out;
    for (const CaseMetrics& cm : summary.cases) {
        for (const ClassMetrics& m : cm.classes) {
            json rec = {{"stage", stage}, {"case", cm.name}, {"class", m.class_id}, {"dsc", m.dsc},
                        {"hd", m.hd},     {"hd95", m.hd95},  {"forbidden_adjacencies", cm.forbidden_adjacencies}};
            out += rec.dump() + "\n";
        }
    }
    return out;
}

std::string summary_json(const EvalSummary& summary) { return summary_object(summary).dump(); }

Network network_from_checkpoint(const Checkpoint& ckpt, RunConfig* config_out) {
    const RunConfig config = RunConfig::parse(ckpt.config_yaml);
    Network net(config.network, 0);
    ParameterSet params = net.parameters();
    ckpt.restore(params, nullptr);
    if (config_out) *config_out = config;
    return net;
}

std::vector<EvalCase> load_cases(const fs::path& dir) {
    std::vector<EvalCase> cases;
    for (const CaseFiles& f : list_cases(dir)) {
        EvalCase ec;
        ec.name = f.name;
        ec.image = read_raw(f.image);
        ec.labels = read_raw_labels(f.labels);
        const Shape ext = spatial_extents(ec.image.shape());
        Shape label_shape{1};
        label_shape.insert(label_shape.end(), ext.begin(), ext.end());
        if (ec.image.rank() < 3 || ec.image.dim(0) != 1 || ec.image.dim(1) != 1 || ec.labels.shape() != label_shape) {
            throw CorruptedRecord("case " + f.name + ": image must be (1, 1, spatial...) and labels (1, spatial...)");
        }
        cases.push_back(std::move(ec));
    }
    if (cases.empty()) throw IoError("no cases (*_image.raw) in " + dir.string());
    return cases;
}

}  // namespace nextou
