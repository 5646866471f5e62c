#include "nextou/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "nextou/grapher_blocks.hpp"
#include "nextou/loss_metrics.hpp"
#include "nextou/network.hpp"

namespace nextou {

namespace {

struct Entry {
    Tensor* tensor;  // perturbed in place
    Index index;
    double analytic;
};

void randomize(ParameterSet& params, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (const ParameterRef& p : params.params()) {
        for (Index i = 0; i < p.var->numel(); ++i) p.var->mutable_value()[i] = u(rng);
    }
}

struct Component {
    Shape shape;
    double tolerance;
    bool check_params;
    /// Builds the closure for `shape`; `params` receives the learnable state.
    std::function<std::function<Var(const Var&)>(const Shape&, ParameterSet&, Rng&, std::shared_ptr<void>&)> build;
};

template <typename T>
T& hold(std::shared_ptr<void>& keep, T value) {
    auto p = std::make_shared<T>(std::move(value));
    keep = p;
    return *p;
}

const std::map<std::string, Component>& registry() {
    static const std::map<std::string, Component> r = [] {
        std::map<std::string, Component> m;
        const ForwardOptions train{true};
        m["ffn"] = {{1, 8, 4, 4}, 1e-6, true, [train](const Shape& s, ParameterSet& ps, Rng& rng, std::shared_ptr<void>& keep) {
                        FfnParams& p = hold(keep, FfnParams::create(s[1], 4, rng));
                        p.collect(ps, "ffn");
                        randomize(ps, rng);
                        return std::function<Var(const Var&)>([&p, train](const Var& x) { return ffn(x, p, train); });
                    }};
        m["max_relative_conv"] = {
            {1, 16, 8}, 1e-4, true, [](const Shape& s, ParameterSet& ps, Rng& rng, std::shared_ptr<void>& keep) {
                struct State {
                    GraphConvParams params;
                    std::optional<PatchGraph> graph;
                };
                State& st = hold(keep, State{GraphConvParams::create(s[2], 2 * s[2], 4, NormKind::instance, rng), {}});
                st.params.collect(ps, "conv");
                randomize(ps, rng);
                // The graph is built once from the unperturbed input and held fixed.
                return std::function<Var(const Var&)>([&st](const Var& x) {
                    if (!st.graph) st.graph = knn_graph(x.value(), std::min<Index>(4, x.value().dim(1) - 1));
                    return max_relative_conv(x, *st.graph, st.params);
                });
            }};
        m["p_grapher"] = {{1, 8, 8, 8}, 1e-4, true,
                          [train](const Shape& s, ParameterSet& ps, Rng& rng, std::shared_ptr<void>& keep) {
                              GrapherParams& p = hold(keep, GrapherParams::create(s[1], 4, NormKind::instance, rng));
                              p.collect(ps, "p_grapher");
                              randomize(ps, rng);
                              return std::function<Var(const Var&)>(
                                  [&p, train](const Var& x) { return p_grapher(x, p, 4, true, train); });
                          }};
        m["sw_grapher"] = {{1, 8, 6, 6}, 1e-4, true,
                           [train](const Shape& s, ParameterSet& ps, Rng& rng, std::shared_ptr<void>& keep) {
                               GrapherParams& p = hold(keep, GrapherParams::create(s[1], 4, NormKind::batch, rng));
                               p.collect(ps, "sw_grapher");
                               randomize(ps, rng);
                               return std::function<Var(const Var&)>(
                                   [&p, train](const Var& x) { return sw_grapher(x, p, 4, 4, true, train); });
                           }};
        m["eviG_block_pair"] = {
            {1, 8, 4, 4, 4}, 1e-4, true, [train](const Shape& s, ParameterSet& ps, Rng& rng, std::shared_ptr<void>& keep) {
                EViGBlockParams& p = hold(keep, EViGBlockParams::create(s[1], 4, 4, 4, true, true, 4, rng));
                p.collect(ps, "evig");
                randomize(ps, rng);
                return std::function<Var(const Var&)>([&p, train](const Var& x) { return evig_block_pair(x, p, train); });
            }};
        m["total_loss"] = {
            {2, 3, 8, 8}, 1e-4, false, [](const Shape& s, ParameterSet&, Rng& rng, std::shared_ptr<void>& keep) {
                struct State {
                    Tensor g;
                    ClassTree tree;
                };
                Shape lshape{s[0]};
                lshape.insert(lshape.end(), s.begin() + 2, s.end());
                LabelMap labels(lshape);
                for (Index i = 0; i < labels.numel(); ++i) labels[i] = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(s[1]));
                std::string tree = std::to_string(s[1] - 1);
                for (Index k = s[1] - 2; k >= 0; --k) tree = "[" + tree + "," + std::to_string(k) + "]";
                State& st = hold(keep, State{one_hot(labels, s[1]), ClassTree::parse(tree)});
                LossConfig cfg;
                cfg.lambda_bti = 0.5;
                return std::function<Var(const Var&)>([&st, cfg](const Var& logits) {
                    // Scale spreads the logits so argmax margins dwarf the step.
                    return total_loss(softmax_channels(scale(logits, 3.0)), st.g, st.tree, cfg).total;
                });
            }};
        m["max_pool_with_indices"] = {
            {1, 4, 6, 6}, 1e-6, false, [](const Shape&, ParameterSet&, Rng&, std::shared_ptr<void>&) {
                return std::function<Var(const Var&)>([](const Var& x) {
                    PoolRecord record;
                    return max_pool(x, record);
                });
            }};
        m["network"] = {
            {1, 1, 8, 8, 8}, 1e-3, false, [](const Shape& s, ParameterSet&, Rng& rng, std::shared_ptr<void>& keep) {
                NetworkConfig c;
                c.spatial_rank = static_cast<Index>(s.size()) - 2;
                c.in_channels = s[1];
                c.base_channels = 8;
                c.num_conv_stages = 1;
                c.num_topo_stages = 2;
                c.pool_flags = {Shape(static_cast<std::size_t>(c.spatial_rank), 0), Shape(static_cast<std::size_t>(c.spatial_rank), 1),
                                Shape(static_cast<std::size_t>(c.spatial_rank), 1)};
                c.knn_schedule = {4, 4};
                c.num_heads = 4;
                c.num_classes = 3;
                c.pgrapher_pool = {true, false};
                c.patch_size.assign(s.begin() + 2, s.end());
                Network& net = hold(keep, Network(c, rng()));
                ParameterSet own = net.parameters();
                randomize(own, rng);
                for (const ParameterRef& p : own.params()) {
                    p.var->mutable_value().data() *= 0.5;
                }
                return std::function<Var(const Var&)>([&net](const Var& x) { return net.forward(x, ForwardOptions{true}); });
            }};
        return m;
    }();
    return r;
}

}  // namespace

Tensor tie_free_input(const Shape& shape, std::uint64_t seed) {
    Tensor t(shape);
    const Index n = t.numel();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    for (Index i = 0; i < n; ++i) {
        t[i] = n > 1 ? -1.0 + 2.0 * double(order[static_cast<std::size_t>(i)]) / double(n - 1) : 0.0;
    }
    return t;
}

GradcheckReport gradcheck_function(const std::string& name, const std::function<Var(const Var&)>& f, const Tensor& x,
                                   ParameterSet params, double tolerance, const GradcheckOptions& options) {
    Rng rng(options.seed ^ 0x9a7d);
    Tensor input = x;

    // Fixed random projection of the output.
    Tensor proj;
    {
        NoGradGuard no_grad;
        proj = Tensor(f(Var(input)).shape());
    }
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Index i = 0; i < proj.numel(); ++i) proj[i] = u(rng);
    auto objective = [&](const Var& out) { return sum(mul(out, Var(proj))); };

    params.zero_grad();
    Var xv = Var::parameter(input);
    backward(objective(f(xv)));

    std::vector<Entry> entries;
    auto pick = [&](Index total, Index limit) {
        std::vector<Index> idx(static_cast<std::size_t>(total));
        std::iota(idx.begin(), idx.end(), 0);
        if (total > limit) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(static_cast<std::size_t>(limit));
        }
        return idx;
    };
    for (Index i : pick(input.numel(), options.max_input_entries)) {
        entries.push_back({&input, i, xv.has_grad() ? xv.grad()[i] : 0.0});
    }
    // Parameter entries: flat index over the concatenation of all parameters.
    std::vector<std::pair<Var*, Index>> flat;
    for (const ParameterRef& p : params.params()) {
        for (Index i = 0; i < p.var->numel(); ++i) flat.emplace_back(p.var, i);
    }
    for (Index k : pick(static_cast<Index>(flat.size()), options.max_param_entries)) {
        auto [var, i] = flat[static_cast<std::size_t>(k)];
        entries.push_back({&var->mutable_value(), i, var->has_grad() ? var->grad()[i] : 0.0});
    }

    NoGradGuard no_grad;
    double max_abs = 0.0, max_numeric = 0.0;
    for (Entry& e : entries) {
        const double original = (*e.tensor)[e.index];
        (*e.tensor)[e.index] = original + options.step;
        const double plus = objective(f(Var(input))).value()[0];
        (*e.tensor)[e.index] = original - options.step;
        const double minus = objective(f(Var(input))).value()[0];
        (*e.tensor)[e.index] = original;
        const double numeric = (plus - minus) / (2.0 * options.step);
        max_abs = std::max(max_abs, std::abs(numeric - e.analytic));
        max_numeric = std::max(max_numeric, std::abs(numeric));
    }

    GradcheckReport r;
    r.component = name;
    r.shape = x.shape();
    r.checked_entries = static_cast<Index>(entries.size());
    r.max_abs_error = max_abs;
    r.max_rel_error = max_abs / std::max(max_numeric, 1e-12);
    r.tolerance = tolerance;
    r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < tolerance;
    return r;
}

std::vector<std::string> gradcheck_components() {
    std::vector<std::string> names;
    for (const auto& [name, c] : registry()) names.push_back(name);
    return names;
}

GradcheckReport gradcheck(const std::string& component, const Shape& shape, double tolerance,
                          const GradcheckOptions& options) {
    const auto& reg = registry();
    const auto it = reg.find(component);
    if (it == reg.end()) {
        std::string known;
        for (const auto& [name, c] : reg) known += (known.empty() ? "" : ", ") + name;
        throw Error(ErrorCode::unknown_component, "unknown gradcheck component '" + component + "' (known: " + known + ")");
    }
    const Component& c = it->second;
    const Shape s = shape.empty() ? c.shape : shape;
    Rng rng(options.seed);
    ParameterSet params;
    std::shared_ptr<void> keep;
    const auto f = c.build(s, params, rng, keep);
    GradcheckOptions opts = options;
    if (!c.check_params) opts.max_param_entries = 0;
    return gradcheck_function(component, f, tie_free_input(s, options.seed + 1), params,
                              tolerance < 0.0 ? c.tolerance : tolerance, opts);
}

std::string GradcheckReport::to_json() const {
    nlohmann::json j = {{"component", component},         {"shape", shape},
                        {"checked_entries", checked_entries}, {"max_abs_error", max_abs_error},
                        {"max_rel_error", max_rel_error},   {"tolerance", tolerance},
                        {"passed", passed}};
    return j.dump();
}

}  // namespace nextou
