#include "nextou/autograd.hpp"

#include <sstream>
#include <unordered_set>

namespace nextou {

namespace {
thread_local bool g_grad_enabled = true;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ',';
        out << shape[i];
    }
    out << ')';
    return out.str();
}

std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "E_INVALID_ARGUMENT";
        case ErrorCode::config_error: return "E_CONFIG";
        case ErrorCode::corrupted_record: return "E_CORRUPTED_RECORD";
        case ErrorCode::generation_error: return "E_GENERATION";
        case ErrorCode::numerical_error: return "E_NUMERICAL";
        case ErrorCode::io_error: return "E_IO";
        case ErrorCode::unknown_component: return "E_UNKNOWN_COMPONENT";
    }
    return "E_UNKNOWN";
}

Tensor::Array* detail::Node::input_grad(std::size_t i) {
    Node& in = *inputs[i];
    if (!in.requires_grad) return nullptr;
    if (in.grad.empty()) in.grad = Tensor(in.value.shape());
    return &in.grad.data();
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Var make_result(Tensor value, const std::vector<Var>& inputs,
                std::function<void(detail::Node&)> backward) {
    Var out(std::move(value));
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (!any) return out;
    const auto& node = out.node();
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const Var& v : inputs) node->inputs.push_back(v.node());
    node->backward = std::move(backward);
    return out;
}

void backward(const Var& root) {
    if (root.numel() != 1) {
        throw InvalidArgument("backward() without seed needs a scalar root, got shape " +
                              shape_to_string(root.shape()));
    }
    backward(root, Tensor::constant(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
    if (!root.requires_grad()) return;
    if (seed.shape() != root.shape()) throw InvalidArgument("backward seed shape mismatch");

    // Iterative post-order DFS yields a topological order of the tape.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    detail::Node& r = *root.node();
    if (r.grad.empty()) r.grad = Tensor(r.value.shape());
    r.grad.data() += seed.data();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node& node = **it;
        if (node.backward && !node.grad.empty()) node.backward(node);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace nextou
