#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "nextou/tensor.hpp"

namespace nextou {

namespace detail {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    /// Gradient buffer of input `i`, allocated on first use; nullptr when the
    /// input does not take part in differentiation.
    Tensor::Array* input_grad(std::size_t i);
};

}  // namespace detail

/// Handle to a value in the reverse-mode tape. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    static Var parameter(Tensor value) { return Var(std::move(value), true); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    /// Leaf-only mutable access, used by optimizers and checkpoint loading.
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    Index numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const Tensor& grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor(); }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Records an op result. When gradients are disabled or no input requires a
/// gradient the result is a constant and `backward` is dropped.
Var make_result(Tensor value, const std::vector<Var>& inputs,
                std::function<void(detail::Node&)> backward);

/// Seeds d(root)/d(root) = 1 (root must hold one element) and propagates.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

bool grad_enabled();

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

}  // namespace nextou
