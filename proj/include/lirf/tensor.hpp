// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lirf/errors.hpp"

namespace lirf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until something writes a gradient
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;

    double* grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad.data();
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Dense fp64 row-major tensor. Copies share storage (handle semantics);
/// use clone() for an independent copy.
class Tensor {
  public:
    Tensor() : node_(std::make_shared<detail::Node>()) { node_->data.assign(1, 0.0); }

    explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
        node_->data.assign(numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor parameter(Shape shape, std::vector<double> values) {
        Tensor t(std::move(shape), std::move(values));
        t.set_requires_grad(true);
        return t;
    }

    const Shape& shape() const noexcept { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const noexcept { return node_->shape.size(); }
    std::size_t size() const noexcept { return node_->data.size(); }

    std::span<const double> data() const noexcept { return node_->data; }
    std::span<double> mutable_data() noexcept { return node_->data; }
    const std::vector<double>& values() const noexcept { return node_->data; }

    double item() const {
        if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->data[0];
    }
    double operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const noexcept { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const noexcept { return !node_->grad.empty(); }
    /// Gradient values; zeros when nothing was accumulated.
    std::vector<double> grad() const {
        return has_grad() ? node_->grad : std::vector<double>(size(), 0.0);
    }
    std::span<double> mutable_grad() { return {node_->grad_buffer(), size()}; }
    void zero_grad() { node_->grad.assign(size(), 0.0); }
    void drop_grad() { node_->grad.clear(); }

    const char* op_name() const noexcept { return node_->op; }
    bool is_leaf() const noexcept { return node_->parents.empty(); }

    Tensor clone() const {
        Tensor t(shape(), node_->data);
        t.set_requires_grad(requires_grad());
        return t;
    }
    /// Same values, no graph history, no gradient tracking.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    bool same_node(const Tensor& o) const noexcept { return node_ == o.node_; }

    detail::Node& node() const noexcept { return *node_; }
    const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

    /// Builds the result of an operator. The node is attached to the graph only
    /// when grad mode is on and an input requires gradients.
    static Tensor from_op(const char* op, Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward) {
        Tensor out(std::move(shape), std::move(values));
        out.node_->op = op;
        bool track = false;
        if (grad_enabled()) {
            for (const auto& in : inputs) track = track || in.requires_grad();
        }
        if (track) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(inputs.size());
            for (auto& in : inputs) out.node_->parents.push_back(in.node_);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

  private:
    std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (!std::isfinite(loss.item())) throw NumericError("backward: loss is not finite");
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS; order ends up topological (inputs before outputs).
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
    seen.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node().grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Intermediate buffers are no longer needed.
    for (detail::Node* n : order) {
        if (!n->parents.empty()) n->grad.clear();
    }
}

inline bool all_finite(std::span<const double> xs) {
    for (double v : xs) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace lirf
