// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with tape-free reverse-mode differentiation.
//
// Every operation that touches a tensor requiring gradients records a node
// holding its parents and a backward closure. Nodes carry a per-thread
// execution sequence number; backward() walks the reachable nodes in reverse
// execution order, each exactly once, then frees the recorded graph.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "corruptlab/error.hpp"

namespace corruptlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline std::uint64_t next_sequence() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient flows in
    bool requires_grad = false;
    bool leaf = true;
    std::uint64_t seq = next_sequence();
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T{0});
        return grad;
    }
};

}  // namespace detail

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                             std::to_string(values.size()) + " values");
        }
        for (auto d : shape) {
            if (d == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<T> data() { return node_->value; }
    std::span<const T> data() const { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient accumulator; materialized as zeros on first access.
    std::span<T> grad() { return node_->ensure_grad(); }
    std::span<const T> grad() const { return node_->ensure_grad(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) {
        if (!node_->leaf) throw Error("requires_grad can only be toggled on leaf tensors");
        node_->requires_grad = on;
    }
    bool is_leaf() const { return node_->leaf; }
    const char* op_name() const { return node_->op; }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    /// Fresh leaf sharing no graph history; values are copied.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    /// Reverse-mode sweep from a scalar. Populates grad on every reachable
    /// leaf that requires it and frees the intermediate graph afterwards.
    void backward();

    const NodePtr& node() const { return node_; }
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

private:
    NodePtr node_;
};

namespace detail {

/// Creates the output node of an operation. Parents are only retained when at
/// least one of them requires gradients.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->op = op;
    node->leaf = false;
    bool any = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
    if (any) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() {
    if (!defined()) throw Error("backward() on undefined tensor");
    if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    if (!node_->requires_grad) return;

    using N = detail::Node<T>;
    std::vector<N*> order;
    std::vector<std::shared_ptr<N>> keep;  // clearing parents below must not free nodes still in `order`
    std::unordered_set<N*> seen;
    std::vector<N*> stack{node_.get()};
    while (!stack.empty()) {
        N* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) continue;
        order.push_back(n);
        for (auto& p : n->parents) {
            keep.push_back(p);
            stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const N* a, const N* b) { return a->seq > b->seq; });

    node_->ensure_grad()[0] += T{1};
    for (N* n : order) {
        if (n->leaf || !n->backward || n->grad.empty()) continue;
        n->backward(*n);
    }
    for (N* n : order) {
        if (n->leaf) continue;
        n->backward = nullptr;
        n->parents.clear();
    }
}

}  // namespace corruptlab
