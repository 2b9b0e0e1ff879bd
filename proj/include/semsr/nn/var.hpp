#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "semsr/core/errors.hpp"

namespace semsr::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Tensor storage is over-aligned so vectorized kernels split their work the
// same way on every run. With plain malloc alignment the split depends on the
// address, and FMA versus scalar tails then change the rounding.
inline constexpr std::size_t tensor_alignment = 64;

template <typename T>
struct AlignedAllocator {
    using value_type = T;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{tensor_alignment}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{tensor_alignment}); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

// Graph construction is skipped entirely while this is false (inference).
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct Node {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward_fn;

    Buffer<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

// Reference-semantics handle to a node in the autograd graph. Copies alias the
// same storage, which is what parameters and optimizers rely on.
template <typename T>
class Var {
public:
    using value_type = T;

    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var from(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
        return from(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
    }

    static Var from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
        return from(std::move(shape), Buffer<T>(values), requires_grad);
    }

    static Var from(Shape shape, Buffer<T> values, bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw ArgumentError("Var::from: shape " + to_string(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    static Var zeros(Shape shape, bool requires_grad = false) {
        const auto count = numel(shape);
        return from(std::move(shape), Buffer<T>(count, T(0)), requires_grad);
    }

    static Var full(Shape shape, T v) {
        const auto count = numel(shape);
        return from(std::move(shape), Buffer<T>(count, v));
    }

    static Var scalar(T v) { return from({1}, {v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(i < 0 ? node_->shape.size() + i : i); }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    std::span<T> mutable_data() { return node_->value; }
    Buffer<T>& values() { return node_->value; }
    const Buffer<T>& values() const { return node_->value; }
    std::vector<T> to_vector() const { return {node_->value.begin(), node_->value.end()}; }
    T item() const { return node_->value.at(0); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const T> grad() const { return node_->grad; }
    Buffer<T>& grad_storage() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    // Shares storage with a new shape (no graph edge; for constants only).
    Var reshaped_constant(Shape s) const {
        if (numel(s) != size()) throw ArgumentError("reshape: element count mismatch");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(s);
        n->value = node_->value;
        return Var(std::move(n));
    }

    Var detach() const { return from(node_->shape, node_->value); }

    Node<T>* raw() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Builds the result node of an op. When grad mode is on and any input requires
// grad, the node records its parents and backward closure.
template <typename T, typename Backward>
Var<T> make_op(Shape shape, Buffer<T> value, std::initializer_list<Var<T>> inputs, Backward&& backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_mode()) {
        bool any = false;
        for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
        if (any) {
            n->requires_grad = true;
            for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
            n->backward_fn = std::forward<Backward>(backward);
        }
    }
    return Var<T>(std::move(n));
}

// True when input i of node n participates in backprop.
template <typename T>
inline bool wants_grad(const Node<T>& n, std::size_t i) {
    return i < n.parents.size() && n.parents[i] && n.parents[i]->requires_grad;
}

template <typename T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) throw StateError("backward: root does not require grad");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.raw(), 0}};
    seen.insert(root.raw());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto& g = root.raw()->ensure_grad();
    std::fill(g.begin(), g.end(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    }
    // release intermediate graph state; parameters are leaves and keep grads
    for (Node<T>* n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

}  // namespace semsr::nn
