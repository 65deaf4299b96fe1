#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iseg/error.hpp"
#include "iseg/tensor.hpp"

namespace iseg {

/// One vertex of the recorded computation graph.
template <class T>
struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    bool freed = false;
    std::vector<std::shared_ptr<Node>> parents;
    /// Propagates this node's grad into its parents' grads.
    std::function<void(Node&)> backward;

    bool is_leaf() const { return !backward; }

    BasicTensor<T>& grad_buffer() {
        if (grad.empty()) grad = BasicTensor<T>(value.shape(), T{0});
        return grad;
    }
};

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
   public:
    Var() : node_(std::make_shared<Node<T>>()) {}
    explicit Var(BasicTensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    const BasicTensor<T>& value() const { return node_->value; }
    BasicTensor<T>& value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }

    /// Gradient accumulated by backward(); a zero tensor if nothing reached this node.
    BasicTensor<T> grad() const {
        return node_->grad.empty() ? BasicTensor<T>(node_->value.shape(), T{0}) : node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad = BasicTensor<T>(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    Node<T>& node() const { return *node_; }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

   private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The graph is recorded only when some input requires a gradient.
template <class T, class Backward>
Var<T> make_result(BasicTensor<T> value, std::vector<Var<T>> inputs, Backward&& backward) {
    Var<T> out(std::move(value));
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    auto& node = out.node();
    node.requires_grad = true;
    for (auto& in : inputs) node.parents.push_back(in.node_ptr());
    node.backward = std::forward<Backward>(backward);
    return out;
}

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate; the graph is freed afterwards,
/// so a second call on the same result raises GraphError.
template <class T>
void backward(const Var<T>& loss) {
    Node<T>& root = loss.node();
    if (root.value.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(root.value.shape()));
    if (root.freed) throw GraphError("backward: graph already consumed; run forward again");
    if (root.is_leaf()) throw GraphError("backward: no recorded forward graph for this value");

    // Iterative post-order DFS gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
    seen.insert(&root);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root.grad_buffer()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->is_leaf() && !n->grad.empty()) n->backward(*n);
    }
    for (Node<T>* n : order) {
        if (n->is_leaf()) continue;
        n->backward = nullptr;
        n->parents.clear();
        n->grad = BasicTensor<T>();
        n->freed = true;
    }
}

}  // namespace iseg
