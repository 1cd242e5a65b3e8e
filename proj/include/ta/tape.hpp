#pragma once

#include "ta/tensor.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace ta::ad {

template <typename T>
class TapeT;

// Lightweight handle to a node on a tape.
template <typename T>
struct VarT {
    TapeT<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const TensorT<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return tape->value(id).shape; }
};

using Var = VarT<float>;

// Reverse-mode tape. Nodes are appended in topological order (operands are
// always recorded before results), so one reverse pass over the node list
// visits every node exactly once.
//
// A tape is single-threaded by contract: one tape per training step.
template <typename T>
class TapeT {
public:
    struct Node {
        TensorT<T> value;
        std::vector<T> grad;  // per-sweep buffer, sized on first touch
        bool is_leaf = false;
        bool needs_grad = false;  // reachable from a requires_grad leaf
        std::function<void(TapeT&, int)> backward_fn;
    };

    // Records a leaf. requires_grad is taken from the tensor; after backward
    // the tensor's grad storage holds d(loss)/d(leaf), accumulated across
    // sweeps. The grad buffer is allocated here so caller and tape share it.
    VarT<T> leaf(TensorT<T>& t) {
        if (t.requires_grad) t.ensure_grad();
        return leaf_impl(t);
    }
    VarT<T> leaf(TensorT<T>&& t) {
        if (t.requires_grad) t.ensure_grad();
        return leaf_impl(std::move(t));
    }
    VarT<T> constant(TensorT<T> t) {
        t.requires_grad = false;
        return leaf_impl(std::move(t));
    }

    int record(TensorT<T> value, std::initializer_list<int> parents,
               std::function<void(TapeT&, int)> backward_fn) {
        return record_v(std::move(value), std::vector<int>(parents), std::move(backward_fn));
    }
    int record_v(TensorT<T> value, const std::vector<int>& parents,
                 std::function<void(TapeT&, int)> backward_fn) {
        Node n;
        n.value = std::move(value);
        for (int p : parents)
            if (nodes_[p].needs_grad) n.needs_grad = true;
        if (n.needs_grad) n.backward_fn = std::move(backward_fn);
        nodes_.push_back(std::move(n));
        return (int)nodes_.size() - 1;
    }

    const TensorT<T>& value(int id) const { return nodes_[id].value; }
    TensorT<T>& mutable_value(int id) { return nodes_[id].value; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    size_t size() const { return nodes_.size(); }

    // Zero-initialized gradient buffer for a node (current sweep).
    std::vector<T>& grad_buf(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
        return n.grad;
    }
    bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

    // d(loss)/d(leaf) for every requires_grad leaf. loss must be scalar.
    void backward(VarT<T> loss) {
        check(loss.tape == this, "backward: variable is not on this tape");
        check(numel(nodes_[loss.id].value.shape) == 1,
              "backward: loss must be scalar, got shape " +
                  shape_str(nodes_[loss.id].value.shape));
        check(!consumed_, "backward: tape already consumed");
        consumed_ = true;
        std::vector<T> one(1, T(1));
        run_sweep({{loss.id, &one}});
    }

    // Injects externally computed gradients at mid-graph nodes and continues
    // the reverse sweep from there, accumulating into leaf grads. Used to
    // couple the tape to the hand-differentiated posing/rendering path.
    void backward_external(const std::vector<std::pair<VarT<T>, const std::vector<T>*>>& seeds) {
        std::vector<std::pair<int, const std::vector<T>*>> s;
        for (const auto& [var, g] : seeds) {
            check(var.tape == this, "backward_external: variable not on this tape");
            check((std::int64_t)g->size() == nodes_[var.id].value.size(),
                  "backward_external: gradient size mismatch");
            s.push_back({var.id, g});
        }
        run_sweep(s);
    }

private:
    VarT<T> leaf_impl(TensorT<T> t) {
        Node n;
        n.value = std::move(t);
        n.is_leaf = true;
        n.needs_grad = n.value.requires_grad;
        nodes_.push_back(std::move(n));
        return {this, (int)nodes_.size() - 1};
    }

    void run_sweep(const std::vector<std::pair<int, const std::vector<T>*>>& seeds) {
        for (auto& n : nodes_) n.grad.clear();
        for (const auto& [id, g] : seeds) {
            auto& buf = grad_buf(id);
            for (size_t i = 0; i < buf.size(); ++i) buf[i] += (*g)[i];
        }
        for (int i = (int)nodes_.size() - 1; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.grad.empty() || !n.backward_fn) continue;
            n.backward_fn(*this, i);
        }
        // Accumulate into leaf tensors across sweeps.
        for (auto& n : nodes_) {
            if (!n.is_leaf || !n.value.requires_grad || n.grad.empty()) continue;
            n.value.ensure_grad();
            auto& g = *n.value.grad;
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

using Tape = TapeT<float>;

}  // namespace ta::ad
