#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "biatten/tensor.hpp"

namespace biatten {

/// Reverse-mode autodiff tape. Nodes are appended in forward order, so the
/// list is topologically sorted by construction; backward() walks it once in
/// reverse. Leaf nodes may point at an external parameter tensor, which
/// receives the accumulated gradient after the sweep.
template <typename T = float>
class Graph {
 public:
  struct Node {
    const char* op;
    std::vector<int> inputs;
    Tensor<T> value;
    std::vector<T> grad;
    std::function<void(Graph&, int)> backward;
    Tensor<T>* origin = nullptr;
    bool needs_grad = false;
  };

  int leaf(Tensor<T>& t) {
    Node n;
    n.op = "leaf";
    n.value = t;  // copy; the graph owns its forward values
    n.origin = &t;
    n.needs_grad = t.requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int constant(Tensor<T> t) {
    Node n;
    n.op = "constant";
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int add_op(const char* op, std::vector<int> inputs, Tensor<T> value,
             std::function<void(Graph&, int)> backward_fn) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    for (int id : n.inputs) {
      if (node(id).needs_grad) n.needs_grad = true;
    }
    n.value = std::move(value);
    n.backward = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<T>& value(int id) const { return node(id).value; }

  std::vector<T>& grad(int id) { return node(id).grad; }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and accumulates adjoints into every node that
  /// feeds the loss. Parameters (leaves with requires_grad) receive gradients
  /// in their grad slot, added to whatever is already there.
  void backward(int loss) {
    if (loss < 0 || static_cast<std::size_t>(loss) >= nodes_.size()) {
      throw TensorError("backward: loss node id out of range");
    }
    if (nodes_[loss].value.size() != 1) {
      throw TensorError("backward requires a scalar loss, got shape " +
                        shape_str(nodes_[loss].value.shape));
    }

    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<int> stack{loss};
    reachable[loss] = 1;
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      for (int in : nodes_[id].inputs) {
        if (!reachable[in]) {
          reachable[in] = 1;
          stack.push_back(in);
        }
      }
    }

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (reachable[i]) nodes_[i].grad.assign(nodes_[i].value.size(), T(0));
    }
    nodes_[loss].grad[0] = T(1);

    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!reachable[id] || !n.needs_grad || !n.backward) continue;
      n.backward(*this, id);
    }

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!reachable[i] || n.origin == nullptr || !n.origin->requires_grad) continue;
      n.origin->ensure_grad();
      for (std::size_t k = 0; k < n.grad.size(); ++k) n.origin->grad[k] += n.grad[k];
    }
  }

 private:
  std::vector<Node> nodes_;
};

}  // namespace biatten
