#pragma once

#include <magic/tensor.hpp>

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

namespace magic {

// One value in a reverse-mode computation graph. Nodes are built forward and
// consumed by a single backward() sweep; backprop reads the node's grad and
// accumulates into the inputs' grads.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated only when needs_grad
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void(Node<T>&)> backprop;
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> leaf(Tensor<T> value, bool needs_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->needs_grad = needs_grad;
  if (needs_grad) n->grad = Tensor<T>::zeros(n->value.shape);
  return n;
}

template <typename T>
NodePtr<T> make_node(Tensor<T> value, std::vector<NodePtr<T>> inputs,
                     std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs)
    if (in->needs_grad) n->needs_grad = true;
  if (n->needs_grad) {
    n->grad = Tensor<T>::zeros(n->value.shape);
    n->backprop = std::move(backprop);
  }
  return n;
}

// Seeds root->grad with 1 and runs backprop over the graph in reverse
// topological order. The root must be scalar. Parameter grads accumulate; the
// caller zeroes them between batches.
template <typename T>
void backward(const NodePtr<T>& root) {
  if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->needs_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    Node<T>* node = stack.back().first;
    const std::size_t i = stack.back().second;
    if (i < node->inputs.size()) {
      ++stack.back().second;
      Node<T>* in = node->inputs[i].get();
      if (in->needs_grad && seen.insert(in).second) stack.emplace_back(in, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad.data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace magic
