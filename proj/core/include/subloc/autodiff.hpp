#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "subloc/tensor.hpp"

namespace subloc {

// Value/adjoint pair. Ops allocate one node per output; parameters own
// long-lived nodes that survive across steps.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // same shape, zero-initialized

  explicit Node(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> make_node(Tensor<T> value) {
  return std::make_shared<Node<T>>(std::move(value));
}

// Ordered record of executed ops. Execution order is a valid topological
// order, so replaying the steps in reverse propagates adjoints exactly once
// per op. Adjoints accumulate additively into node grads.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> adjoint_step) { steps_.push_back(std::move(adjoint_step)); }

  // Seeds d(loss)/d(loss) = 1 and replays all recorded steps in reverse.
  void backward(Node<T>& loss) {
    if (loss.value.size() != 1) {
      throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                  loss.value.shape_str());
    }
    loss.grad[0] = T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void clear() { steps_.clear(); }
  std::size_t num_ops() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
};

// Trainable tensor with a stable name. Gradient lives on the node and
// accumulates until zero_grad().
template <typename T>
struct Parameter {
  std::string name;
  NodePtr<T> node;

  Tensor<T>& value() { return node->value; }
  const Tensor<T>& value() const { return node->value; }
  Tensor<T>& grad() { return node->grad; }
  const Tensor<T>& grad() const { return node->grad; }

  void zero_grad() { node->grad.fill(T(0)); }
};

}  // namespace subloc
