#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "osdd/tensor.hpp"

namespace osdd {

// Reverse-mode tape. One Tape instance covers one forward pass; ops append
// nodes in creation order and backward() walks them in reverse. Nodes whose
// inputs do not require gradients carry no closure, so inference through the
// tape costs only the forward math.
template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  const Tensor<T>& val() const;
  bool requires_grad() const;
};

template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::function<void(Tape&)> backprop;
  };

  Var<T> make_node(Tensor<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  void set_backprop(int id, std::function<void(Tape&)> fn) {
    nodes_[static_cast<size_t>(id)].backprop = std::move(fn);
  }

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    return make_node(std::move(value), requires_grad);
  }

  // Leaf whose gradient is accumulated into an external buffer (a model
  // parameter's grad). `sink` must outlive the tape's backward pass.
  Var<T> leaf_with_sink(const Tensor<T>& value, Tensor<T>* sink, bool requires_grad) {
    Var<T> v = make_node(value, requires_grad);
    if (requires_grad) {
      int id = v.id;
      set_backprop(id, [id, sink](Tape& t) {
        const Tensor<T>& g = t.nodes_[static_cast<size_t>(id)].grad;
        if (sink->empty()) *sink = Tensor<T>::zeros(g.shape);
        for (size_t i = 0; i < g.data.size(); ++i) sink->data[i] += g.data[i];
      });
    }
    return v;
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor<T>& value(int id) { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  // Gradient buffer of a node, allocated as zeros on first touch.
  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }
  const Tensor<T>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

  void backward(Var<T> loss) {
    if (loss.val().numel() != 1)
      fail_validation("backward: loss must be scalar, got ", loss.val().shape.str());
    grad_buf(loss.id).data[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.grad.empty() && n.backprop) n.backprop(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Shape& Var<T>::shape() const {
  return tape->value(id).shape;
}
template <typename T>
const Tensor<T>& Var<T>::val() const {
  return tape->value(id);
}
template <typename T>
bool Var<T>::requires_grad() const {
  return tape->requires_grad(id);
}

}  // namespace osdd
