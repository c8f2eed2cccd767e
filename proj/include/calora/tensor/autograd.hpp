#pragma once

// Reverse-mode automatic differentiation over a per-step tape.
//
// Parameters persist across steps and own their gradient accumulators. A Tape
// records every intermediate of one forward pass in creation order, which is
// a topological order by construction; backward() walks it in reverse.

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "calora/tensor/tensor.hpp"

namespace calora {

template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor<T> value_, bool requires_grad_ = true)
      : name(std::move(name_)), value(std::move(value_)), requires_grad(requires_grad_) {}

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first backward that reaches it
  bool requires_grad = true;

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad = Tensor<T>(); }
};

template <typename T>
using ParamPtr = std::shared_ptr<Parameter<T>>;

template <typename T>
ParamPtr<T> make_param(std::string name, Tensor<T> value, bool requires_grad = true) {
  return std::make_shared<Parameter<T>>(std::move(name), std::move(value), requires_grad);
}

template <typename T>
class Tape;

// Handle to a node on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  // With grad disabled every node is a constant; used for teacher passes.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  Node& node(std::size_t id) { return nodes_.at(id); }

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Leaf bound to a persistent parameter. The value is copied so the
  // parameter may be updated while the tape still exists.
  Var<T> parameter(const ParamPtr<T>& p) {
    Node n;
    n.value = p->value;
    n.param = p.get();
    n.requires_grad = grad_enabled_ && p->requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Records an op result. `backward` is kept only if some parent needs grad.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    bool any = false;
    for (const Var<T>& p : parents) {
      if (&p.tape() != this) throw ContractError("op mixes vars from different tapes");
      n.parents.push_back(p.id());
      any = any || nodes_[p.id()].requires_grad;
    }
    if (grad_enabled_ && any) {
      n.requires_grad = true;
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Gradient buffer of a node, allocated as zeros on first use. Returns
  // nullptr for nodes that do not require grad.
  Tensor<T>* grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable node; leaf
  // gradients are added into their parameters' accumulators.
  void backward(const Var<T>& root);

  // Number of node visits made by the last backward(); exposed for tests.
  std::size_t last_backward_visits() const { return visits_; }

 private:
  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& root) {
  if (&root.tape() != this) throw ContractError("backward root belongs to another tape");
  Node& r = nodes_.at(root.id());
  if (r.value.numel() != 1) {
    throw ContractError("backward root must be scalar, got shape " +
                        shape_to_string(r.value.shape()));
  }
  visits_ = 0;
  if (!r.requires_grad) return;
  grad_sink(root.id())->fill(T{1});
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++visits_;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      Parameter<T>& p = *n.param;
      if (p.grad.empty()) {
        p.grad = n.grad;
      } else {
        for (std::size_t j = 0; j < p.grad.numel(); ++j) p.grad[j] += n.grad[j];
      }
    }
  }
}

}  // namespace calora
