#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

#include "bridgetts/array.hpp"

namespace bridgetts {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Array<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Single-owner reverse-mode tape. Nodes are appended in evaluation order, so
// node ids are a topological order and backward is a single reverse sweep.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Array<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Array<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Array<T> value) { return leaf(std::move(value), false); }

  Var<T> record(Array<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    return record(std::move(value), std::vector<Var<T>>(parents), std::move(fn));
  }

  Var<T> record(Array<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || nodes_.at(p.id()).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Array<T>& value(const Var<T>& v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(const Var<T>& v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer for v, allocated on first use, or nullptr when v does not
  // participate in differentiation.
  Array<T>* grad_target(const Var<T>& v) {
    Node& n = nodes_.at(v.id());
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Array<T>(n.value.shape());
    return &n.grad;
  }

  const Array<T>* grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad.empty() ? nullptr : &n.grad;
  }

  void backward(const Var<T>& loss) {
    require(value(loss).size() == 1, ErrorCode::shape_mismatch,
            "backward needs a scalar loss, got " + shape_str(value(loss).shape()));
    Array<T>* seed = grad_target(loss);
    if (!seed) return;
    (*seed)[0] += T{1};
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Array<T>();
  }

 private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    bool requires_grad;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

}  // namespace bridgetts
