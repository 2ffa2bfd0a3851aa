#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "widecaps/tensor.hpp"

namespace widecaps {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return tape->value(*this).shape(); }
};

/// Reverse-mode gradient tape. Operations are appended in execution order, so the
/// record is already topologically sorted; backward() walks it once in reverse.
template <typename T>
class Tape {
 public:
  // Receives the tape and the id of the node whose gradient is being propagated.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, false});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an operation output. The node needs a gradient iff any input does.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, needs,
                          false});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }

  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  bool has_grad(Var<T> v) const { return nodes_.at(v.id).has_grad; }

  /// Gradient of the last backward() root w.r.t. v; zeros when v was unreachable.
  Tensor<T> grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    if (!n.has_grad) return Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  const Tensor<T>& grad_ref(std::size_t id) const { return nodes_[id].grad; }

  /// Mutable gradient buffer for id, zero-initialized on first touch.
  Tensor<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>::zeros(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void accumulate(std::size_t id, std::span<const T> contribution) {
    if (!nodes_[id].requires_grad) return;
    auto g = grad_buffer(id).data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
  }

  void backward(Var<T> root) {
    auto& r = nodes_.at(root.id);
    if (r.value.size() != 1) {
      throw DimensionError("backward() root must be a scalar, got " + shape_string(r.value.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    grad_buffer(root.id)[0] = T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Hash of every branch decision taken by piecewise operations (relu masks, norm
  /// guards, clamps). Two evaluations with equal signatures ran on the same smooth piece.
  std::uint64_t branch_signature() const noexcept { return signature_; }

  void set_branch_tracking(bool on) noexcept { track_branches_ = on; }
  bool tracking_branches() const noexcept { return track_branches_; }

  void note_branch(bool taken) noexcept {
    if (!track_branches_) return;
    signature_ ^= taken ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c159e3779b9ULL;
    signature_ *= 0x100000001b3ULL;
    signature_ += ++branch_count_;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad;
    bool has_grad;
  };

  std::vector<Node> nodes_;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
  std::uint64_t branch_count_ = 0;
  bool track_branches_ = false;
};

}  // namespace widecaps
