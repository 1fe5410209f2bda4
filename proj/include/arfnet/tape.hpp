// Copyright 2026 the arfnet authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file tape.hpp
 * @brief Reverse-mode differentiation tape.
 *
 * Ops record one node per call in creation order, which is already a
 * topological order of the computation graph, so the backward pass is a
 * single reverse sweep that visits each node exactly once. Node slots store
 * a copy of the forward value; pull closures read parent values from the
 * tape and accumulate into parent gradient buffers.
 *
 * A tape is single-writer: one training step owns one tape. Forward-only
 * evaluation passes a null tape to the ops and records nothing.
 */

#pragma once

#include <atomic>
#include <functional>
#include <utility>

#include "arfnet/tensor.hpp"

namespace arfnet {

template <typename T>
class Tape {
 public:
  using Pull = std::function<void(Tape&, int self)>;

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }

  bool tracked(const Tensor<T>& t) const { return t.node >= 0 && t.tape_id == id_; }

  /// Register a leaf tensor. Its current value is copied onto the tape and
  /// the tensor handle is updated in place.
  int watch(Tensor<T>& t, bool needs_grad = true) {
    const int id = push(Tensor<T>(t), nullptr, !needs_grad);
    t.node = id;
    t.tape_id = id_;
    return id;
  }

  /// Slot for an op input: the existing slot when tracked, otherwise a
  /// constant leaf holding a copy of the value.
  int ensure(const Tensor<T>& t) {
    if (tracked(t)) return t.node;
    return push(Tensor<T>(t), nullptr, /*constant=*/true);
  }

  /// Record an op result. The value is moved onto the tape; the returned
  /// tensor aliases nothing and carries the new slot handle.
  Tensor<T> record(Tensor<T>&& value, Pull pull) {
    Tensor<T> out = value;
    const int id = push(std::move(value), std::move(pull), false);
    out.node = id;
    out.tape_id = id_;
    return out;
  }

  size_t size() const { return nodes_.size(); }

  const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  /// Gradient buffer for a slot, allocated to the slot's shape on first use.
  std::vector<T>& grad_buf(int id) {
    auto& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

  /// Skip accumulation into constants; their gradients are never read.
  bool wants_grad(int id) const { return !nodes_[static_cast<size_t>(id)].constant; }

  void accumulate(int id, const std::vector<T>& g) {
    if (!wants_grad(id)) return;
    auto& buf = grad_buf(id);
    for (size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  /// Reverse sweep from a scalar output. Every recorded node is visited at
  /// most once, in reverse creation order.
  void backward(const Tensor<T>& output) {
    if (!tracked(output)) throw ContractError("backward: output is not on this tape");
    if (output.numel() != 1) throw ContractError("backward: output must be a scalar");
    grad_buf(output.node)[0] = T(1);
    for (int id = output.node; id >= 0; --id) {
      auto& n = nodes_[static_cast<size_t>(id)];
      if (n.pull && !n.grad.empty()) n.pull(*this, id);
    }
  }

  /// Gradient of a watched/recorded tensor, shaped exactly like the tensor.
  Tensor<T> grad(const Tensor<T>& t) const {
    if (!tracked(t)) throw ContractError("grad: tensor is not on this tape");
    const auto& n = nodes_[static_cast<size_t>(t.node)];
    Tensor<T> g(t.shape);
    if (!n.grad.empty()) g.data = n.grad;
    return g;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    Pull pull;
    bool constant = false;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  int push(Tensor<T>&& value, Pull pull, bool constant) {
    value.node = -1;
    value.tape_id = 0;
    Node n;
    n.value = std::move(value);
    n.pull = std::move(pull);
    n.constant = constant;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

}  // namespace arfnet
