#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "ibr/core/tensor.hpp"

namespace ibr {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  matmul,
  linear,
  conv2d,
  conv_transpose2d,
  relu,
  softplus,
  tanh,
  sigmoid,
  exp,
  log,
  square,
  abs,
  sqrt,
  sum,
  mean,
  sum_per_sample,
  reshape,
  max_pool2d,
  slice,
  concat,
  log_softmax,
  softmax,
  pick,
  max_excluding,
  clamp,
  round_ste,
  custom,
};

std::string_view to_string(OpKind kind);

enum class TapeMode { recording, frozen };

template <typename Scalar>
class Tape;

/// Handle to a node on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape; }
  NodeId id() const { return id_; }
  Tape<Scalar>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  NodeId id_ = -1;
};

/// Accumulation targets handed to a node's backward function. Slot i refers to input i.
template <typename Scalar>
class GradSink {
 public:
  GradSink(std::vector<Array<Scalar>*> slots) : slots_(std::move(slots)) {}
  bool needs(std::size_t i) const { return slots_[i] != nullptr; }
  Array<Scalar>& at(std::size_t i) { return *slots_[i]; }

 private:
  std::vector<Array<Scalar>*> slots_;
};

template <typename Scalar>
using BackwardFn = std::function<void(const Array<Scalar>& out_grad, GradSink<Scalar>& sink)>;

/// Gradients produced by one reverse sweep.
template <typename Scalar>
class Gradients {
 public:
  Gradients(const Tape<Scalar>* tape, std::vector<Array<Scalar>> grads, std::vector<bool> reached,
            std::size_t visited)
      : tape_(tape), grads_(std::move(grads)), reached_(std::move(reached)), visited_(visited) {}

  // d(loss)/d(var). Nodes that do not require gradients raise DetachedNode;
  // nodes that require gradients but do not influence the loss get zeros.
  Tensor<Scalar> operator[](const Var<Scalar>& v) const;
  bool reached(const Var<Scalar>& v) const;
  std::size_t nodes_visited() const { return visited_; }

 private:
  const Tape<Scalar>* tape_;
  std::vector<Array<Scalar>> grads_;
  std::vector<bool> reached_;
  std::size_t visited_;
};

/// Append-only record of a computation. Single writer; once frozen it may be shared for
/// concurrent backward sweeps.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value);
  Var<Scalar> variable(Tensor<Scalar> value);

  Var<Scalar> record(OpKind kind, std::vector<NodeId> inputs, Tensor<Scalar> value,
                     BackwardFn<Scalar> backward);

  bool requires_grad(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  bool any_requires_grad(const std::vector<NodeId>& ids) const;
  const Tensor<Scalar>& value(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  OpKind kind(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const {
    return nodes_.at(static_cast<std::size_t>(id)).inputs;
  }

  Gradients<Scalar> backward(const Var<Scalar>& loss) const;

  void freeze() { mode_ = TapeMode::frozen; }
  TapeMode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor<Scalar> value;
    BackwardFn<Scalar> backward;
    bool requires_grad;
  };

  NodeId append(Node node);

  // A deque keeps references returned by value() valid while the tape grows.
  std::deque<Node> nodes_;
  TapeMode mode_ = TapeMode::recording;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  if (!tape_) throw Error(ErrorCode::detached_node, "variable is not bound to a tape");
  return tape_->value(id_);
}

}  // namespace ibr
