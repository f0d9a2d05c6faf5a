// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode differentiation over a per-forward-call tape.
//
// A Tape records every value produced during one forward pass together with a
// closure that propagates the output gradient to its inputs. Nodes are stored
// in creation order, which is already a topological order, so backward() is a
// single reverse sweep. Parameter leaves alias Parameter::grad directly:
// gradients accumulate across backward() calls until zero_grad() is called.
//
// A Tape is not thread-safe; confine it to the worker that created it.

#include <cstddef>
#include <deque>
#include <functional>
#include <string>

#include "nilmformer/tensor.hpp"

namespace nilm {

struct Parameter {
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the gradient of the node's output.
  using Backward = std::function<void(const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Parameter& p);

  // Records a computed value. `backward` is dropped when no input needs a
  // gradient.
  Var record(Tensor value, bool requires_grad, Backward backward);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return *nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, zero-initialized on first use. For parameter
  // leaves this is the Parameter's own gradient.
  Tensor& grad(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* value = nullptr;
    Tensor grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace nilm
