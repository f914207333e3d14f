#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "taseg/error.hpp"
#include "taseg/tensor.hpp"

namespace taseg {

class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid for the
/// lifetime of the owning tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Passed to an op's backward closure: read-only access to the inputs and
/// lazily allocated, zero-initialized gradient buffers for the inputs that
/// need one. `grad(i)` is null for inputs outside the differentiable set.
class GradSink {
 public:
  GradSink(Tape& tape, const std::vector<std::size_t>& inputs) : tape_(tape), inputs_(inputs) {}

  const Tensor& value(std::size_t i) const;
  Tensor* grad(std::size_t i);

 private:
  Tape& tape_;
  const std::vector<std::size_t>& inputs_;
};

using BackwardFn = std::function<void(const Tensor& out, const Tensor& grad_out, GradSink& in)>;

/// Linear record of executed ops. Node ids are assigned in execution order,
/// which is a topological order of the graph, so backward is a single
/// reverse sweep.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable value owned by the tape.
  Var constant(Tensor value) { return push("constant", std::move(value), nullptr, false, nullptr); }

  /// Non-differentiable view of an external tensor (e.g. a frozen weight).
  /// The tensor must outlive the tape.
  Var constant_ref(const Tensor& value) { return push("constant", Tensor{}, &value, false, nullptr); }

  /// Differentiable input owned by the tape; read its gradient with grad().
  Var variable(Tensor value) { return push("variable", std::move(value), nullptr, true, nullptr); }

  /// Differentiable view of an external tensor; backward() accumulates the
  /// gradient into `sink`, which must have the same shape.
  Var parameter(const Tensor& value, Tensor& sink) {
    if (sink.shape() != value.shape()) throw ShapeError("gradient sink shape mismatch");
    return push("parameter", Tensor{}, &value, true, &sink);
  }

  /// Records the result of an op. The output requires grad iff any input does;
  /// the closure is kept only in that case.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    for (Scalar v : value.data()) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string("op '") + op + "' produced a non-finite value");
      }
    }
    bool any = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& in : inputs) {
      if (in.tape() != this) throw Error(std::string("op '") + op + "' mixes tapes");
      ids.push_back(in.id());
      any = any || nodes_[in.id()].requires_grad;
    }
    Var out = push(op, std::move(value), nullptr, any, nullptr);
    if (any) {
      nodes_[out.id()].inputs = std::move(ids);
      nodes_[out.id()].backward = std::move(backward);
    }
    return out;
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

  /// Gradient of a variable after backward(); null when none was produced.
  const Tensor* grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    return n.has_grad ? &n.grad : nullptr;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. `seed` scales the output gradient,
  /// which lets several tapes accumulate a batch mean into shared sinks.
  void backward(Var loss, Scalar seed = 1) {
    if (loss.tape() != this) throw Error("backward on a variable from another tape");
    if (value(loss.id()).size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " +
                       to_string(value(loss.id()).shape()));
    }
    if (consumed_) throw Error("backward already ran on this tape");
    consumed_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id()).fill(seed);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad) continue;
      if (n.sink) {
        auto dst = n.sink->data();
        auto src = n.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
      if (n.backward) {
        GradSink in(*this, n.inputs);
        n.backward(value(id), n.grad, in);
      }
    }
  }

 private:
  friend class GradSink;

  struct Node {
    const char* op;
    Tensor value;
    const Tensor* external = nullptr;
    bool requires_grad = false;
    Tensor* sink = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor grad;
    bool has_grad = false;
  };

  Var push(const char* op, Tensor value, const Tensor* external, bool requires_grad, Tensor* sink) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    n.sink = sink;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(value(id).shape(), Scalar{0});
      n.has_grad = true;
    }
    return n.grad;
  }

  std::deque<Node> nodes_;  // deque: node addresses stay valid as the tape grows
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

inline const Tensor& GradSink::value(std::size_t i) const { return tape_.value(inputs_.at(i)); }

inline Tensor* GradSink::grad(std::size_t i) {
  const std::size_t id = inputs_.at(i);
  if (!tape_.requires_grad(id)) return nullptr;
  return &tape_.grad_buffer(id);
}

}  // namespace taseg
