#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ranlab/array.hpp"

namespace ranlab {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while
/// the owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode recording of array operations.
///
/// Nodes are appended in evaluation order, so creation order is already a
/// topological order and the backward sweep is a single reverse scan. A tape
/// is single-threaded; parallel callers use one tape each.
class Tape {
 public:
  /// Receives the gradient and the value of the node being back-propagated.
  using Backward = std::function<void(Tape&, const Array& grad_out, const Array& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Array value, std::string name = "leaf");
  /// Non-differentiable input; never receives a gradient.
  Var constant(Array value);

  /// Append an operation result. Throws NumericError if `value` is not finite.
  Var record(const char* op, Array value, std::initializer_list<Var> inputs,
             Backward backward);
  Var record(const char* op, Array value, const std::vector<Var>& inputs,
             Backward backward);

  const Array& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulator of `v` during a backward sweep. Only call when
  /// requires_grad(v).
  Array& grad_buffer(Var v);

  /// d(loss)/d(leaf) for each requested leaf. `loss` must hold one element.
  /// Leaves the loss does not depend on get exact zeros.
  std::vector<Array> grad(Var loss, std::span<const Var> leaves);
  Array grad(Var loss, Var leaf);

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(Var v) const { return nodes_[v.id].op; }

 private:
  struct Node {
    std::string op;
    Array value;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  std::vector<Array> grads_;
  std::vector<char> has_grad_;
};

}  // namespace ranlab
