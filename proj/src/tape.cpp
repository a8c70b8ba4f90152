#include "ranlab/tape.hpp"

#include "ranlab/errors.hpp"

namespace ranlab {

const Array& Var::value() const {
  RANLAB_REQUIRE(tape != nullptr, "Var is not bound to a tape");
  return tape->value(*this);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Array value, std::string name) {
  if (!value.all_finite())
    throw NumericError("non-finite value in leaf '" + name + "'");
  return push(Node{std::move(name), std::move(value), {}, nullptr, true});
}

Var Tape::constant(Array value) {
  if (!value.all_finite()) throw NumericError("non-finite value in constant input");
  return push(Node{"constant", std::move(value), {}, nullptr, false});
}

Var Tape::record(const char* op, Array value, std::initializer_list<Var> inputs,
                 Backward backward) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(const char* op, Array value, const std::vector<Var>& inputs,
                 Backward backward) {
  if (!value.all_finite())
    throw NumericError(std::string("non-finite value produced by '") + op + "' (node " +
                       std::to_string(nodes_.size()) + ")");
  Node node{op, std::move(value), {}, std::move(backward), false};
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    RANLAB_REQUIRE(in.tape == this, std::string("operand of '") + op + "' is from another tape");
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  return push(std::move(node));
}

Array& Tape::grad_buffer(Var v) {
  if (!has_grad_[v.id]) {
    grads_[v.id] = Array(nodes_[v.id].value.shape(), 0.0);
    has_grad_[v.id] = 1;
  }
  return grads_[v.id];
}

std::vector<Array> Tape::grad(Var loss, std::span<const Var> leaves) {
  RANLAB_REQUIRE(loss.tape == this, "loss is from another tape");
  RANLAB_REQUIRE(value(loss).size() == 1,
                 "grad() needs a scalar loss, got shape " + shape_string(value(loss).shape()));

  grads_.assign(nodes_.size(), Array());
  has_grad_.assign(nodes_.size(), 0);

  if (nodes_[loss.id].requires_grad) {
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      if (!has_grad_[id]) continue;
      Node& node = nodes_[id];
      if (!node.backward) continue;
      const Array& g = grads_[id];
      if (!g.all_finite())
        throw NumericError("non-finite gradient reaching '" + node.op + "' (node " +
                           std::to_string(id) + ")");
      node.backward(*this, g, node.value);
    }
  }

  std::vector<Array> out;
  out.reserve(leaves.size());
  for (const Var& leaf : leaves) {
    RANLAB_REQUIRE(leaf.tape == this, "leaf is from another tape");
    if (has_grad_[leaf.id]) {
      if (!grads_[leaf.id].all_finite())
        throw NumericError("non-finite gradient for leaf '" + nodes_[leaf.id].op + "'");
      out.push_back(grads_[leaf.id]);
    } else {
      out.emplace_back(nodes_[leaf.id].value.shape(), 0.0);
    }
  }
  return out;
}

Array Tape::grad(Var loss, Var leaf) {
  const Var leaves[] = {leaf};
  return std::move(grad(loss, leaves)[0]);
}

}  // namespace ranlab
