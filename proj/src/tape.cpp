#include <algorithm>
#include <string>

#include "cmt/autodiff.hpp"
#include "cmt/errors.hpp"

namespace cmt {

const Tensor& Var::value() const { return tape_->value(*this); }

const Tensor& BackwardContext::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[i]].value;
}

const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }

bool BackwardContext::needs_grad(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[i]].requires_grad;
}

Tensor& BackwardContext::grad(std::size_t i) {
  const std::size_t id = tape_.nodes_[node_].inputs[i];
  Tensor& slot = tape_.grads_[id];
  if (slot.empty()) slot = Tensor(tape_.nodes_[id].value.shape(), 0.0);
  return slot;
}

void BackwardContext::accumulate(std::size_t i, const Tensor& g) {
  const std::size_t id = tape_.nodes_[node_].inputs[i];
  if (g.shape() != tape_.nodes_[id].value.shape()) {
    throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match value shape " +
                         shape_string(tape_.nodes_[id].value.shape()));
  }
  Tensor& slot = tape_.grads_[id];
  if (slot.empty()) {
    slot = g;
    return;
  }
  auto dst = slot.data();
  auto src = g.data();
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
}

MacCounter& BackwardContext::macs() { return tape_.macs_; }

Var Tape::variable(Tensor value) {
  require_finite(value, "variable");
  nodes_.push_back(Node{"leaf", std::move(value), {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  nodes_.push_back(Node{"const", std::move(value), {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("non-finite value produced by " + std::string(op));
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ContractError("input of " + std::string(op) + " belongs to another tape");
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw ContractError("backward root belongs to another tape");
  const Tensor& rv = nodes_[root.id()].value;
  if (rv.size() != 1) throw ContractError("backward requires a scalar root, got shape " + shape_string(rv.shape()));
  grads_.assign(nodes_.size(), Tensor());
  grads_[root.id()] = Tensor(rv.shape(), 1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (grads_[i].empty() || !node.backward) continue;
    BackwardContext ctx(*this, i);
    // Rules only touch slots of earlier nodes, so this one can be lent out.
    Tensor grad_out = std::move(grads_[i]);
    node.backward(grad_out, ctx);
    grads_[i] = std::move(grad_out);
  }
}

Tensor Tape::grad(Var v) const {
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
  return Tensor(nodes_[v.id()].value.shape(), 0.0);
}

}  // namespace cmt
