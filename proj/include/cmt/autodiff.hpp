#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "cmt/mac_counter.hpp"
#include "cmt/rng.hpp"
#include "cmt/tensor.hpp"

namespace cmt {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  // By value: a later record() may reallocate the tape.
  Shape shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// View handed to a node's backward rule.
class BackwardContext {
 public:
  const Tensor& input(std::size_t i) const;
  const Tensor& output() const;
  bool needs_grad(std::size_t i) const;
  // Zero-initialised (on first use) gradient buffer of input i, to accumulate into.
  Tensor& grad(std::size_t i);
  void accumulate(std::size_t i, const Tensor& g);
  MacCounter& macs();

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, BackwardContext& ctx)>;

// Append-only record of operations for reverse-mode differentiation.
// Single writer; inputs of a node always precede it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose gradient is tracked.
  Var variable(Tensor value);
  // Leaf without gradient.
  Var constant(Tensor value);

  // Records an operation result. The value must be finite. `backward` is
  // dropped when no input requires a gradient.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::string_view op(Var v) const { return nodes_[v.id()].op; }
  std::size_t size() const { return nodes_.size(); }
  // Handle of the node recorded at position `id`.
  Var at(std::size_t id) { return Var(this, id); }

  // Reverse sweep from a single-element root. Seeds d(root)/d(root) = 1.
  void backward(Var root);

  // Gradient of the last backward root w.r.t. v; zeros when v was not reached.
  Tensor grad(Var v) const;

  MacCounter& macs() { return macs_; }

 private:
  friend class BackwardContext;

  struct Node {
    std::string_view op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  MacCounter macs_;
};

enum class PoolMode { max, average };

// ---- elementwise -----------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sigmoid(Var x);
Var relu(Var x);

// x + b broadcast along `axis` (b has shape [x.dim(axis)]).
Var add_bias(Var x, Var b, std::size_t axis);
// x * s broadcast along `axis` (s has shape [x.dim(axis)]).
Var scale_axis(Var x, Var s, std::size_t axis);

// ---- reductions ------------------------------------------------------------
Var sum(Var x);
Var mean(Var x);
// Element `index` (flat) of x as a one-element tensor.
Var pick(Var x, std::size_t index);
// [c, ...] -> [c]: mean over every axis but the first.
Var global_avg_pool(Var x);

// ---- linear algebra ----------------------------------------------------------
// [..., m, k] x [..., k, n] -> [..., m, n]; leading dims must agree.
// Counts batch*m*n*k MACs under "matmul".
Var matmul(Var a, Var b);

// Softmax along `axis`, max-subtracted.
Var softmax(Var x, std::size_t axis);

// ---- spatial -----------------------------------------------------------------
// x [c_in,h,w], kernel [c_out,c_in,k,k]. Counts c_out*c_in*k*k*h'*w' MACs under "conv2d".
Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t padding);
// x [c,h,w]; window `size`, step `stride`, no padding. Max ties go to the lowest flat index.
Var pool2d(Var x, std::size_t size, std::size_t stride, PoolMode mode);
// Replicates each cell of the last two axes factor x factor times.
Var nearest_upsample(Var x, std::size_t factor);

// ---- shape -----------------------------------------------------------------
Var reshape(Var x, Shape shape);
// Output axis i is input axis perm[i].
Var permute(Var x, std::vector<std::size_t> perm);
// n tensors of identical shape -> [n, shape...].
Var stack(std::span<const Var> xs);

// ---- normalisation / regularisation -----------------------------------------
inline constexpr double kLayerNormEps = 1e-5;
// Normalises over axis 0 (channels) at every remaining position; gamma, beta are [c].
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
// Inverted dropout: kept units are scaled by 1/(1-p) during training; identity otherwise.
Var dropout(Var x, double p, Rng& rng, bool training);

// Plain-tensor helpers used outside the tape.
Tensor permute_tensor(const Tensor& x, std::span<const std::size_t> perm);
std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);

}  // namespace cmt
