#pragma once

// Tape-based reverse-mode differentiation over rpcss::Tensor.
//
// A Tape owns every intermediate value of one forward pass. Vars are cheap
// handles into it. Every primitive checks its output for NaN/Inf and throws
// NumericError naming the primitive; shape violations throw ShapeError.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rpcss/tensor.hpp"

namespace rpcss::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Propagates the output gradient of one recorded primitive into its inputs.
using Backprop = std::function<void(Tape&, const Tensor& grad_out)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  /// Records a primitive. The output requires grad iff any input does; when
  /// none do, the backprop closure is dropped.
  Var record(const char* op, Tensor value, std::span<const Var> inputs, Backprop backprop);

  /// Populates gradients for every requires-grad node reachable from `loss`.
  /// Throws on a non-scalar loss or on a second call without reset().
  void backward(Var loss);

  /// Gradient of `v`; all zeros when `v` was unreachable from the loss.
  Tensor grad(Var v) const;

  /// Clears gradients so backward() may run again on the same graph.
  void reset();

  /// Gradient buffer of a node, or nullptr when it does not require grad.
  /// Only meaningful inside a Backprop closure.
  Tensor* grad_sink(Var v);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backprop backprop;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- elementwise (numpy broadcasting) ---------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var x);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var x) { return neg(x); }
inline Var operator*(double c, Var x) { return scale(x, c); }
inline Var operator*(Var x, double c) { return scale(x, c); }
inline Var operator+(Var x, double c) { return add_scalar(x, c); }

Var relu(Var x);
Var tanh(Var x);
Var exp(Var x);
Var log(Var x);
Var sqrt(Var x);
Var square(Var x);

// ---- matrix ----------------------------------------------------------------
Var matmul(Var a, Var b);
Var transpose(Var x);
Var reshape(Var x, Shape shape);

// ---- reductions --------------------------------------------------------------
Var sum(Var x);
Var mean(Var x);
/// Rank-2 reduction keeping dims: axis 0 -> [1,m], axis 1 -> [n,1].
Var sum_axis(Var x, int axis);
Var mean_axis(Var x, int axis);
/// Frobenius norm; the gradient at the origin is taken as zero.
Var norm(Var x);

// ---- row-wise distributions ---------------------------------------------------
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
/// [n,m] -> [n,1]
Var logsumexp_rows(Var x);
/// Mean softmax cross-entropy of logits [n,C]; negative labels are ignored.
Var cross_entropy(Var logits, std::span<const int> labels);

// ---- indexing ----------------------------------------------------------------
Var gather_rows(Var x, std::span<const std::size_t> index);
/// out[i] = x[i, cols[i]] as [n,1].
Var take_along_rows(Var x, std::span<const int> cols);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_cols(Var a, Var b);
Var concat_rows(std::span<const Var> parts);
/// Mean of consecutive row groups: [n*g, d] -> [n, d].
Var group_mean(Var x, std::size_t group);

// ---- geometry ----------------------------------------------------------------
/// Pairwise squared Euclidean distances: [n,d] x [m,d] -> [n,m].
Var sq_dist(Var a, Var b);

/// Value copy of `x` on the same tape that blocks gradients.
Var detach(Var x);

}  // namespace rpcss::ad
