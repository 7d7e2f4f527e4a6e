#include "rpcss/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rpcss/error.hpp"

namespace rpcss::ad {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf: non-finite input value");
  nodes_.push_back(Node{"leaf", std::move(value), {}, false, requires_grad, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs, Backprop backprop) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite result");
  }
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw std::logic_error(std::string(op) + ": input from another tape");
    needs = needs || nodes_[in.id_].requires_grad;
  }
  nodes_.push_back(Node{op, std::move(value), {}, false, needs, needs ? std::move(backprop) : Backprop{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw std::logic_error("backward: loss belongs to another tape");
  if (backward_done_) throw std::logic_error("backward: already called; reset() the tape first");
  const Node& root = nodes_[loss.id_];
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(root.value.shape()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  Tensor* g = grad_sink(loss);
  (*g)[0] = 1.0;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.has_grad || !node.backprop) continue;
    node.backprop(*this, node.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id_];
  return node.has_grad ? node.grad : Tensor::zeros_like(node.value);
}

void Tape::reset() {
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  backward_done_ = false;
}

Tensor* Tape::grad_sink(Var v) {
  Node& node = nodes_[v.id_];
  if (!node.requires_grad) return nullptr;
  if (!node.has_grad) {
    node.grad = Tensor::zeros_like(node.value);
    node.has_grad = true;
  }
  return &node.grad;
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank2(const char* op, const Var& x) {
  if (x.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
  }
}

struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] == pb[d] || pb[d] == 1) {
      bc.out[d] = pa[d];
    } else if (pa[d] == 1) {
      bc.out[d] = pb[d];
    } else {
      shape_fail(op, a, b);
    }
  }
  std::vector<std::size_t> sa(rank), sb(rank);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t d = rank; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : stride_a;
    sb[d] = pb[d] == 1 ? 0 : stride_b;
    stride_a *= pa[d];
    stride_b *= pb[d];
  }
  const std::size_t n = shape_numel(bc.out);
  bc.ia.resize(n);
  bc.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      oa += idx[d] * sa[d];
      ob += idx[d] * sb[d];
    }
    bc.ia[k] = oa;
    bc.ib[k] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < bc.out[d]) break;
      idx[d] = 0;
    }
  }
  return bc;
}

// Binary elementwise op. `f` computes the value, `da`/`db` the partials given
// (a, b, out).
template <class F, class DA, class DB>
Var binary(const char* op, Var a, Var b, F f, DA da, DB db) {
  Broadcast bc = broadcast(op, a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(bc.out);
  const std::size_t n = out.size();
  if (bc.same) {
    for (std::size_t k = 0; k < n; ++k) out[k] = f(av[k], bv[k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) out[k] = f(av[bc.ia[k]], bv[bc.ib[k]]);
  }
  const Var inputs[] = {a, b};
  Tape& tape = a.tape();
  const std::size_t out_id = tape.size();
  return tape.record(op, std::move(out), inputs,
                     [a, b, bc = std::move(bc), da, db, out_id](Tape& t, const Tensor& g) {
                       const Tensor& av = a.value();
                       const Tensor& bv = b.value();
                       const Tensor& ov = t.value(out_id);
                       Tensor* ga = t.grad_sink(a);
                       Tensor* gb = t.grad_sink(b);
                       for (std::size_t k = 0; k < g.size(); ++k) {
                         const std::size_t i = bc.same ? k : bc.ia[k];
                         const std::size_t j = bc.same ? k : bc.ib[k];
                         if (ga) (*ga)[i] += g[k] * da(av[i], bv[j], ov[k]);
                         if (gb) (*gb)[j] += g[k] * db(av[i], bv[j], ov[k]);
                       }
                     });
}

// Unary elementwise op; `d` computes the derivative given (x, out).
template <class F, class D>
Var unary(const char* op, Var x, F f, D d) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = f(xv[k]);
  const Var inputs[] = {x};
  Tape& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record(op, std::move(out), inputs, [x, d, out_id](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    const Tensor& xv = x.value();
    const Tensor& ov = t.value(out_id);
    for (std::size_t k = 0; k < g.size(); ++k) (*gx)[k] += g[k] * d(xv[k], ov[k]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Var neg(Var x) {
  return unary("neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Var scale(Var x, double c) {
  return unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var add_scalar(Var x, double c) {
  return unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var relu(Var x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double o) { return 1.0 - o * o; });
}

Var exp(Var x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}

Var log(Var x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sqrt(Var x) {
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double o) { return 0.5 / o; });
}

Var square(Var x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var matmul(Var a, Var b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) shape_fail("matmul", a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  const Var inputs[] = {a, b};
  return a.tape().record("matmul", std::move(out), inputs, [a, b, n, k, m](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (Tensor* ga = t.grad_sink(a)) {
      // dA = G B^T
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * bv[p * m + j];
          (*ga)[i * k + p] += s;
        }
      }
    }
    if (Tensor* gb = t.grad_sink(b)) {
      // dB = A^T G
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          double* grow = &(*gb)[p * m];
          for (std::size_t j = 0; j < m; ++j) grow[j] += aip * g[i * m + j];
        }
      }
    }
  });
}

Var transpose(Var x) {
  require_rank2("transpose", x);
  const std::size_t n = x.rows(), m = x.cols();
  const Tensor& xv = x.value();
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = xv[i * m + j];
  const Var inputs[] = {x};
  return x.tape().record("transpose", std::move(out), inputs, [x, n, m](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += g[j * n + i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const Var inputs[] = {x};
  return x.tape().record("reshape", std::move(out), inputs, [x](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    for (std::size_t k = 0; k < g.size(); ++k) (*gx)[k] += g[k];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const Var inputs[] = {x};
  return x.tape().record("sum", Tensor::scalar(s), inputs, [x](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    for (double& v : gx->data()) v += g[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var sum_axis(Var x, int axis) {
  require_rank2("sum_axis", x);
  if (axis != 0 && axis != 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  const std::size_t n = x.rows(), m = x.cols();
  const Tensor& xv = x.value();
  Tensor out(axis == 0 ? Shape{1, m} : Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[axis == 0 ? j : i] += xv[i * m + j];
  const Var inputs[] = {x};
  return x.tape().record("sum_axis", std::move(out), inputs, [x, axis, n, m](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += g[axis == 0 ? j : i];
  });
}

Var mean_axis(Var x, int axis) {
  require_rank2("mean_axis", x);
  const std::size_t count = axis == 0 ? x.rows() : x.cols();
  if (count == 0) throw ShapeError("mean_axis: empty axis");
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(count));
}

Var norm(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  const double r = std::sqrt(s);
  const Var inputs[] = {x};
  return x.tape().record("norm", Tensor::scalar(r), inputs, [x, r](Tape& t, const Tensor& g) {
    if (r == 0.0) return;
    Tensor* gx = t.grad_sink(x);
    const Tensor& xv = x.value();
    for (std::size_t k = 0; k < xv.size(); ++k) (*gx)[k] += g[0] * xv[k] / r;
  });
}

namespace {

Tensor row_softmax_value(const Tensor& x) {
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = &x[i * m];
    const double mx = *std::max_element(r, r + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  return out;
}

}  // namespace

Var softmax_rows(Var x) {
  require_rank2("softmax_rows", x);
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out = row_softmax_value(x.value());
  const Var inputs[] = {x};
  Tape& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record("softmax_rows", std::move(out), inputs, [x, n, m, out_id](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    const Tensor& p = t.value(out_id);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * p[i * m + j];
      for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += p[i * m + j] * (g[i * m + j] - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  require_rank2("log_softmax_rows", x);
  const std::size_t n = x.rows(), m = x.cols();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = &xv[i * m];
    const double mx = *std::max_element(r, r + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(r[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = r[j] - lse;
  }
  const Var inputs[] = {x};
  Tape& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record("log_softmax_rows", std::move(out), inputs, [x, n, m, out_id](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    const Tensor& lp = t.value(out_id);
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < m; ++j) gs += g[i * m + j];
      for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += g[i * m + j] - std::exp(lp[i * m + j]) * gs;
    }
  });
}

Var logsumexp_rows(Var x) {
  require_rank2("logsumexp_rows", x);
  const std::size_t n = x.rows(), m = x.cols();
  const Tensor& xv = x.value();
  Tensor out(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = &xv[i * m];
    const double mx = *std::max_element(r, r + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(r[j] - mx);
    out[i] = mx + std::log(z);
  }
  const Var inputs[] = {x};
  Tape& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record("logsumexp_rows", std::move(out), inputs, [x, n, m, out_id](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    const Tensor& xv = x.value();
    const Tensor& lse = t.value(out_id);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += g[i] * std::exp(xv[i * m + j] - lse[i]);
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  require_rank2("cross_entropy", logits);
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     shape_str(logits.shape()) + " logits");
  }
  const Tensor& x = logits.value();
  Tensor probs = row_softmax_value(x);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0) continue;
    if (static_cast<std::size_t>(y) >= c) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside " + std::to_string(c) + " classes");
    }
    const double* r = &x[i * c];
    const double mx = *std::max_element(r, r + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(r[j] - mx);
    total += mx + std::log(z) - r[y];
    ++count;
  }
  if (count == 0) throw ShapeError("cross_entropy: no labelled rows");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<int> ys(labels.begin(), labels.end());
  const Var inputs[] = {logits};
  return logits.tape().record(
      "cross_entropy", Tensor::scalar(total * inv), inputs,
      [logits, ys = std::move(ys), probs = std::move(probs), inv, n, c](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(logits);
        for (std::size_t i = 0; i < n; ++i) {
          if (ys[i] < 0) continue;
          for (std::size_t j = 0; j < c; ++j) {
            const double onehot = static_cast<int>(j) == ys[i] ? 1.0 : 0.0;
            (*gx)[i * c + j] += g[0] * inv * (probs[i * c + j] - onehot);
          }
        }
      });
}

Var gather_rows(Var x, std::span<const std::size_t> index) {
  require_rank2("gather_rows", x);
  const std::size_t m = x.cols(), n = x.rows();
  const Tensor& xv = x.value();
  Tensor out(Shape{index.size(), m});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) throw ShapeError("gather_rows: index " + std::to_string(index[r]) + " out of range");
    std::copy_n(&xv[index[r] * m], m, &out[r * m]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const Var inputs[] = {x};
  return x.tape().record("gather_rows", std::move(out), inputs, [x, idx = std::move(idx), m](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) (*gx)[idx[r] * m + j] += g[r * m + j];
  });
}

Var take_along_rows(Var x, std::span<const int> cols) {
  require_rank2("take_along_rows", x);
  const std::size_t n = x.rows(), m = x.cols();
  if (cols.size() != n) throw ShapeError("take_along_rows: one column index per row required");
  const Tensor& xv = x.value();
  Tensor out(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= m) {
      throw ShapeError("take_along_rows: column " + std::to_string(cols[i]) + " out of range");
    }
    out[i] = xv[i * m + cols[i]];
  }
  std::vector<int> cs(cols.begin(), cols.end());
  const Var inputs[] = {x};
  return x.tape().record("take_along_rows", std::move(out), inputs, [x, cs = std::move(cs), m](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < cs.size(); ++i) (*gx)[i * m + cs[i]] += g[i];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  require_rank2("slice_cols", x);
  const std::size_t n = x.rows(), m = x.cols();
  if (begin > end || end > m) throw ShapeError("slice_cols: bad range for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  const Tensor& xv = x.value();
  Tensor out(Shape{n, w});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(&xv[i * m + begin], w, &out[i * w]);
  const Var inputs[] = {x};
  return x.tape().record("slice_cols", std::move(out), inputs, [x, n, m, w, begin](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) (*gx)[i * m + begin + j] += g[i * w + j];
  });
}

Var concat_cols(Var a, Var b) {
  require_rank2("concat_cols", a);
  require_rank2("concat_cols", b);
  if (a.rows() != b.rows()) shape_fail("concat_cols", a.shape(), b.shape());
  const std::size_t n = a.rows(), ma = a.cols(), mb = b.cols(), m = ma + mb;
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(&a.value()[i * ma], ma, &out[i * m]);
    std::copy_n(&b.value()[i * mb], mb, &out[i * m + ma]);
  }
  const Var inputs[] = {a, b};
  return a.tape().record("concat_cols", std::move(out), inputs, [a, b, n, ma, mb, m](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ma; ++j) (*ga)[i * ma + j] += g[i * m + j];
    if (Tensor* gb = t.grad_sink(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < mb; ++j) (*gb)[i * mb + j] += g[i * m + ma + j];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  for (const Var& p : parts) require_rank2("concat_rows", p);
  const std::size_t m = parts[0].cols();
  std::size_t n = 0;
  for (const Var& p : parts) {
    if (p.cols() != m) shape_fail("concat_rows", parts[0].shape(), p.shape());
    n += p.rows();
  }
  Tensor out(Shape{n, m});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), &out[offset]);
    offset += p.value().size();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape().record("concat_rows", std::move(out), parts, [ins](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& p : ins) {
      const std::size_t sz = p.value().size();
      if (Tensor* gp = t.grad_sink(p))
        for (std::size_t k = 0; k < sz; ++k) (*gp)[k] += g[offset + k];
      offset += sz;
    }
  });
}

Var group_mean(Var x, std::size_t group) {
  require_rank2("group_mean", x);
  if (group == 0 || x.rows() % group != 0) {
    throw ShapeError("group_mean: " + std::to_string(x.rows()) + " rows not divisible by " + std::to_string(group));
  }
  const std::size_t n = x.rows() / group, m = x.cols();
  const double inv = 1.0 / static_cast<double>(group);
  const Tensor& xv = x.value();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < group; ++r)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += inv * xv[(i * group + r) * m + j];
  const Var inputs[] = {x};
  return x.tape().record("group_mean", std::move(out), inputs, [x, n, m, group, inv](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < group; ++r)
        for (std::size_t j = 0; j < m; ++j) (*gx)[(i * group + r) * m + j] += inv * g[i * m + j];
  });
}

Var sq_dist(Var a, Var b) {
  require_rank2("sq_dist", a);
  require_rank2("sq_dist", b);
  if (a.cols() != b.cols()) shape_fail("sq_dist", a.shape(), b.shape());
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = av[i * d + k] - bv[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  const Var inputs[] = {a, b};
  return a.tape().record("sq_dist", std::move(out), inputs, [a, b, n, m, d](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor* ga = t.grad_sink(a);
    Tensor* gb = t.grad_sink(b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double gij = 2.0 * g[i * m + j];
        if (gij == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = gij * (av[i * d + k] - bv[j * d + k]);
          if (ga) (*ga)[i * d + k] += diff;
          if (gb) (*gb)[j * d + k] -= diff;
        }
      }
  });
}

Var detach(Var x) { return x.tape().constant(x.value()); }

}  // namespace rpcss::ad
