#include "rpcss/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "rpcss/error.hpp"

namespace rpcss {

namespace {

struct SinkhornState {
  std::size_t n = 0, m = 0;
  double reg = 0.0;
  // potentials after each iteration: f[t], g[t] for t = 1..T (g[0] = 0)
  std::vector<std::vector<double>> f, g;
  Tensor plan;
  double cost = 0.0;
  bool converged = false;
  double marginal_error = 0.0;
};

SinkhornState run_sinkhorn(const Tensor& C, const SinkhornOptions& opt) {
  SinkhornState s;
  s.n = C.rows();
  s.m = C.cols();
  s.reg = opt.reg;
  const std::size_t n = s.n, m = s.m;
  const double lam = opt.reg;
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  s.g.emplace_back(m, 0.0);
  s.f.emplace_back(n, 0.0);
  std::vector<double> f(n), g(m, 0.0), buf(std::max(n, m));
  for (int it = 0; it < opt.max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, buf[j] = (g[j] - C[i * m + j]) / lam);
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) z += std::exp(buf[j] - mx);
      f[i] = lam * log_a - lam * (mx + std::log(z));
    }
    for (std::size_t j = 0; j < m; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, buf[i] = (f[i] - C[i * m + j]) / lam);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += std::exp(buf[i] - mx);
      g[j] = lam * log_b - lam * (mx + std::log(z));
    }
    s.f.push_back(f);
    s.g.push_back(g);
    // column sums are exact after the g update; measure the row marginals
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double r = 0.0;
      for (std::size_t j = 0; j < m; ++j) r += std::exp((f[i] + g[j] - C[i * m + j]) / lam);
      err = std::max(err, std::abs(r - std::exp(log_a)));
    }
    s.marginal_error = err;
    if (err < opt.tol) {
      s.converged = true;
      break;
    }
  }
  s.plan = Tensor(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double p = std::exp((f[i] + g[j] - C[i * m + j]) / lam);
      s.plan[i * m + j] = p;
      s.cost += p * C[i * m + j];
    }
  return s;
}

// Adjoint of the transport cost w.r.t. the cost matrix through the unrolled
// iterations.
Tensor sinkhorn_backward(const Tensor& C, const SinkhornState& s, double upstream) {
  const std::size_t n = s.n, m = s.m;
  const double lam = s.reg;
  Tensor dC(Shape{n, m});
  std::vector<double> fbar(n, 0.0), gbar(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double p = s.plan[i * m + j], c = C[i * m + j];
      dC[i * m + j] += upstream * (p - c * p / lam);
      fbar[i] += upstream * c * p / lam;
      gbar[j] += upstream * c * p / lam;
    }
  std::vector<double> w(std::max(n, m));
  for (std::size_t t = s.f.size() - 1; t >= 1; --t) {
    const std::vector<double>& f = s.f[t];
    const std::vector<double>& g_prev = s.g[t - 1];
    // g^t_j = lam log b - lam LSE_i((f^t_i - C_ij)/lam)
    for (std::size_t j = 0; j < m; ++j) {
      if (gbar[j] == 0.0) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, w[i] = (f[i] - C[i * m + j]) / lam);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += (w[i] = std::exp(w[i] - mx));
      for (std::size_t i = 0; i < n; ++i) {
        const double sigma = w[i] / z;
        fbar[i] -= gbar[j] * sigma;
        dC[i * m + j] += gbar[j] * sigma;
      }
    }
    // f^t_i = lam log a - lam LSE_j((g^{t-1}_j - C_ij)/lam)
    std::fill(gbar.begin(), gbar.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (fbar[i] == 0.0) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, w[j] = (g_prev[j] - C[i * m + j]) / lam);
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) z += (w[j] = std::exp(w[j] - mx));
      for (std::size_t j = 0; j < m; ++j) {
        const double pi = w[j] / z;
        gbar[j] -= fbar[i] * pi;
        dC[i * m + j] += fbar[i] * pi;
      }
    }
    std::fill(fbar.begin(), fbar.end(), 0.0);
  }
  return dC;
}

void validate_options(const SinkhornOptions& o) {
  if (!(o.reg > 0.0)) throw ConfigError("sinkhorn: regularisation must be > 0");
  if (o.max_iters < 1) throw ConfigError("sinkhorn: max_iters must be >= 1");
  if (!(o.tol >= 0.0)) throw ConfigError("sinkhorn: tol must be >= 0");
}

SinkhornResult to_result(SinkhornState&& s) {
  SinkhornResult r;
  r.cost = s.cost;
  r.plan = std::move(s.plan);
  r.converged = s.converged;
  r.iterations = static_cast<int>(s.f.size()) - 1;
  r.marginal_error = s.marginal_error;
  return r;
}

}  // namespace

void OtProblem::validate() const {
  if (source.rank() != 2 || target.rank() != 2) throw ShapeError("ot: batches must be matrices");
  if (source.rows() == 0 || target.rows() == 0) throw ShapeError("ot: empty batch");
  if (source.cols() != target.cols()) throw ShapeError("ot: feature width mismatch");
  validate_options(options);
}

ad::Var sinkhorn_from_cost(ad::Var cost, const SinkhornOptions& options, SinkhornResult* info) {
  validate_options(options);
  if (cost.shape().size() != 2 || cost.rows() == 0 || cost.cols() == 0) {
    throw ShapeError("sinkhorn: cost must be a non-empty matrix");
  }
  if (cost.rows() > kMaxOtBatch || cost.cols() > kMaxOtBatch) {
    throw ShapeError("sinkhorn: batches are limited to " + std::to_string(kMaxOtBatch) + " features per side");
  }
  auto state = std::make_shared<SinkhornState>(run_sinkhorn(cost.value(), options));
  const double value = state->cost;
  if (info) {
    SinkhornState copy = *state;
    *info = to_result(std::move(copy));
  }
  const ad::Var inputs[] = {cost};
  return cost.tape().record("sinkhorn", Tensor::scalar(value), inputs, [cost, state](ad::Tape& t, const Tensor& g) {
    Tensor* gc = t.grad_sink(cost);
    const Tensor d = sinkhorn_backward(cost.value(), *state, g[0]);
    for (std::size_t k = 0; k < d.size(); ++k) (*gc)[k] += d[k];
  });
}

ad::Var sinkhorn_cost(ad::Var source, ad::Var target, const SinkhornOptions& options, SinkhornResult* info) {
  return sinkhorn_from_cost(ad::sq_dist(source, target), options, info);
}

SinkhornResult sinkhorn_distance(const OtProblem& problem) {
  problem.validate();
  ad::Tape tape;
  SinkhornResult r;
  sinkhorn_cost(tape.constant(problem.source), tape.constant(problem.target), problem.options, &r);
  return r;
}

double exact_ot_oracle(const OtProblem& problem) {
  if (problem.source.rank() != 2 || problem.target.rank() != 2 || problem.source.cols() != problem.target.cols()) {
    throw ShapeError("ot oracle: batches must be matrices of equal width");
  }
  const std::size_t n = problem.source.rows();
  if (n != problem.target.rows()) throw ShapeError("ot oracle: batches must have equal size");
  if (n == 0 || n > 8) throw ShapeError("ot oracle: supports 1..8 points per side");
  const std::size_t d = problem.source.cols();
  std::vector<double> C(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = problem.source.at(i, k) - problem.target.at(j, k);
        s += diff * diff;
      }
      C[i * n + j] = s;
    }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += C[i * n + perm[i]];
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);
}

}  // namespace rpcss
