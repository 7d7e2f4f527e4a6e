#pragma once

// Entropic optimal transport between two uniformly weighted feature batches
// under squared Euclidean ground cost.

#include <cstddef>

#include "rpcss/autodiff.hpp"
#include "rpcss/tensor.hpp"

namespace rpcss {

/// Largest batch accepted per side by the Sinkhorn solver.
inline constexpr std::size_t kMaxOtBatch = 256;

struct SinkhornOptions {
  double reg = 0.05;     // entropic regularisation lambda_s
  int max_iters = 200;
  double tol = 1e-6;     // max abs deviation of row sums from 1/n
};

struct OtProblem {
  Tensor source;  // [n,d]
  Tensor target;  // [m,d]
  SinkhornOptions options;

  void validate() const;
};

struct SinkhornResult {
  /// <plan, cost matrix>, without the entropy term.
  double cost = 0.0;
  Tensor plan;
  bool converged = false;
  int iterations = 0;
  double marginal_error = 0.0;
};

/// Log-domain Sinkhorn. Non-convergence is reported through `converged`, not
/// thrown; the last iterate is returned.
SinkhornResult sinkhorn_distance(const OtProblem& problem);

/// Differentiable transport cost; the backward pass unrolls every executed
/// iteration. `info`, when given, receives the forward result.
ad::Var sinkhorn_cost(ad::Var source, ad::Var target, const SinkhornOptions& options,
                      SinkhornResult* info = nullptr);

/// Same, on a precomputed [n,m] cost matrix.
ad::Var sinkhorn_from_cost(ad::Var cost, const SinkhornOptions& options, SinkhornResult* info = nullptr);

/// Exact optimal assignment cost divided by n, by enumerating permutations.
/// Requires n == m <= 8.
double exact_ot_oracle(const OtProblem& problem);

}  // namespace rpcss
