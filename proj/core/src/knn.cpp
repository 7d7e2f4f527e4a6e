#include "rpcss/knn.hpp"

#include <algorithm>
#include <limits>
#include <utility>

#include "rpcss/error.hpp"

namespace rpcss {

namespace {

double row_sq_dist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.cols();
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = a[i * d + c] - b[j * d + c];
    s += diff * diff;
  }
  return s;
}

}  // namespace

std::vector<std::size_t> knn_indices(const Tensor& points, std::size_t k) {
  const std::size_t n = points.rows();
  if (k == 0 || k >= n) {
    throw ShapeError("knn: k=" + std::to_string(k) + " requires at least k+1 points, got " + std::to_string(n));
  }
  std::vector<std::size_t> out(n * k);
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) cand.emplace_back(row_sq_dist(points, i, points, j), j);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t r = 0; r < k; ++r) out[i * k + r] = cand[r].second;
  }
  return out;
}

std::vector<std::size_t> nearest_indices(const Tensor& query, const Tensor& reference) {
  if (reference.rows() == 0) throw ShapeError("nearest: empty reference set");
  if (query.cols() != reference.cols()) throw ShapeError("nearest: width mismatch");
  std::vector<std::size_t> out(query.rows());
  for (std::size_t i = 0; i < query.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < reference.rows(); ++j) {
      const double d = row_sq_dist(query, i, reference, j);
      if (d < best) {
        best = d;
        out[i] = j;
      }
    }
  }
  return out;
}

}  // namespace rpcss
