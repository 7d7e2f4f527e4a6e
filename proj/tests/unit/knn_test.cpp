#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "fixtures.hpp"
#include "rpcss/knn.hpp"

using rpcss::Rng;
using rpcss::Shape;
using rpcss::Tensor;

namespace {

// O(n^2 log n) reference: sort every row's candidates by (distance, index).
std::vector<std::size_t> reference_knn(const Tensor& x, std::size_t k) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += (x.at(i, c) - x.at(j, c)) * (x.at(i, c) - x.at(j, c));
      cand.emplace_back(s, j);
    }
    std::sort(cand.begin(), cand.end());
    for (std::size_t r = 0; r < k; ++r) out.push_back(cand[r].second);
  }
  return out;
}

}  // namespace

TEST(Knn, MatchesSortedReference) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = rpcss::testkit::uniform(Shape{40, 3}, rng);
    EXPECT_EQ(rpcss::knn_indices(x, 6), reference_knn(x, 6));
  }
}

TEST(Knn, TiesResolveToLowerIndex) {
  // 0 sits at the origin; 1..4 are all at distance 1.
  const Tensor x = Tensor::matrix({{0, 0}, {1, 0}, {0, 1}, {-1, 0}, {0, -1}});
  const auto idx = rpcss::knn_indices(x, 3);
  EXPECT_EQ(idx[0], 1u);
  EXPECT_EQ(idx[1], 2u);
  EXPECT_EQ(idx[2], 3u);
}

TEST(Knn, RejectsBadK) {
  const Tensor x = Tensor::matrix({{0, 0}, {1, 0}});
  EXPECT_THROW(rpcss::knn_indices(x, 0), std::invalid_argument);
  EXPECT_THROW(rpcss::knn_indices(x, 2), std::invalid_argument);
}

TEST(Knn, NearestIndices) {
  const Tensor ref = Tensor::matrix({{0, 0}, {10, 0}, {0, 10}});
  const Tensor q = Tensor::matrix({{9, 1}, {1, 1}, {5, 5}});
  const auto idx = rpcss::nearest_indices(q, ref);
  EXPECT_EQ(idx, (std::vector<std::size_t>{1, 0, 0}));
}
