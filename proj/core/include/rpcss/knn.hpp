#pragma once

#include <cstddef>
#include <vector>

#include "rpcss/tensor.hpp"

namespace rpcss {

/// Exact brute-force k nearest neighbours of every row of `points` [n,d],
/// excluding the row itself. Returns n*k indices, row-major, nearest first;
/// equal distances are ordered by lower index. Requires k < n.
std::vector<std::size_t> knn_indices(const Tensor& points, std::size_t k);

/// Nearest row of `reference` for every row of `query`, ties to lower index.
std::vector<std::size_t> nearest_indices(const Tensor& query, const Tensor& reference);

}  // namespace rpcss
