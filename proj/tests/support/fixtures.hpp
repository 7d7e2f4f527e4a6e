#pragma once

#include <cstdint>
#include <vector>

#include "rpcss/nn.hpp"
#include "rpcss/tensor.hpp"

namespace rpcss::testkit {

/// Uniform entries in [lo, hi).
Tensor uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);

/// Rows of a random probability matrix [n,c].
Tensor random_probs(std::size_t n, std::size_t c, Rng& rng);

std::vector<int> random_labels(std::size_t n, int num_classes, Rng& rng);

}  // namespace rpcss::testkit
