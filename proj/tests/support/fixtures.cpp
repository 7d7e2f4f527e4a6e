#include "fixtures.hpp"

#include <cmath>
#include <random>

namespace rpcss::testkit {

Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

Tensor random_probs(std::size_t n, std::size_t c, Rng& rng) {
  Tensor t = uniform(Shape{n, c}, rng, -2.0, 2.0);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (t.at(i, j) = std::exp(t.at(i, j)));
    for (std::size_t j = 0; j < c; ++j) t.at(i, j) /= z;
  }
  return t;
}

std::vector<int> random_labels(std::size_t n, int num_classes, Rng& rng) {
  std::uniform_int_distribution<int> u(0, num_classes - 1);
  std::vector<int> out(n);
  for (int& y : out) y = u(rng);
  return out;
}

}  // namespace rpcss::testkit
