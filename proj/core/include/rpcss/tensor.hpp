#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace rpcss {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  /// Leading dimension; 1 for scalars.
  std::size_t rows() const noexcept { return shape_.empty() ? 1 : shape_[0]; }
  /// Trailing dimension of a matrix; 1 for rank < 2.
  std::size_t cols() const noexcept { return shape_.size() < 2 ? 1 : shape_[1]; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  const double& operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const double& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  /// The single value of a one-element tensor.
  double item() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  void fill(double v);

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace rpcss
