#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rpcss/autodiff.hpp"
#include "rpcss/tensor.hpp"

namespace rpcss {

using Rng = std::mt19937_64;

/// Ordered, named parameter tensors. Non-trainable entries (e.g. input
/// normalization statistics) are bound as constants and skipped by optimizers.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value, bool trainable = true);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  bool trainable(std::size_t i) const { return trainable_[i]; }
  Tensor& at(std::size_t i) { return values_[i]; }
  const Tensor& at(std::size_t i) const { return values_[i]; }
  std::optional<std::size_t> find(const std::string& name) const;

  /// One tape leaf per entry.
  std::vector<ad::Var> bind(ad::Tape& tape, bool requires_grad = true) const;
  /// Gradients of bound leaves after backward; zeros for non-trainable entries.
  std::vector<Tensor> grads(const ad::Tape& tape, const std::vector<ad::Var>& bound) const;

  bool same_layout(const ParamStore& other) const;
  bool operator==(const ParamStore&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<bool> trainable_;
};

enum class Init { he, xavier, zero };

/// Affine layer y = x W + b with W stored [in, out].
struct Dense {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;
  bool has_bias = true;

  static Dense create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      Init init = Init::he, bool with_bias = true);
  ad::Var operator()(const std::vector<ad::Var>& bound, ad::Var x) const;
};

class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(ParamStore& params, const std::vector<Tensor>& grads) const;
  double lr() const noexcept { return lr_; }

 private:
  double lr_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParamStore& params, const std::vector<Tensor>& grads);
  double lr() const noexcept { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Standard-normal tensor of the given shape.
Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);

}  // namespace rpcss
