#include "rpcss/nn.hpp"

#include <cmath>

#include "rpcss/error.hpp"

namespace rpcss {

std::size_t ParamStore::add(std::string name, Tensor value, bool trainable) {
  if (find(name)) throw std::invalid_argument("param store: duplicate name " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  trainable_.push_back(trainable);
  return values_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return std::nullopt;
}

std::vector<ad::Var> ParamStore::bind(ad::Tape& tape, bool requires_grad) const {
  std::vector<ad::Var> out;
  out.reserve(values_.size());
  for (std::size_t i = 0; i < values_.size(); ++i) {
    out.push_back(tape.leaf(values_[i], requires_grad && trainable_[i]));
  }
  return out;
}

std::vector<Tensor> ParamStore::grads(const ad::Tape& tape, const std::vector<ad::Var>& bound) const {
  std::vector<Tensor> out;
  out.reserve(bound.size());
  for (const ad::Var& v : bound) out.push_back(tape.grad(v));
  return out;
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (values_[i].shape() != other.values_[i].shape()) return false;
  return true;
}

Dense Dense::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                    Init init, bool with_bias) {
  Dense d;
  d.in = in;
  d.out = out;
  d.has_bias = with_bias;
  Tensor w(Shape{in, out});
  if (init != Init::zero) {
    const double stddev = init == Init::he ? std::sqrt(2.0 / static_cast<double>(in))
                                           : std::sqrt(2.0 / static_cast<double>(in + out));
    w = randn(Shape{in, out}, rng, stddev);
  }
  d.weight = store.add(name + ".weight", std::move(w));
  if (with_bias) d.bias = store.add(name + ".bias", Tensor(Shape{1, out}));
  return d;
}

ad::Var Dense::operator()(const std::vector<ad::Var>& bound, ad::Var x) const {
  if (x.cols() != in) {
    throw ShapeError("dense: input width " + std::to_string(x.cols()) + " != " + std::to_string(in));
  }
  ad::Var y = ad::matmul(x, bound[weight]);
  return has_bias ? y + bound[bias] : y;
}

void Sgd::step(ParamStore& params, const std::vector<Tensor>& grads) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.trainable(i)) continue;
    Tensor& p = params.at(i);
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr_ * g[k];
  }
}

void Adam::step(ParamStore& params, const std::vector<Tensor>& grads) {
  if (m_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.push_back(Tensor::zeros_like(params.at(i)));
      v_.push_back(Tensor::zeros_like(params.at(i)));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.trainable(i)) continue;
    Tensor& p = params.at(i);
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
      p[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
    }
  }
}

Tensor randn(const Shape& shape, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace rpcss
