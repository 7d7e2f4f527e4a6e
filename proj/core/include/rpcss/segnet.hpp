#pragma once

// Per-point segmentation network: an MLP feature extractor over neighbourhood
// descriptors followed by a linear classifier.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rpcss/autodiff.hpp"
#include "rpcss/nn.hpp"
#include "rpcss/scene.hpp"

namespace rpcss {

struct SegModelConfig {
  int num_classes = 4;
  std::size_t dim = 32;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t neighbors = 8;
  bool bias = true;
};

/// Width of the per-point descriptor: xyz, centroid offset (3), and the log
/// horizontal and vertical neighbourhood spread.
inline constexpr std::size_t kDescriptorWidth = 8;

class SegModel {
 public:
  SegModel(SegModelConfig cfg, std::uint64_t seed);

  const SegModelConfig& config() const noexcept { return cfg_; }
  std::size_t dim() const noexcept { return cfg_.dim; }
  int num_classes() const noexcept { return cfg_.num_classes; }

  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  /// Raw descriptors [N,8] of `points` [N,3]; neighbour sets are chosen on
  /// the current coordinate values and are not differentiated.
  ad::Var descriptors(ad::Var points) const;
  /// Features [N,dim] from raw descriptors.
  ad::Var features_from_descriptors(const std::vector<ad::Var>& bound, ad::Var desc) const;
  ad::Var features(const std::vector<ad::Var>& bound, ad::Var points) const;
  /// Logits [N,C] from features [N,dim].
  ad::Var logits(const std::vector<ad::Var>& bound, ad::Var feats) const;

  /// Sets the frozen descriptor standardisation from a set of scenes.
  void fit_input_normalization(std::span<const PointCloud> scenes);

  bool operator==(const SegModel& other) const { return params_ == other.params_; }

 private:
  SegModelConfig cfg_;
  ParamStore params_;
  std::size_t desc_mean_ = 0, desc_std_ = 0;
  std::vector<Dense> trunk_;
  Dense head_;
  Dense classifier_;
};

Tensor compute_descriptors(const SegModel& model, const Tensor& points);
Tensor extract_features(const SegModel& model, const PointCloud& pc);
/// Logits [N,C].
Tensor classify(const SegModel& model, const Tensor& feats);
Tensor softmax(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& scores);
std::vector<int> predict(const SegModel& model, const PointCloud& pc);

struct TrainConfig {
  double learning_rate = 0.1;
  int epochs = 30;
  std::size_t batch_scenes = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  std::vector<double> epoch_loss;
};

/// Plain-SGD cross-entropy training on labelled source scenes, in place.
TrainResult train_source(SegModel& model, std::span<const PointCloud> scenes, const TrainConfig& cfg);

}  // namespace rpcss
