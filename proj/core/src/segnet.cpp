#include "rpcss/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rpcss/error.hpp"
#include "rpcss/knn.hpp"

namespace rpcss {

namespace {

constexpr double kSpreadFloor = 1e-2;  // m^2, keeps log(spread) smooth

}  // namespace

SegModel::SegModel(SegModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (cfg_.dim == 0) throw ConfigError("model: dim must be > 0");
  Rng rng(derive_seed(seed, 0x5E6E7ULL));
  desc_mean_ = params_.add("input.mean", Tensor(Shape{1, kDescriptorWidth}, 0.0), false);
  desc_std_ = params_.add("input.std", Tensor(Shape{1, kDescriptorWidth}, 1.0), false);
  std::size_t width = kDescriptorWidth;
  for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
    trunk_.push_back(Dense::create(params_, "feat.l" + std::to_string(i), width, cfg_.hidden[i], rng, Init::he, cfg_.bias));
    width = cfg_.hidden[i];
  }
  head_ = Dense::create(params_, "feat.out", width, cfg_.dim, rng, Init::xavier, cfg_.bias);
  classifier_ = Dense::create(params_, "cls", cfg_.dim, static_cast<std::size_t>(cfg_.num_classes), rng,
                              Init::xavier, cfg_.bias);
}

ad::Var SegModel::descriptors(ad::Var points) const {
  const std::size_t n = points.rows();
  if (n == 0) throw ShapeError("descriptors: empty point cloud");
  if (points.cols() != 3) throw ShapeError("descriptors: points must be [N,3]");
  const std::size_t k = std::min(cfg_.neighbors, n - 1);
  ad::Tape& tape = points.tape();
  if (k == 0) {
    ad::Var zeros = tape.constant(Tensor(Shape{n, 3}));
    ad::Var spread = tape.constant(Tensor(Shape{n, 2}, std::log(kSpreadFloor)));
    return ad::concat_cols(ad::concat_cols(points, zeros), spread);
  }
  const std::vector<std::size_t> nbr = knn_indices(points.value(), k);
  std::vector<std::size_t> owner(n * k);
  for (std::size_t i = 0; i < n * k; ++i) owner[i] = i / k;

  ad::Var gathered = ad::gather_rows(points, nbr);
  ad::Var centroid = ad::group_mean(gathered, k);
  ad::Var offset = centroid - points;
  ad::Var dev = gathered - ad::gather_rows(centroid, owner);
  ad::Var sq = ad::square(dev);
  ad::Var horizontal = ad::log(ad::group_mean(ad::sum_axis(ad::slice_cols(sq, 0, 2), 1), k) + kSpreadFloor);
  ad::Var vertical = ad::log(ad::group_mean(ad::slice_cols(sq, 2, 3), k) + kSpreadFloor);
  return ad::concat_cols(ad::concat_cols(points, offset), ad::concat_cols(horizontal, vertical));
}

ad::Var SegModel::features_from_descriptors(const std::vector<ad::Var>& bound, ad::Var desc) const {
  if (desc.cols() != kDescriptorWidth) throw ShapeError("features: descriptor width mismatch");
  ad::Var h = (desc - bound[desc_mean_]) / bound[desc_std_];
  for (const Dense& layer : trunk_) h = ad::relu(layer(bound, h));
  return head_(bound, h);
}

ad::Var SegModel::features(const std::vector<ad::Var>& bound, ad::Var points) const {
  return features_from_descriptors(bound, descriptors(points));
}

ad::Var SegModel::logits(const std::vector<ad::Var>& bound, ad::Var feats) const {
  if (feats.cols() != cfg_.dim) {
    throw ShapeError("classify: feature width " + std::to_string(feats.cols()) + " != model dim " +
                     std::to_string(cfg_.dim));
  }
  return classifier_(bound, feats);
}

void SegModel::fit_input_normalization(std::span<const PointCloud> scenes) {
  std::vector<double> sum(kDescriptorWidth, 0.0), sq(kDescriptorWidth, 0.0);
  std::size_t count = 0;
  for (const PointCloud& pc : scenes) {
    const Tensor d = compute_descriptors(*this, pc.points);
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < kDescriptorWidth; ++j) {
        sum[j] += d.at(i, j);
        sq[j] += d.at(i, j) * d.at(i, j);
      }
    count += d.rows();
  }
  if (count == 0) throw ShapeError("fit_input_normalization: no points");
  Tensor& mean = params_.at(desc_mean_);
  Tensor& stddev = params_.at(desc_std_);
  for (std::size_t j = 0; j < kDescriptorWidth; ++j) {
    const double m = sum[j] / static_cast<double>(count);
    const double var = std::max(sq[j] / static_cast<double>(count) - m * m, 0.0);
    mean[j] = m;
    stddev[j] = std::max(std::sqrt(var), 1e-6);
  }
}

Tensor compute_descriptors(const SegModel& model, const Tensor& points) {
  ad::Tape tape;
  return model.descriptors(tape.constant(points)).value();
}

Tensor extract_features(const SegModel& model, const PointCloud& pc) {
  if (pc.size() == 0) throw ShapeError("extract_features: empty point cloud");
  ad::Tape tape;
  const auto bound = model.params().bind(tape, false);
  return model.features(bound, tape.constant(pc.points)).value();
}

Tensor classify(const SegModel& model, const Tensor& feats) {
  ad::Tape tape;
  const auto bound = model.params().bind(tape, false);
  return model.logits(bound, tape.constant(feats)).value();
}

Tensor softmax(const Tensor& logits) {
  ad::Tape tape;
  return ad::softmax_rows(tape.constant(logits)).value();
}

std::vector<int> argmax_rows(const Tensor& scores) {
  std::vector<int> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto r = scores.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

std::vector<int> predict(const SegModel& model, const PointCloud& pc) {
  return argmax_rows(classify(model, extract_features(model, pc)));
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_scenes == 0) throw ConfigError("train.batch_scenes must be >= 1");
}

TrainResult train_source(SegModel& model, std::span<const PointCloud> scenes, const TrainConfig& cfg) {
  cfg.validate();
  if (scenes.empty()) throw ShapeError("train_source: no scenes");
  for (const PointCloud& pc : scenes) {
    if (pc.num_classes != model.num_classes()) throw ShapeError("train_source: class count mismatch");
  }
  // Coordinates are fixed during training, so descriptors are computed once.
  std::vector<Tensor> desc;
  desc.reserve(scenes.size());
  for (const PointCloud& pc : scenes) desc.push_back(compute_descriptors(model, pc.points));

  Rng rng(derive_seed(cfg.seed, 0x7A1ULL));
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  const Sgd sgd(cfg.learning_rate);
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_scenes) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_scenes);
      ad::Tape tape;
      const auto bound = model.params().bind(tape);
      std::vector<ad::Var> losses;
      try {
        for (std::size_t b = start; b < end; ++b) {
          const std::size_t s = order[b];
          ad::Var feats = model.features_from_descriptors(bound, tape.constant(desc[s]));
          losses.push_back(ad::cross_entropy(model.logits(bound, feats), scenes[s].labels));
        }
        ad::Var loss = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) loss = loss + losses[i];
        loss = ad::scale(loss, 1.0 / static_cast<double>(losses.size()));
        tape.backward(loss);
        epoch_loss += loss.item();
      } catch (const NumericError& e) {
        throw NumericError("train_source: epoch " + std::to_string(epoch) + ": " + e.what());
      }
      sgd.step(model.params(), model.params().grads(tape, bound));
      ++batches;
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
  }
  return result;
}

}  // namespace rpcss
