#pragma once

// Quality-guided contrastive memory bank: kNN quality scoring of latent
// features, per-class selection, momentum-updated class prototypes and the
// prototype contrastive loss.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rpcss/autodiff.hpp"
#include "rpcss/nn.hpp"
#include "rpcss/tensor.hpp"

namespace rpcss {

struct QualityConfig {
  std::size_t k_base = 16;
  double gamma = 1.0;             // cleanliness weight
  double select_fraction = 0.25;  // kept per class, by score

  void validate() const;
};

/// round(k_base * cbrt(n_c / n_total)), at least 1.
std::size_t class_k(std::size_t k_base, std::size_t n_c, std::size_t n_total);

struct QualityScores {
  std::vector<double> score;
  std::vector<double> density;  // mean 1/(d+1) over the k neighbours
  std::vector<double> penalty;  // mean cosine to differently labelled neighbours, over k
  bool k_clamped = false;       // some class k exceeded n-1
};

/// Scores with a class-aware neighbourhood size; labels must be >= 0.
QualityScores quality_score(const Tensor& feats, std::span<const int> labels, const QualityConfig& cfg);

/// Same scoring with one k for every feature.
QualityScores quality_score_fixed_k(const Tensor& feats, std::span<const int> labels, std::size_t k, double gamma);

/// Per class c in [0, num_classes), the indices of the top ceil(fraction *
/// count) scores; ties keep the lower index. Negative labels are skipped.
std::vector<std::vector<std::size_t>> select_high_quality(std::span<const int> labels, std::span<const double> scores,
                                                          int num_classes, double fraction);

struct ProjectionConfig {
  std::size_t in = 32;
  std::size_t hidden = 64;
  std::size_t out = 32;
};

/// Two-layer MLP with a ReLU, mapping features to the contrastive space.
class ProjectionHead {
 public:
  ProjectionHead(ProjectionConfig cfg, std::uint64_t seed);

  const ProjectionConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  ad::Var operator()(const std::vector<ad::Var>& bound, ad::Var feats) const;
  Tensor operator()(const Tensor& feats) const;

 private:
  ProjectionConfig cfg_;
  ParamStore params_;
  Dense hidden_, out_;
};

/// C x M x m prototype store with least-recently-updated slot replacement.
class MemoryBank {
 public:
  MemoryBank(int num_classes, std::size_t slots, std::size_t width, double momentum);

  int num_classes() const noexcept { return classes_; }
  std::size_t slots() const noexcept { return slots_; }
  std::size_t width() const noexcept { return width_; }
  double momentum() const noexcept { return momentum_; }

  /// [C, M, m].
  const Tensor& prototypes() const noexcept { return protos_; }
  std::span<const double> prototype(int c, std::size_t slot) const;
  bool filled(int c, std::size_t slot) const;
  std::size_t filled_count(int c) const;
  std::uint64_t last_updated(int c, std::size_t slot) const;
  std::uint64_t clock() const noexcept { return clock_; }

  /// Writes `target` (length m) into class c: an unfilled slot takes it
  /// verbatim, otherwise the least recently updated slot becomes
  /// momentum * slot + (1 - momentum) * target. Returns the slot index.
  std::size_t update(int c, std::span<const double> target);

  /// Raw state access for checkpointing.
  const std::vector<std::uint64_t>& stamps() const noexcept { return stamps_; }
  static MemoryBank restore(double momentum, Tensor prototypes, std::vector<std::uint64_t> stamps,
                            std::uint64_t clock);

  bool operator==(const MemoryBank&) const = default;

 private:
  int classes_;
  std::size_t slots_, width_;
  double momentum_;
  Tensor protos_;
  std::vector<std::uint64_t> stamps_;  // 0 = unfilled, else clock at last write
  std::uint64_t clock_ = 0;
};

/// Mean of the selected rows of `feats`, projected by `head`, written into
/// class c. Returns the slot index.
std::size_t update_bank(MemoryBank& bank, const ProjectionHead& head, int c, const Tensor& feats,
                        std::span<const std::size_t> selected);

struct ContrastConfig {
  double tau = 0.07;
  double lambda = 0.1;
  std::size_t positives = 0;  // per query; 0 = every filled same-class slot
  std::size_t negatives = 0;  // per query; 0 = every filled other-class slot

  void validate() const;
};

/// Mean over rows of -log(sum_p e^{s+/tau} / (sum_p e^{s+/tau} + sum_q e^{s-/tau}))
/// on raw similarity matrices [b,P] and [b,Q].
ad::Var contrastive_from_similarities(ad::Var positive, ad::Var negative, double tau);

/// Cosine-similarity contrastive loss of queries [b,m] against the bank.
/// Queries with a negative label or no filled positive slot are skipped.
/// `used`, when given, receives the number of contributing queries.
ad::Var contrastive_loss(ad::Var queries, const MemoryBank& bank, std::span<const int> labels,
                         const ContrastConfig& cfg, std::size_t* used = nullptr);

ad::Var combined_loss(ad::Var seg, ad::Var con, double lambda);
double combined_loss(double seg, double con, double lambda);

}  // namespace rpcss
