#pragma once

// Teacher-student adaptation loop combining pseudo-labelling, the invertible
// attention alignment losses and the contrastive memory bank.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "rpcss/iaam.hpp"
#include "rpcss/qcmb.hpp"
#include "rpcss/segnet.hpp"

namespace rpcss {

struct AdaptConfig {
  int steps = 200;
  double threshold = 0.85;
  double ema_rate = 0.99;
  double lr_student = 1e-2;
  double lr_flow = 1e-3;
  double lr_attention = 1e-3;
  double lr_projection = 1e-3;

  FlowConfig flow;            // dim is taken from the student
  std::size_t attention_heads = 2;
  std::size_t attention_head_dim = 16;
  SinkhornOptions ot{0.05, 50, 1e-6};
  std::size_t ot_batch = 128;  // features per side fed to Sinkhorn
  OverlapLossConfig overlap;

  QualityConfig quality;
  ContrastConfig contrast;
  std::size_t bank_slots = 64;
  std::size_t projection_width = 32;
  double bank_momentum = 0.98;

  bool enable_iaam = true;
  bool enable_qcmb = true;
  int eval_every = 0;  // 0 = validate only after the last step
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptRecord {
  int step = 0;
  double l_seg = 0.0;
  double l_inn = 0.0;
  double l_o = 0.0;
  double l_con = 0.0;
  double accept_rate = 0.0;
  std::optional<double> val_miou;
};

struct AdaptTrace {
  std::vector<AdaptRecord> records;

  void write_csv(std::ostream& os) const;
};

struct AdaptResult {
  SegModel student;
  AdaptTrace trace;
  std::optional<CouplingFlow> flow;
  std::optional<AttentionHead> attention;
  std::optional<ProjectionHead> projection;
  std::optional<MemoryBank> bank;
};

/// teacher <- rate * teacher + (1 - rate) * student, elementwise.
void ema_update(SegModel& teacher, const SegModel& student, double rate);

/// Teacher labels: argmax where the top probability exceeds `threshold`,
/// -1 elsewhere.
std::vector<int> pseudo_labels(const Tensor& probs, double threshold);

/// Fraction of rows whose top probability exceeds `threshold`.
double acceptance_rate(const Tensor& probs, double threshold);

/// Supervised part of one student step: mean CE on the source scene plus
/// mean CE on the accepted target points (omitted when none is accepted).
ad::Var segmentation_loss(const SegModel& model, const std::vector<ad::Var>& bound, ad::Var source_feats,
                          std::span<const int> source_labels, ad::Var target_feats,
                          std::span<const int> target_labels);

/// Scene pair visited at `step`: source[step % S], target[step % T].
std::pair<std::size_t, std::size_t> scene_pair(int step, std::size_t num_source, std::size_t num_target);

/// Runs the loop on a copy of `student`. Validation mIoU on `validation`
/// (when non-empty) is recorded every `eval_every` steps and after the last.
AdaptResult adapt(const SegModel& student, std::span<const PointCloud> source, std::span<const PointCloud> target,
                  const AdaptConfig& cfg, std::span<const PointCloud> validation = {});

}  // namespace rpcss
