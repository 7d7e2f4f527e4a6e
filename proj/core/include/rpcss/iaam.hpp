#pragma once

// Invertible attention alignment: an affine-coupling flow mapping features
// between domains, a multi-head attention pseudo-labeller, and the losses
// that train them plus the overlap-suppression loss applied to the student.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rpcss/autodiff.hpp"
#include "rpcss/nn.hpp"
#include "rpcss/ot.hpp"

namespace rpcss {

struct FlowConfig {
  std::size_t dim = 32;
  std::size_t blocks = 4;
  std::size_t hidden = 64;
  double scale_clamp = 2.0;
};

/// Stack of affine coupling blocks with alternating half masks. Forward maps
/// source-side features to the target side; inverse maps back exactly.
class CouplingFlow {
 public:
  /// Output layers of every subnet start at zero, so a fresh flow is the
  /// identity.
  CouplingFlow(FlowConfig cfg, std::uint64_t seed);

  const FlowConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  /// When `log_det` is given it receives the per-row log|det J| as [n,1].
  ad::Var forward(const std::vector<ad::Var>& bound, ad::Var x, ad::Var* log_det = nullptr) const;
  ad::Var inverse(const std::vector<ad::Var>& bound, ad::Var y) const;

  Tensor forward(const Tensor& x) const;
  Tensor inverse(const Tensor& y) const;
  Tensor log_det(const Tensor& x) const;

  /// Re-draws every parameter (including output layers) with the given scale.
  void randomize(std::uint64_t seed, double stddev);

 private:
  struct Subnet {
    Dense hidden, out;
  };
  struct Block {
    bool condition_on_first;
    Subnet scale, shift;
  };

  ad::Var subnet(const std::vector<ad::Var>& bound, const Subnet& net, ad::Var x) const;
  ad::Var clamped_scale(const std::vector<ad::Var>& bound, const Block& b, ad::Var cond) const;
  void check_width(ad::Var x) const;

  FlowConfig cfg_;
  ParamStore params_;
  std::vector<Block> blocks_;
  std::size_t first_ = 0;  // width of the leading half
};

struct AttentionConfig {
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t head_dim = 16;
  int num_classes = 4;
};

/// Multi-head self-attention over a feature batch followed by a projection to
/// class logits and a row softmax.
class AttentionHead {
 public:
  AttentionHead(AttentionConfig cfg, std::uint64_t seed);

  const AttentionConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  /// Class distributions [n,C].
  ad::Var predict(const std::vector<ad::Var>& bound, ad::Var feats) const;
  Tensor predict(const Tensor& feats) const;
  /// Attention weights of one head, [n,n].
  Tensor attention_weights(const Tensor& feats, std::size_t head) const;

 private:
  ad::Var head_weights(const std::vector<ad::Var>& bound, ad::Var feats, std::size_t h) const;

  AttentionConfig cfg_;
  ParamStore params_;
  std::vector<Dense> query_, key_, value_;
  Dense out_;
};

/// 1/2 [W(f_s2t, f_t) + W(f_t2s, f_s)] with Sinkhorn-computed W.
ad::Var mapping_loss(ad::Var f_s2t, ad::Var f_t, ad::Var f_t2s, ad::Var f_s, const SinkhornOptions& ot);

/// 1/2 ||f_s - f_s2t2s||_2 + 1/2 ||f_t - f_t2s2t||_2 over whole batches.
ad::Var cycle_loss(ad::Var f_s, ad::Var f_s2t2s, ad::Var f_t, ad::Var f_t2s2t);

/// Added to probabilities before taking logs so a zero probability stays finite.
inline constexpr double kProbFloor = 1e-12;

/// -mean log(p[i, label_i] + kProbFloor) for probability rows.
ad::Var nll_of_probs(ad::Var probs, std::span<const int> labels);

/// ||p - q||_F / sqrt(n) between two [n,C] distributions.
ad::Var distribution_gap(ad::Var p, ad::Var q);

/// CE(att_s, y) + CE(att_s2t, y) + gap(att_t2s, student_t), all as probabilities.
ad::Var attention_loss_from_probs(ad::Var att_s, ad::Var att_s2t, std::span<const int> source_labels,
                                  ad::Var att_t2s, ad::Var student_t);

ad::Var attention_loss(const AttentionHead& att, const std::vector<ad::Var>& att_bound, ad::Var f_s,
                       std::span<const int> source_labels, ad::Var f_s2t, ad::Var f_t2s, ad::Var student_t);

struct OverlapLossConfig {
  double gamma = 1.0;  // balance weight
  double beta = 20.0;  // temperature
};

struct OverlapLoss {
  ad::Var total;
  ad::Var match;
  ad::Var overlap;
};

/// L_match + gamma * L_overlap on probability rows; rows must sum to 1.
OverlapLoss overlap_loss(ad::Var probs, std::span<const int> labels, const OverlapLossConfig& cfg);

struct InnBatch {
  Tensor f_s;                      // [n,dim]
  std::vector<int> y_s;            // n source labels
  Tensor f_t;                      // [n',dim]
  Tensor student_t;                // [n',C] student distributions on f_t
};

struct InnLosses {
  double mapping = 0.0;
  double cycle = 0.0;
  double attention = 0.0;
  double total() const noexcept { return mapping + cycle + attention; }
};

/// Joint optimiser for flow and attention on L_INN = L^m + L^c + L^att.
class InnTrainer {
 public:
  InnTrainer(CouplingFlow& flow, AttentionHead& att, double flow_lr, double attention_lr, SinkhornOptions ot = {});

  InnLosses step(const InnBatch& batch);
  InnLosses evaluate(const InnBatch& batch) const;

 private:
  InnLosses build(ad::Tape& tape, const std::vector<ad::Var>& flow_bound, const std::vector<ad::Var>& att_bound,
                  const InnBatch& batch, ad::Var* total) const;

  CouplingFlow& flow_;
  AttentionHead& att_;
  SinkhornOptions ot_;
  Adam flow_opt_, att_opt_;
};

}  // namespace rpcss
