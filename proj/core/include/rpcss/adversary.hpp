#pragma once

// White-box coordinate attacks (I-FGSM, PGD) and the segmentation metrics
// used to score them.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpcss/scene.hpp"
#include "rpcss/segnet.hpp"

namespace rpcss {

enum class AttackKind { ifgsm, pgd };

AttackKind parse_attack_kind(const std::string& name);
std::string attack_kind_name(AttackKind kind);

/// How the PGD step normalises the coordinate gradient.
enum class GradNorm {
  global,     // one L2 norm over the whole N x 3 gradient
  per_point,  // each point's 3-vector normalised on its own
};

GradNorm parse_grad_norm(const std::string& name);
std::string grad_norm_name(GradNorm norm);

struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  double alpha = 0.03;
  /// PGD L-infinity budget around the clean cloud; <= 0 means "same as alpha".
  double epsilon = 0.0;
  int iterations = 10;
  GradNorm grad_norm = GradNorm::global;

  double budget() const noexcept { return epsilon > 0.0 ? epsilon : alpha; }
  void validate() const;
};

/// Called after every iteration with the current adversarial coordinates.
using AttackObserver = std::function<void(int iteration, const Tensor& points)>;

/// Mean cross-entropy of the model on `points` and its gradient w.r.t. them.
struct CoordinateGradient {
  double loss = 0.0;
  Tensor grad;  // [N,3]
};
CoordinateGradient coordinate_gradient(const SegModel& model, const Tensor& points, std::span<const int> labels);

PointCloud ifgsm_attack(const SegModel& model, const PointCloud& pc, std::span<const int> labels,
                        const AttackConfig& cfg, const AttackObserver& observer = {});
PointCloud pgd_attack(const SegModel& model, const PointCloud& pc, std::span<const int> labels,
                      const AttackConfig& cfg, const AttackObserver& observer = {});
/// Dispatches on cfg.kind.
PointCloud run_attack(const SegModel& model, const PointCloud& pc, std::span<const int> labels,
                      const AttackConfig& cfg);

/// The I-FGSM displacement for one gradient: alpha * sign(g), sign(0) = 0.
Tensor signed_step(const Tensor& grad, double alpha);
/// The PGD displacement for one gradient before projection; zero when the
/// normalising norm is zero.
Tensor normalized_step(const Tensor& grad, double alpha, GradNorm norm);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(int truth, int predicted);
  void add(std::span<const int> truth, std::span<const int> predicted);
  void merge(const ConfusionMatrix& other);

  int num_classes() const noexcept { return classes_; }
  std::uint64_t at(int truth, int predicted) const;
  std::uint64_t& at(int truth, int predicted);
  std::uint64_t total() const;

 private:
  int classes_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  double miou = 0.0;
  /// NaN for classes absent from both prediction and ground truth.
  std::vector<double> per_class;
};

/// Classes with an empty union are excluded from the mean; throws when every
/// class is empty.
MiouResult compute_miou(const ConfusionMatrix& cm);

/// (clean - adv) / clean as a fraction; throws when clean == 0.
double robustness_drop(double miou_clean, double miou_adv);

struct RobustnessReport {
  AttackConfig attack;
  double miou_clean = 0.0;
  double miou_adv = 0.0;
  double robustness_drop = 0.0;
  std::vector<double> iou_clean;
  std::vector<double> iou_adv;
};

ConfusionMatrix confusion_on(const SegModel& model, std::span<const PointCloud> scenes);

/// Clean and attacked mIoU over `scenes` (ground-truth labels drive the attack).
RobustnessReport evaluate_robustness(const SegModel& model, std::span<const PointCloud> scenes,
                                     const AttackConfig& cfg);

std::string report_to_json(const RobustnessReport& report);
RobustnessReport report_from_json(std::string_view text);

}  // namespace rpcss
