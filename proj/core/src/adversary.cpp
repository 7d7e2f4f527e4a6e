#include "rpcss/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "rpcss/error.hpp"

namespace rpcss {

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "ifgsm") return AttackKind::ifgsm;
  if (name == "pgd") return AttackKind::pgd;
  throw ConfigError("unknown attack kind '" + name + "'");
}

std::string attack_kind_name(AttackKind kind) { return kind == AttackKind::ifgsm ? "ifgsm" : "pgd"; }

GradNorm parse_grad_norm(const std::string& name) {
  if (name == "global") return GradNorm::global;
  if (name == "per_point") return GradNorm::per_point;
  throw ConfigError("unknown gradient normalisation '" + name + "'");
}

std::string grad_norm_name(GradNorm norm) { return norm == GradNorm::global ? "global" : "per_point"; }

void AttackConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("attack.alpha must be > 0");
  if (iterations < 1) throw ConfigError("attack.iterations must be >= 1");
  if (kind == AttackKind::pgd && budget() < alpha) throw ConfigError("attack.epsilon must be >= alpha for PGD");
}

CoordinateGradient coordinate_gradient(const SegModel& model, const Tensor& points, std::span<const int> labels) {
  ad::Tape tape;
  const auto bound = model.params().bind(tape, false);
  ad::Var x = tape.leaf(points, true);
  ad::Var loss = ad::cross_entropy(model.logits(bound, model.features(bound, x)), labels);
  tape.backward(loss);
  CoordinateGradient out{loss.item(), tape.grad(x)};
  if (!out.grad.all_finite()) throw NumericError("attack: non-finite coordinate gradient");
  return out;
}

Tensor signed_step(const Tensor& grad, double alpha) {
  Tensor step(grad.shape());
  for (std::size_t k = 0; k < grad.size(); ++k) {
    step[k] = grad[k] > 0.0 ? alpha : (grad[k] < 0.0 ? -alpha : 0.0);
  }
  return step;
}

Tensor normalized_step(const Tensor& grad, double alpha, GradNorm norm) {
  Tensor step(grad.shape());
  if (norm == GradNorm::global) {
    double s = 0.0;
    for (double g : grad.data()) s += g * g;
    const double n = std::sqrt(s);
    if (n == 0.0) return step;
    for (std::size_t k = 0; k < grad.size(); ++k) step[k] = alpha * grad[k] / n;
    return step;
  }
  const std::size_t d = grad.cols();
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += grad.at(i, c) * grad.at(i, c);
    const double n = std::sqrt(s);
    if (n == 0.0) continue;
    for (std::size_t c = 0; c < d; ++c) step.at(i, c) = alpha * grad.at(i, c) / n;
  }
  return step;
}

PointCloud ifgsm_attack(const SegModel& model, const PointCloud& pc, std::span<const int> labels,
                        const AttackConfig& cfg, const AttackObserver& observer) {
  cfg.validate();
  if (cfg.kind != AttackKind::ifgsm) throw ConfigError("ifgsm_attack: config kind is not ifgsm");
  PointCloud adv = pc;
  for (int t = 0; t < cfg.iterations; ++t) {
    const Tensor step = signed_step(coordinate_gradient(model, adv.points, labels).grad, cfg.alpha);
    for (std::size_t k = 0; k < step.size(); ++k) adv.points[k] += step[k];
    if (observer) observer(t, adv.points);
  }
  return adv;
}

PointCloud pgd_attack(const SegModel& model, const PointCloud& pc, std::span<const int> labels,
                      const AttackConfig& cfg, const AttackObserver& observer) {
  cfg.validate();
  if (cfg.kind != AttackKind::pgd) throw ConfigError("pgd_attack: config kind is not pgd");
  const double eps = cfg.budget();
  PointCloud adv = pc;
  for (int t = 0; t < cfg.iterations; ++t) {
    const Tensor step = normalized_step(coordinate_gradient(model, adv.points, labels).grad, cfg.alpha, cfg.grad_norm);
    for (std::size_t k = 0; k < step.size(); ++k) {
      const double x0 = pc.points[k];
      adv.points[k] = std::clamp(adv.points[k] + step[k], x0 - eps, x0 + eps);
    }
    if (!adv.points.all_finite()) throw NumericError("pgd_attack: non-finite coordinates");
    if (observer) observer(t, adv.points);
  }
  return adv;
}

PointCloud run_attack(const SegModel& model, const PointCloud& pc, std::span<const int> labels,
                      const AttackConfig& cfg) {
  return cfg.kind == AttackKind::ifgsm ? ifgsm_attack(model, pc, labels, cfg) : pgd_attack(model, pc, labels, cfg);
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw ShapeError("confusion matrix: num_classes must be >= 1");
}

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_) {
    throw ShapeError("confusion matrix: class id out of range");
  }
  ++at(truth, predicted);
}

void ConfusionMatrix::add(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw ShapeError("confusion matrix: length mismatch");
  for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], predicted[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("confusion matrix: class count mismatch");
  for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
}

std::uint64_t ConfusionMatrix::at(int truth, int predicted) const {
  return counts_[static_cast<std::size_t>(truth * classes_ + predicted)];
}

std::uint64_t& ConfusionMatrix::at(int truth, int predicted) {
  return counts_[static_cast<std::size_t>(truth * classes_ + predicted)];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

MiouResult compute_miou(const ConfusionMatrix& cm) {
  const int C = cm.num_classes();
  MiouResult out;
  out.per_class.assign(static_cast<std::size_t>(C), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int present = 0;
  for (int i = 0; i < C; ++i) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < C; ++j) {
      row += cm.at(i, j);
      col += cm.at(j, i);
    }
    const std::uint64_t tp = cm.at(i, i);
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    out.per_class[static_cast<std::size_t>(i)] = iou;
    sum += iou;
    ++present;
  }
  if (present == 0) throw std::domain_error("mIoU: every class has an empty union");
  out.miou = sum / present;
  return out;
}

double robustness_drop(double miou_clean, double miou_adv) {
  if (miou_clean == 0.0) throw std::domain_error("robustness drop is undefined for a clean mIoU of 0");
  return (miou_clean - miou_adv) / miou_clean;
}

ConfusionMatrix confusion_on(const SegModel& model, std::span<const PointCloud> scenes) {
  ConfusionMatrix cm(model.num_classes());
  for (const PointCloud& pc : scenes) cm.add(pc.labels, predict(model, pc));
  return cm;
}

RobustnessReport evaluate_robustness(const SegModel& model, std::span<const PointCloud> scenes,
                                     const AttackConfig& cfg) {
  cfg.validate();
  ConfusionMatrix clean(model.num_classes()), adv(model.num_classes());
  for (const PointCloud& pc : scenes) {
    clean.add(pc.labels, predict(model, pc));
    adv.add(pc.labels, predict(model, run_attack(model, pc, pc.labels, cfg)));
  }
  const MiouResult mc = compute_miou(clean);
  const MiouResult ma = compute_miou(adv);
  RobustnessReport r;
  r.attack = cfg;
  r.miou_clean = mc.miou;
  r.miou_adv = ma.miou;
  r.robustness_drop = robustness_drop(mc.miou, ma.miou);
  r.iou_clean = mc.per_class;
  r.iou_adv = ma.per_class;
  return r;
}

namespace {

nlohmann::json nullable(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

double from_nullable(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

std::string report_to_json(const RobustnessReport& r) {
  nlohmann::ordered_json j;
  j["attack"] = attack_kind_name(r.attack.kind);
  j["alpha"] = r.attack.alpha;
  j["epsilon"] = r.attack.budget();
  j["iterations"] = r.attack.iterations;
  j["grad_norm"] = grad_norm_name(r.attack.grad_norm);
  j["miou_clean"] = r.miou_clean;
  j["miou_adv"] = r.miou_adv;
  j["robustness_drop"] = r.robustness_drop;
  j["per_class"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.iou_clean.size(); ++c) {
    nlohmann::ordered_json row;
    row["class"] = c;
    row["iou_clean"] = nullable(r.iou_clean[c]);
    row["iou_adv"] = nullable(c < r.iou_adv.size() ? r.iou_adv[c] : std::numeric_limits<double>::quiet_NaN());
    j["per_class"].push_back(row);
  }
  return j.dump(2);
}

RobustnessReport report_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RobustnessReport r;
    r.attack.kind = parse_attack_kind(j.at("attack").get<std::string>());
    r.attack.alpha = j.at("alpha").get<double>();
    r.attack.epsilon = j.at("epsilon").get<double>();
    r.attack.iterations = j.at("iterations").get<int>();
    if (j.contains("grad_norm")) r.attack.grad_norm = parse_grad_norm(j.at("grad_norm").get<std::string>());
    r.miou_clean = j.at("miou_clean").get<double>();
    r.miou_adv = j.at("miou_adv").get<double>();
    r.robustness_drop = j.at("robustness_drop").get<double>();
    for (const auto& row : j.at("per_class")) {
      r.iou_clean.push_back(from_nullable(row.at("iou_clean")));
      r.iou_adv.push_back(from_nullable(row.at("iou_adv")));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("robustness report: ") + e.what());
  }
}

}  // namespace rpcss
