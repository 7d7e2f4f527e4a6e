#include "rpcss/qcmb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rpcss/error.hpp"
#include "rpcss/knn.hpp"
#include "rpcss/scene.hpp"

namespace rpcss {

namespace {

constexpr double kMasked = -1e9;  // additive logit mask; -inf would trip the tape's finiteness check

double cosine(const double* a, const double* b, std::size_t d) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

QualityScores score_with_k(const Tensor& feats, std::span<const int> labels, const std::vector<std::size_t>& k,
                           double gamma) {
  const std::size_t n = feats.rows(), d = feats.cols();
  const std::size_t kmax = *std::max_element(k.begin(), k.end());
  const std::vector<std::size_t> nbr = knn_indices(feats, kmax);
  QualityScores out;
  out.score.resize(n);
  out.density.resize(n);
  out.penalty.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = &feats[i * d];
    double dens = 0.0, pen = 0.0;
    for (std::size_t r = 0; r < k[i]; ++r) {
      const std::size_t j = nbr[i * kmax + r];
      const double* xj = &feats[j * d];
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += (xi[c] - xj[c]) * (xi[c] - xj[c]);
      dens += 1.0 / (std::sqrt(s) + 1.0);
      if (labels[j] != labels[i]) pen += cosine(xi, xj, d);
    }
    out.density[i] = dens / static_cast<double>(k[i]);
    out.penalty[i] = pen / static_cast<double>(k[i]);
    out.score[i] = out.density[i] - gamma * out.penalty[i];
  }
  return out;
}

void check_inputs(const Tensor& feats, std::span<const int> labels) {
  if (feats.rank() != 2) throw ShapeError("quality_score: features must be [n,dim]");
  if (feats.rows() < 2) throw ShapeError("quality_score: needs at least two features");
  if (labels.size() != feats.rows()) throw ShapeError("quality_score: one label per feature required");
  for (int y : labels)
    if (y < 0) throw ShapeError("quality_score: labels must be >= 0");
}

}  // namespace

void QualityConfig::validate() const {
  if (k_base < 1) throw ConfigError("quality: k_base must be >= 1");
  if (!(gamma >= 0.0)) throw ConfigError("quality: gamma must be >= 0");
  if (!(select_fraction > 0.0 && select_fraction <= 1.0)) throw ConfigError("quality: select fraction must be in (0,1]");
}

std::size_t class_k(std::size_t k_base, std::size_t n_c, std::size_t n_total) {
  if (n_c < 1 || n_total < 1 || n_c > n_total) {
    throw std::invalid_argument("class_k: requires 1 <= n_c <= n_total");
  }
  const double k = static_cast<double>(k_base) * std::cbrt(static_cast<double>(n_c) / static_cast<double>(n_total));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(k)));
}

QualityScores quality_score(const Tensor& feats, std::span<const int> labels, const QualityConfig& cfg) {
  cfg.validate();
  check_inputs(feats, labels);
  const std::size_t n = feats.rows();
  std::vector<std::size_t> count;
  for (int y : labels) {
    if (static_cast<std::size_t>(y) >= count.size()) count.resize(static_cast<std::size_t>(y) + 1, 0);
    ++count[static_cast<std::size_t>(y)];
  }
  std::vector<std::size_t> k(n);
  bool clamped = false;
  for (std::size_t i = 0; i < n; ++i) {
    k[i] = class_k(cfg.k_base, count[static_cast<std::size_t>(labels[i])], n);
    if (k[i] > n - 1) {
      k[i] = n - 1;
      clamped = true;
    }
  }
  QualityScores out = score_with_k(feats, labels, k, cfg.gamma);
  out.k_clamped = clamped;
  return out;
}

QualityScores quality_score_fixed_k(const Tensor& feats, std::span<const int> labels, std::size_t k, double gamma) {
  check_inputs(feats, labels);
  if (k < 1) throw std::invalid_argument("quality_score: k must be >= 1");
  const std::size_t n = feats.rows();
  const bool clamped = k > n - 1;
  QualityScores out = score_with_k(feats, labels, std::vector<std::size_t>(n, std::min(k, n - 1)), gamma);
  out.k_clamped = clamped;
  return out;
}

std::vector<std::vector<std::size_t>> select_high_quality(std::span<const int> labels, std::span<const double> scores,
                                                          int num_classes, double fraction) {
  if (labels.size() != scores.size()) throw ShapeError("select_high_quality: labels and scores differ in length");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("select_high_quality: fraction must be in (0,1]");
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(std::max(num_classes, 0)));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0 && labels[i] < num_classes) out[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  for (auto& idx : out) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size())));
    idx.resize(std::min(keep, idx.size()));
    std::sort(idx.begin(), idx.end());
  }
  return out;
}

// ---- projection head ----------------------------------------------------------

ProjectionHead::ProjectionHead(ProjectionConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.in == 0 || cfg_.hidden == 0 || cfg_.out == 0) throw ConfigError("projection head: widths must be > 0");
  Rng rng(derive_seed(seed, 0x9E0ULL));
  hidden_ = Dense::create(params_, "proj.hidden", cfg_.in, cfg_.hidden, rng, Init::he);
  out_ = Dense::create(params_, "proj.out", cfg_.hidden, cfg_.out, rng, Init::xavier);
}

ad::Var ProjectionHead::operator()(const std::vector<ad::Var>& bound, ad::Var feats) const {
  if (feats.cols() != cfg_.in) throw ShapeError("projection head: feature width mismatch");
  return out_(bound, ad::relu(hidden_(bound, feats)));
}

Tensor ProjectionHead::operator()(const Tensor& feats) const {
  ad::Tape tape;
  return (*this)(params_.bind(tape, false), tape.constant(feats)).value();
}

// ---- memory bank -----------------------------------------------------------------

MemoryBank::MemoryBank(int num_classes, std::size_t slots, std::size_t width, double momentum)
    : classes_(num_classes), slots_(slots), width_(width), momentum_(momentum) {
  if (num_classes < 1 || slots < 1 || width < 1) throw ConfigError("memory bank: C, M and m must be >= 1");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("memory bank: momentum must be in [0,1]");
  protos_ = Tensor(Shape{static_cast<std::size_t>(num_classes), slots, width});
  stamps_.assign(static_cast<std::size_t>(num_classes) * slots, 0);
}

std::span<const double> MemoryBank::prototype(int c, std::size_t slot) const {
  return protos_.data().subspan((static_cast<std::size_t>(c) * slots_ + slot) * width_, width_);
}

bool MemoryBank::filled(int c, std::size_t slot) const { return last_updated(c, slot) != 0; }

std::size_t MemoryBank::filled_count(int c) const {
  std::size_t n = 0;
  for (std::size_t s = 0; s < slots_; ++s) n += filled(c, s) ? 1 : 0;
  return n;
}

std::uint64_t MemoryBank::last_updated(int c, std::size_t slot) const {
  if (c < 0 || c >= classes_ || slot >= slots_) throw std::out_of_range("memory bank: slot out of range");
  return stamps_[static_cast<std::size_t>(c) * slots_ + slot];
}

std::size_t MemoryBank::update(int c, std::span<const double> target) {
  if (c < 0 || c >= classes_) throw std::out_of_range("memory bank: class out of range");
  if (target.size() != width_) throw ShapeError("memory bank: target width mismatch");
  for (double v : target)
    if (!std::isfinite(v)) throw NumericError("memory bank: non-finite prototype");
  const std::size_t base = static_cast<std::size_t>(c) * slots_;
  std::size_t slot = 0;
  for (std::size_t s = 1; s < slots_; ++s)
    if (stamps_[base + s] < stamps_[base + slot]) slot = s;
  double* p = &protos_[(base + slot) * width_];
  if (stamps_[base + slot] == 0) {
    std::copy(target.begin(), target.end(), p);
  } else {
    for (std::size_t k = 0; k < width_; ++k) p[k] = momentum_ * p[k] + (1.0 - momentum_) * target[k];
  }
  stamps_[base + slot] = ++clock_;
  return slot;
}

MemoryBank MemoryBank::restore(double momentum, Tensor prototypes, std::vector<std::uint64_t> stamps,
                               std::uint64_t clock) {
  if (prototypes.rank() != 3) throw FormatError("memory bank: prototypes must be [C,M,m]");
  MemoryBank bank(static_cast<int>(prototypes.shape()[0]), prototypes.shape()[1], prototypes.shape()[2], momentum);
  if (stamps.size() != bank.stamps_.size()) throw FormatError("memory bank: slot stamp count mismatch");
  if (!prototypes.all_finite()) throw FormatError("memory bank: non-finite prototypes");
  for (std::uint64_t s : stamps)
    if (s > clock) throw FormatError("memory bank: slot stamp ahead of the clock");
  bank.protos_ = std::move(prototypes);
  bank.stamps_ = std::move(stamps);
  bank.clock_ = clock;
  return bank;
}

std::size_t update_bank(MemoryBank& bank, const ProjectionHead& head, int c, const Tensor& feats,
                        std::span<const std::size_t> selected) {
  if (selected.empty()) throw std::invalid_argument("update_bank: empty selection");
  const std::size_t d = feats.cols();
  Tensor mean(Shape{1, d});
  for (std::size_t i : selected) {
    if (i >= feats.rows()) throw std::out_of_range("update_bank: feature index out of range");
    for (std::size_t k = 0; k < d; ++k) mean[k] += feats.at(i, k);
  }
  for (std::size_t k = 0; k < d; ++k) mean[k] /= static_cast<double>(selected.size());
  const Tensor u = head(mean);
  return bank.update(c, u.data());
}

// ---- contrastive loss -------------------------------------------------------------

void ContrastConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("contrast: tau must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("contrast: lambda must be >= 0");
}

ad::Var contrastive_from_similarities(ad::Var positive, ad::Var negative, double tau) {
  if (!(tau > 0.0)) throw ConfigError("contrast: tau must be > 0");
  if (positive.rows() != negative.rows()) throw ShapeError("contrast: similarity matrices differ in rows");
  if (positive.cols() == 0) throw ShapeError("contrast: at least one positive per query");
  ad::Var pos = ad::scale(positive, 1.0 / tau);
  ad::Var all = negative.cols() == 0 ? pos : ad::concat_cols(pos, ad::scale(negative, 1.0 / tau));
  return ad::mean(ad::logsumexp_rows(all) - ad::logsumexp_rows(pos));
}

ad::Var contrastive_loss(ad::Var queries, const MemoryBank& bank, std::span<const int> labels,
                         const ContrastConfig& cfg, std::size_t* used) {
  cfg.validate();
  if (queries.shape().size() != 2 || queries.cols() != bank.width()) {
    throw ShapeError("contrastive_loss: queries must be [b," + std::to_string(bank.width()) + "]");
  }
  if (labels.size() != queries.rows()) throw ShapeError("contrastive_loss: one label per query required");
  const std::size_t m = bank.width();

  // filled slots as normalised rows
  std::vector<int> slot_class;
  std::vector<double> rows;
  for (int c = 0; c < bank.num_classes(); ++c)
    for (std::size_t s = 0; s < bank.slots(); ++s) {
      if (!bank.filled(c, s)) continue;
      const auto p = bank.prototype(c, s);
      double nn = 0.0;
      for (double v : p) nn += v * v;
      const double inv = nn > 0.0 ? 1.0 / std::sqrt(nn) : 0.0;
      for (double v : p) rows.push_back(v * inv);
      slot_class.push_back(c);
    }
  const std::size_t S = slot_class.size();

  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= bank.num_classes()) continue;
    if (std::find(slot_class.begin(), slot_class.end(), y) != slot_class.end()) kept.push_back(i);
  }
  if (used) *used = kept.size();
  if (kept.empty()) throw std::invalid_argument("contrastive_loss: no query has a filled positive prototype");

  Tensor pos_mask(Shape{kept.size(), S}, kMasked), all_mask(Shape{kept.size(), S}, kMasked);
  for (std::size_t r = 0; r < kept.size(); ++r) {
    const int y = labels[kept[r]];
    std::size_t np = 0, nq = 0;
    for (std::size_t s = 0; s < S; ++s) {
      if (slot_class[s] == y) {
        if (cfg.positives == 0 || np < cfg.positives) {
          pos_mask.at(r, s) = 0.0;
          all_mask.at(r, s) = 0.0;
          ++np;
        }
      } else if (cfg.negatives == 0 || nq < cfg.negatives) {
        all_mask.at(r, s) = 0.0;
        ++nq;
      }
    }
  }

  ad::Tape& tape = queries.tape();
  ad::Var q = ad::gather_rows(queries, kept);
  ad::Var qn = q / ad::sqrt(ad::sum_axis(ad::square(q), 1) + 1e-12);
  ad::Var protos = tape.constant(Tensor(Shape{S, m}, std::move(rows)));
  ad::Var logits = ad::scale(ad::matmul(qn, ad::transpose(protos)), 1.0 / cfg.tau);
  return ad::mean(ad::logsumexp_rows(logits + tape.constant(std::move(all_mask))) -
                  ad::logsumexp_rows(logits + tape.constant(std::move(pos_mask))));
}

ad::Var combined_loss(ad::Var seg, ad::Var con, double lambda) { return seg + ad::scale(con, lambda); }

double combined_loss(double seg, double con, double lambda) { return seg + lambda * con; }

}  // namespace rpcss
