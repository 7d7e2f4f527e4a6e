#include "rpcss/iaam.hpp"

#include <cmath>

#include "rpcss/error.hpp"
#include "rpcss/scene.hpp"

namespace rpcss {

// ---- coupling flow ------------------------------------------------------------

CouplingFlow::CouplingFlow(FlowConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.dim < 2) throw ConfigError("flow: dim must be >= 2");
  if (cfg_.blocks < 1) throw ConfigError("flow: needs at least one block");
  if (!(cfg_.scale_clamp > 0.0)) throw ConfigError("flow: scale clamp must be > 0");
  Rng rng(derive_seed(seed, 0xF10ULL));
  first_ = cfg_.dim / 2;
  const std::size_t second = cfg_.dim - first_;
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    Block block;
    block.condition_on_first = b % 2 == 0;
    const std::size_t cond = block.condition_on_first ? first_ : second;
    const std::size_t trans = cfg_.dim - cond;
    const std::string p = "flow.b" + std::to_string(b);
    block.scale.hidden = Dense::create(params_, p + ".s.hidden", cond, cfg_.hidden, rng, Init::he);
    block.scale.out = Dense::create(params_, p + ".s.out", cfg_.hidden, trans, rng, Init::zero);
    block.shift.hidden = Dense::create(params_, p + ".t.hidden", cond, cfg_.hidden, rng, Init::he);
    block.shift.out = Dense::create(params_, p + ".t.out", cfg_.hidden, trans, rng, Init::zero);
    blocks_.push_back(block);
  }
}

void CouplingFlow::check_width(ad::Var x) const {
  if (x.shape().size() != 2 || x.cols() != cfg_.dim) {
    throw ShapeError("flow: expected [n," + std::to_string(cfg_.dim) + "] features, got " + shape_str(x.shape()));
  }
}

ad::Var CouplingFlow::subnet(const std::vector<ad::Var>& bound, const Subnet& net, ad::Var x) const {
  return net.out(bound, ad::relu(net.hidden(bound, x)));
}

ad::Var CouplingFlow::clamped_scale(const std::vector<ad::Var>& bound, const Block& b, ad::Var cond) const {
  const double c = cfg_.scale_clamp;
  return ad::scale(ad::tanh(ad::scale(subnet(bound, b.scale, cond), 1.0 / c)), c);
}

ad::Var CouplingFlow::forward(const std::vector<ad::Var>& bound, ad::Var x, ad::Var* log_det) const {
  check_width(x);
  ad::Var ld;
  for (const Block& b : blocks_) {
    ad::Var lead = ad::slice_cols(x, 0, first_);
    ad::Var tail = ad::slice_cols(x, first_, cfg_.dim);
    ad::Var cond = b.condition_on_first ? lead : tail;
    ad::Var moved = b.condition_on_first ? tail : lead;
    ad::Var s = clamped_scale(bound, b, cond);
    ad::Var t = subnet(bound, b.shift, cond);
    moved = moved * ad::exp(s) + t;
    x = b.condition_on_first ? ad::concat_cols(cond, moved) : ad::concat_cols(moved, cond);
    if (log_det) {
      ad::Var block_ld = ad::sum_axis(s, 1);
      ld = ld.valid() ? ld + block_ld : block_ld;
    }
  }
  if (log_det) *log_det = ld;
  return x;
}

ad::Var CouplingFlow::inverse(const std::vector<ad::Var>& bound, ad::Var y) const {
  check_width(y);
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    const Block& b = *it;
    ad::Var lead = ad::slice_cols(y, 0, first_);
    ad::Var tail = ad::slice_cols(y, first_, cfg_.dim);
    ad::Var cond = b.condition_on_first ? lead : tail;
    ad::Var moved = b.condition_on_first ? tail : lead;
    ad::Var s = clamped_scale(bound, b, cond);
    ad::Var t = subnet(bound, b.shift, cond);
    moved = (moved - t) * ad::exp(-s);
    y = b.condition_on_first ? ad::concat_cols(cond, moved) : ad::concat_cols(moved, cond);
  }
  return y;
}

Tensor CouplingFlow::forward(const Tensor& x) const {
  ad::Tape tape;
  return forward(params_.bind(tape, false), tape.constant(x)).value();
}

Tensor CouplingFlow::inverse(const Tensor& y) const {
  ad::Tape tape;
  return inverse(params_.bind(tape, false), tape.constant(y)).value();
}

Tensor CouplingFlow::log_det(const Tensor& x) const {
  ad::Tape tape;
  ad::Var ld;
  forward(params_.bind(tape, false), tape.constant(x), &ld);
  return ld.value();
}

void CouplingFlow::randomize(std::uint64_t seed, double stddev) {
  Rng rng(derive_seed(seed, 0xF1FULL));
  for (std::size_t i = 0; i < params_.size(); ++i) params_.at(i) = randn(params_.at(i).shape(), rng, stddev);
}

// ---- attention ---------------------------------------------------------------

AttentionHead::AttentionHead(AttentionConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.heads == 0 || cfg_.head_dim == 0) throw ConfigError("attention: heads and head_dim must be > 0");
  if (cfg_.num_classes < 2) throw ConfigError("attention: num_classes must be >= 2");
  Rng rng(derive_seed(seed, 0xA77ULL));
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    const std::string p = "att.h" + std::to_string(h);
    query_.push_back(Dense::create(params_, p + ".q", cfg_.dim, cfg_.head_dim, rng, Init::xavier, false));
    key_.push_back(Dense::create(params_, p + ".k", cfg_.dim, cfg_.head_dim, rng, Init::xavier, false));
    value_.push_back(Dense::create(params_, p + ".v", cfg_.dim, cfg_.head_dim, rng, Init::xavier, false));
  }
  out_ = Dense::create(params_, "att.out", cfg_.heads * cfg_.head_dim, static_cast<std::size_t>(cfg_.num_classes),
                       rng, Init::xavier);
}

ad::Var AttentionHead::head_weights(const std::vector<ad::Var>& bound, ad::Var feats, std::size_t h) const {
  ad::Var q = query_[h](bound, feats);
  ad::Var k = key_[h](bound, feats);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim));
  return ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt));
}

ad::Var AttentionHead::predict(const std::vector<ad::Var>& bound, ad::Var feats) const {
  if (feats.shape().size() != 2 || feats.rows() == 0) throw ShapeError("attention: empty feature batch");
  if (feats.cols() != cfg_.dim) throw ShapeError("attention: feature width mismatch");
  ad::Var mixed;
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    ad::Var out = ad::matmul(head_weights(bound, feats, h), value_[h](bound, feats));
    mixed = mixed.valid() ? ad::concat_cols(mixed, out) : out;
  }
  return ad::softmax_rows(out_(bound, mixed));
}

Tensor AttentionHead::predict(const Tensor& feats) const {
  ad::Tape tape;
  return predict(params_.bind(tape, false), tape.constant(feats)).value();
}

Tensor AttentionHead::attention_weights(const Tensor& feats, std::size_t head) const {
  ad::Tape tape;
  return head_weights(params_.bind(tape, false), tape.constant(feats), head).value();
}

// ---- losses ------------------------------------------------------------------

ad::Var mapping_loss(ad::Var f_s2t, ad::Var f_t, ad::Var f_t2s, ad::Var f_s, const SinkhornOptions& ot) {
  return ad::scale(sinkhorn_cost(f_s2t, f_t, ot) + sinkhorn_cost(f_t2s, f_s, ot), 0.5);
}

ad::Var cycle_loss(ad::Var f_s, ad::Var f_s2t2s, ad::Var f_t, ad::Var f_t2s2t) {
  if (f_s.shape() != f_s2t2s.shape() || f_t.shape() != f_t2s2t.shape()) {
    throw ShapeError("cycle_loss: round-trip shapes must match their inputs");
  }
  return ad::scale(ad::norm(f_s - f_s2t2s) + ad::norm(f_t - f_t2s2t), 0.5);
}

ad::Var nll_of_probs(ad::Var probs, std::span<const int> labels) {
  return ad::neg(ad::mean(ad::log(ad::add_scalar(ad::take_along_rows(probs, labels), kProbFloor))));
}

ad::Var distribution_gap(ad::Var p, ad::Var q) {
  if (p.shape() != q.shape()) {
    throw ShapeError("distribution gap: " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  }
  return ad::scale(ad::norm(p - q), 1.0 / std::sqrt(static_cast<double>(p.rows())));
}

ad::Var attention_loss_from_probs(ad::Var att_s, ad::Var att_s2t, std::span<const int> source_labels,
                                  ad::Var att_t2s, ad::Var student_t) {
  if (att_s.cols() != student_t.cols()) throw ShapeError("attention_loss: class count mismatch");
  return nll_of_probs(att_s, source_labels) + nll_of_probs(att_s2t, source_labels) +
         distribution_gap(att_t2s, student_t);
}

ad::Var attention_loss(const AttentionHead& att, const std::vector<ad::Var>& att_bound, ad::Var f_s,
                       std::span<const int> source_labels, ad::Var f_s2t, ad::Var f_t2s, ad::Var student_t) {
  return attention_loss_from_probs(att.predict(att_bound, f_s), att.predict(att_bound, f_s2t), source_labels,
                                   att.predict(att_bound, f_t2s), student_t);
}

OverlapLoss overlap_loss(ad::Var probs, std::span<const int> labels, const OverlapLossConfig& cfg) {
  if (!(cfg.beta > 0.0)) throw ConfigError("overlap loss: beta must be > 0");
  if (probs.shape().size() != 2) throw ShapeError("overlap loss: probabilities must be [n,C]");
  const std::size_t n = probs.rows(), c = probs.cols();
  if (labels.size() != n) throw ShapeError("overlap loss: one label per row required");
  const Tensor& p = probs.value();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += p.at(i, j);
    if (std::abs(s - 1.0) > 1e-6) {
      throw std::invalid_argument("overlap loss: row " + std::to_string(i) + " is not a probability vector");
    }
  }
  ad::Tape& tape = probs.tape();
  Tensor off_label(Shape{n, c}, 1.0);
  for (std::size_t i = 0; i < n; ++i) off_label.at(i, static_cast<std::size_t>(labels[i])) = 0.0;

  OverlapLoss out;
  out.match = nll_of_probs(probs, labels);
  ad::Var true_prob = ad::take_along_rows(probs, labels);  // [n,1]
  ad::Var pair = ad::log(ad::exp(ad::scale(probs, cfg.beta)) + ad::exp(ad::scale(true_prob, -cfg.beta)));
  out.overlap = ad::scale(ad::sum(pair * tape.constant(std::move(off_label))), 1.0 / (cfg.beta * static_cast<double>(n)));
  out.total = out.match + ad::scale(out.overlap, cfg.gamma);
  return out;
}

// ---- joint INN training ----------------------------------------------------------

InnTrainer::InnTrainer(CouplingFlow& flow, AttentionHead& att, double flow_lr, double attention_lr,
                       SinkhornOptions ot)
    : flow_(flow), att_(att), ot_(ot), flow_opt_(flow_lr), att_opt_(attention_lr) {
  if (!(flow_lr >= 0.0) || !(attention_lr >= 0.0)) throw ConfigError("inn: learning rates must be >= 0");
}

InnLosses InnTrainer::build(ad::Tape& tape, const std::vector<ad::Var>& fb, const std::vector<ad::Var>& ab,
                            const InnBatch& batch, ad::Var* total) const {
  ad::Var f_s = tape.constant(batch.f_s);
  ad::Var f_t = tape.constant(batch.f_t);
  ad::Var f_s2t = flow_.forward(fb, f_s);
  ad::Var f_t2s = flow_.inverse(fb, f_t);
  ad::Var lm = mapping_loss(f_s2t, f_t, f_t2s, f_s, ot_);
  ad::Var lc = cycle_loss(f_s, flow_.inverse(fb, f_s2t), f_t, flow_.forward(fb, f_t2s));
  ad::Var la = attention_loss(att_, ab, f_s, batch.y_s, f_s2t, f_t2s, tape.constant(batch.student_t));
  *total = lm + lc + la;
  return InnLosses{lm.item(), lc.item(), la.item()};
}

InnLosses InnTrainer::step(const InnBatch& batch) {
  ad::Tape tape;
  const auto fb = flow_.params().bind(tape);
  const auto ab = att_.params().bind(tape);
  ad::Var total;
  InnLosses losses;
  try {
    losses = build(tape, fb, ab, batch, &total);
  } catch (const NumericError& e) {
    throw NumericError(std::string("inn training diverged: ") + e.what());
  }
  if (!std::isfinite(losses.total()) || losses.total() > 1e6) {
    throw NumericError("inn training diverged: L_INN = " + std::to_string(losses.total()));
  }
  tape.backward(total);
  flow_opt_.step(flow_.params(), flow_.params().grads(tape, fb));
  att_opt_.step(att_.params(), att_.params().grads(tape, ab));
  return losses;
}

InnLosses InnTrainer::evaluate(const InnBatch& batch) const {
  ad::Tape tape;
  ad::Var total;
  return build(tape, flow_.params().bind(tape, false), att_.params().bind(tape, false), batch, &total);
}

}  // namespace rpcss
