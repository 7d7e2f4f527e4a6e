#include "rpcss/uda.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "rpcss/adversary.hpp"
#include "rpcss/error.hpp"

namespace rpcss {

void AdaptConfig::validate() const {
  if (steps < 1) throw ConfigError("adapt.steps must be >= 1");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("adapt.threshold must be in (0,1]");
  if (!(ema_rate > 0.0 && ema_rate < 1.0)) throw ConfigError("adapt.ema_rate must be in (0,1)");
  for (double lr : {lr_student, lr_flow, lr_attention, lr_projection})
    if (!(lr >= 0.0)) throw ConfigError("adapt: learning rates must be >= 0");
  if (ot_batch < 1 || ot_batch > kMaxOtBatch) {
    throw ConfigError("adapt.ot_batch must be in [1," + std::to_string(kMaxOtBatch) + "]");
  }
  if (attention_heads < 1 || attention_head_dim < 1) throw ConfigError("adapt: attention sizes must be >= 1");
  if (!(overlap.beta > 0.0) || !(overlap.gamma >= 0.0)) throw ConfigError("adapt: overlap beta > 0, gamma >= 0");
  quality.validate();
  contrast.validate();
  if (bank_slots < 1 || projection_width < 1) throw ConfigError("adapt: bank slots and projection width must be >= 1");
  if (!(bank_momentum >= 0.0 && bank_momentum <= 1.0)) throw ConfigError("adapt.bank_momentum must be in [0,1]");
  if (eval_every < 0) throw ConfigError("adapt.eval_every must be >= 0");
}

void AdaptTrace::write_csv(std::ostream& os) const {
  const auto flags = os.flags();
  const auto prec = os.precision(10);
  os << "step,l_seg,l_inn,l_o,l_con,accept_rate,val_miou\n";
  for (const AdaptRecord& r : records) {
    os << r.step << ',' << r.l_seg << ',' << r.l_inn << ',' << r.l_o << ',' << r.l_con << ',' << r.accept_rate << ',';
    if (r.val_miou) os << *r.val_miou;
    os << '\n';
  }
  os.precision(prec);
  os.flags(flags);
}

void ema_update(SegModel& teacher, const SegModel& student, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("ema_update: rate must be in [0,1]");
  ParamStore& t = teacher.params();
  const ParamStore& s = student.params();
  if (!t.same_layout(s)) throw ShapeError("ema_update: teacher and student architectures differ");
  for (std::size_t i = 0; i < t.size(); ++i) {
    Tensor& tv = t.at(i);
    const Tensor& sv = s.at(i);
    for (std::size_t k = 0; k < tv.size(); ++k) tv[k] = rate * tv[k] + (1.0 - rate) * sv[k];
  }
}

std::vector<int> pseudo_labels(const Tensor& probs, double threshold) {
  std::vector<int> out(probs.rows(), -1);
  const std::size_t c = probs.cols();
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const double* r = &probs[i * c];
    const auto best = std::max_element(r, r + c);
    if (*best > threshold) out[i] = static_cast<int>(best - r);
  }
  return out;
}

double acceptance_rate(const Tensor& probs, double threshold) {
  if (probs.rows() == 0) return 0.0;
  const auto labels = pseudo_labels(probs, threshold);
  const auto n = std::count_if(labels.begin(), labels.end(), [](int y) { return y >= 0; });
  return static_cast<double>(n) / static_cast<double>(labels.size());
}

ad::Var segmentation_loss(const SegModel& model, const std::vector<ad::Var>& bound, ad::Var source_feats,
                          std::span<const int> source_labels, ad::Var target_feats,
                          std::span<const int> target_labels) {
  ad::Var loss = ad::cross_entropy(model.logits(bound, source_feats), source_labels);
  if (std::any_of(target_labels.begin(), target_labels.end(), [](int y) { return y >= 0; })) {
    loss = loss + ad::cross_entropy(model.logits(bound, target_feats), target_labels);
  }
  return loss;
}

std::pair<std::size_t, std::size_t> scene_pair(int step, std::size_t num_source, std::size_t num_target) {
  const auto s = static_cast<std::size_t>(step);
  return {s % num_source, s % num_target};
}

namespace {

Tensor features_of(const SegModel& model, const Tensor& desc) {
  ad::Tape tape;
  return model.features_from_descriptors(model.params().bind(tape, false), tape.constant(desc)).value();
}

std::vector<std::size_t> subsample(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  if (k >= n) return all;
  std::vector<std::size_t> out;
  out.reserve(k);
  std::sample(all.begin(), all.end(), std::back_inserter(out), k, rng);
  return out;
}

template <class F>
auto guarded(int step, const char* component, F&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError("adapt step " + std::to_string(step) + ": " + component + ": " + e.what());
  }
}

void require_finite(int step, const char* component, double v) {
  if (!std::isfinite(v)) {
    throw NumericError("adapt step " + std::to_string(step) + ": " + component + " is not finite");
  }
}

}  // namespace

AdaptResult adapt(const SegModel& student, std::span<const PointCloud> source, std::span<const PointCloud> target,
                  const AdaptConfig& cfg, std::span<const PointCloud> validation) {
  cfg.validate();
  if (source.empty() || target.empty()) throw std::invalid_argument("adapt: needs source and target scenes");
  const int C = student.num_classes();
  for (const PointCloud& pc : source)
    if (pc.num_classes != C) throw ShapeError("adapt: source scene class count differs from the model");
  const std::size_t dim = student.dim();

  SegModel st = student;
  SegModel teacher = student;
  std::vector<Tensor> src_desc, tgt_desc;
  for (const PointCloud& pc : source) src_desc.push_back(compute_descriptors(st, pc.points));
  for (const PointCloud& pc : target) tgt_desc.push_back(compute_descriptors(st, pc.points));

  FlowConfig fc = cfg.flow;
  fc.dim = dim;
  CouplingFlow flow(fc, derive_seed(cfg.seed, 0x1F10ULL));
  AttentionHead att(AttentionConfig{dim, cfg.attention_heads, cfg.attention_head_dim, C},
                    derive_seed(cfg.seed, 0x1A77ULL));
  InnTrainer inn(flow, att, cfg.lr_flow, cfg.lr_attention, cfg.ot);
  ProjectionHead head(ProjectionConfig{dim, 2 * cfg.projection_width, cfg.projection_width},
                      derive_seed(cfg.seed, 0x19E0ULL));
  MemoryBank bank(C, cfg.bank_slots, cfg.projection_width, cfg.bank_momentum);
  Sgd sgd(cfg.lr_student);
  Adam head_opt(cfg.lr_projection);

  AdaptTrace trace;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto [si, ti] = scene_pair(step, source.size(), target.size());
    const PointCloud& src = source[si];
    AdaptRecord rec;
    rec.step = step;

    // (1) teacher pseudo-labels
    const Tensor teacher_probs = softmax(classify(teacher, features_of(teacher, tgt_desc[ti])));
    const std::vector<int> pl = pseudo_labels(teacher_probs, cfg.threshold);
    rec.accept_rate = acceptance_rate(teacher_probs, cfg.threshold);

    // (2) supervised loss
    ad::Tape tape;
    const auto bound = st.params().bind(tape);
    ad::Var f_s = st.features_from_descriptors(bound, tape.constant(src_desc[si]));
    ad::Var f_t = st.features_from_descriptors(bound, tape.constant(tgt_desc[ti]));
    ad::Var total = guarded(step, "L_seg", [&] { return segmentation_loss(st, bound, f_s, src.labels, f_t, pl); });
    rec.l_seg = total.item();
    require_finite(step, "L_seg", rec.l_seg);

    std::vector<ad::Var> head_bound;
    if (cfg.enable_iaam || cfg.enable_qcmb) {
      Rng rng(derive_seed(cfg.seed, 0x5AB0000ULL + static_cast<std::uint64_t>(step)));
      const auto is = subsample(f_s.rows(), cfg.ot_batch, rng);
      const auto it = subsample(f_t.rows(), cfg.ot_batch, rng);
      ad::Var fs_sub = ad::gather_rows(f_s, is);
      ad::Var ft_sub = ad::gather_rows(f_t, it);
      std::vector<int> ys_sub(is.size());
      for (std::size_t k = 0; k < is.size(); ++k) ys_sub[k] = src.labels[is[k]];
      ad::Var mapped = ft_sub;  // f_T->S, or f_T itself without the flow

      // (3) alignment and overlap suppression
      if (cfg.enable_iaam) {
        const Tensor student_t = softmax(classify(st, ft_sub.value()));
        const InnLosses inn_losses =
            guarded(step, "L_INN", [&] { return inn.step(InnBatch{fs_sub.value(), ys_sub, ft_sub.value(), student_t}); });
        rec.l_inn = inn_losses.total();
        require_finite(step, "L_INN", rec.l_inn);

        const auto fb = flow.params().bind(tape, false);
        mapped = guarded(step, "flow inverse", [&] { return flow.inverse(fb, ft_sub); });
        const ad::Var parts[] = {fs_sub, mapped};
        ad::Var joint = ad::concat_rows(parts);
        std::vector<int> joint_labels = ys_sub;
        const std::vector<int> att_labels = argmax_rows(att.predict(joint.value()));
        joint_labels.insert(joint_labels.end(), att_labels.begin() + static_cast<std::ptrdiff_t>(is.size()),
                            att_labels.end());
        ad::Var l_o = guarded(step, "L_o", [&] {
          return overlap_loss(ad::softmax_rows(st.logits(bound, joint)), joint_labels, cfg.overlap).total;
        });
        rec.l_o = l_o.item();
        require_finite(step, "L_o", rec.l_o);
        total = total + l_o;
      }

      // (4) quality-guided memory bank
      if (cfg.enable_qcmb) {
        const std::vector<int> mapped_labels = argmax_rows(classify(st, mapped.value()));
        const ad::Var parts[] = {tape.constant(fs_sub.value()), tape.constant(mapped.value())};
        const Tensor pool = ad::concat_rows(parts).value();
        std::vector<int> pool_labels = ys_sub;
        pool_labels.insert(pool_labels.end(), mapped_labels.begin(), mapped_labels.end());
        const QualityScores q = quality_score(pool, pool_labels, cfg.quality);
        const auto selected = select_high_quality(pool_labels, q.score, C, cfg.quality.select_fraction);
        for (int c = 0; c < C; ++c) {
          const auto& sel = selected[static_cast<std::size_t>(c)];
          if (!sel.empty()) guarded(step, "bank update", [&] { return update_bank(bank, head, c, pool, sel); });
        }
        head_bound = head.params().bind(tape);
        std::size_t used = 0;
        ad::Var z = head(head_bound, mapped);
        for (int y : mapped_labels) used += bank.filled_count(y) > 0 ? 1 : 0;
        if (used > 0) {
          ad::Var l_con = guarded(step, "L_con", [&] { return contrastive_loss(z, bank, mapped_labels, cfg.contrast); });
          rec.l_con = l_con.item();
          require_finite(step, "L_con", rec.l_con);
          total = combined_loss(total, l_con, cfg.contrast.lambda);
        }
      }
    }

    // (5) student step
    tape.backward(total);
    const auto grads = st.params().grads(tape, bound);
    for (const Tensor& g : grads)
      if (!g.all_finite()) throw NumericError("adapt step " + std::to_string(step) + ": student gradient is not finite");
    sgd.step(st.params(), grads);
    if (!head_bound.empty()) head_opt.step(head.params(), head.params().grads(tape, head_bound));

    // (6) teacher
    ema_update(teacher, st, cfg.ema_rate);

    const bool last = step + 1 == cfg.steps;
    const bool periodic = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
    if (!validation.empty() && (last || periodic)) rec.val_miou = compute_miou(confusion_on(st, validation)).miou;
    trace.records.push_back(rec);
  }

  AdaptResult result{std::move(st), std::move(trace), std::nullopt, std::nullopt, std::nullopt, std::nullopt};
  if (cfg.enable_iaam) {
    result.flow = std::move(flow);
    result.attention = std::move(att);
  }
  if (cfg.enable_qcmb) {
    result.projection = std::move(head);
    result.bank = std::move(bank);
  }
  return result;
}

}  // namespace rpcss
