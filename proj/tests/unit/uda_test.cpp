#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "rpcss/error.hpp"
#include "rpcss/uda.hpp"

using namespace rpcss;

namespace {

struct World {
  SegModel model;
  std::vector<PointCloud> source, target;
};

World world(std::uint64_t seed, std::size_t points = 192) {
  SceneConfig sc;
  sc.seed = seed;
  sc.points_per_scene = points;
  sc.shift.rotation_deg = 20.0;
  sc.corruption.kind = CorruptionKind::fog;
  sc.corruption.severity = 0.3;
  World w{SegModel(SegModelConfig{4, 16, {24}, 8, true}, seed), {}, {}};
  for (std::uint32_t i = 0; i < 3; ++i) {
    w.source.push_back(generate_scene(sc, i));
    w.target.push_back(generate_target_scene(sc, 50 + i));
  }
  w.model.fit_input_normalization(w.source);
  TrainConfig tc;
  tc.epochs = 4;
  tc.seed = seed;
  train_source(w.model, w.source, tc);
  return w;
}

AdaptConfig small_config(std::uint64_t seed) {
  AdaptConfig cfg;
  cfg.steps = 4;
  cfg.seed = seed;
  cfg.threshold = 0.6;
  cfg.flow.blocks = 2;
  cfg.flow.hidden = 16;
  cfg.attention_head_dim = 8;
  cfg.ot = {0.1, 20, 1e-6};
  cfg.ot_batch = 48;
  cfg.bank_slots = 8;
  cfg.projection_width = 8;
  return cfg;
}

// Plain pseudo-label self-training written against the model API only.
SegModel reference_baseline(const World& w, const AdaptConfig& cfg) {
  SegModel st = w.model, teacher = w.model;
  for (int step = 0; step < cfg.steps; ++step) {
    const PointCloud& src = w.source[static_cast<std::size_t>(step) % w.source.size()];
    const PointCloud& tgt = w.target[static_cast<std::size_t>(step) % w.target.size()];
    const Tensor desc_t = compute_descriptors(teacher, tgt.points);
    Tensor probs;
    {
      ad::Tape tape;
      const auto b = teacher.params().bind(tape, false);
      probs = softmax(classify(teacher, teacher.features_from_descriptors(b, tape.constant(desc_t)).value()));
    }
    std::vector<int> pl(probs.rows(), -1);
    bool any = false;
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      int best = 0;
      for (int c = 1; c < st.num_classes(); ++c)
        if (probs.at(i, static_cast<std::size_t>(c)) > probs.at(i, static_cast<std::size_t>(best))) best = c;
      if (probs.at(i, static_cast<std::size_t>(best)) > cfg.threshold) {
        pl[i] = best;
        any = true;
      }
    }
    ad::Tape tape;
    const auto bound = st.params().bind(tape);
    ad::Var fs = st.features_from_descriptors(bound, tape.constant(compute_descriptors(st, src.points)));
    ad::Var ft = st.features_from_descriptors(bound, tape.constant(compute_descriptors(st, tgt.points)));
    ad::Var loss = ad::cross_entropy(st.logits(bound, fs), src.labels);
    if (any) loss = loss + ad::cross_entropy(st.logits(bound, ft), pl);
    tape.backward(loss);
    const auto g = st.params().grads(tape, bound);
    for (std::size_t i = 0; i < st.params().size(); ++i) {
      if (!st.params().trainable(i)) continue;
      Tensor& p = st.params().at(i);
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= cfg.lr_student * g[i][k];
    }
    for (std::size_t i = 0; i < st.params().size(); ++i) {
      Tensor& t = teacher.params().at(i);
      const Tensor& s = st.params().at(i);
      for (std::size_t k = 0; k < t.size(); ++k) t[k] = cfg.ema_rate * t[k] + (1.0 - cfg.ema_rate) * s[k];
    }
  }
  return st;
}

}  // namespace

TEST(Ema, HandValues) {
  SegModel t(SegModelConfig{2, 4, {4}, 4, true}, 1), s(SegModelConfig{2, 4, {4}, 4, true}, 2);
  for (std::size_t i = 0; i < t.params().size(); ++i) {
    for (double& v : t.params().at(i).data()) v = 1.0;
    for (double& v : s.params().at(i).data()) v = 3.0;
  }
  SegModel a = t;
  ema_update(a, s, 0.99);
  EXPECT_NEAR(a.params().at(0)[0], 1.02, 1e-12);
  SegModel b = t;
  ema_update(b, s, 0.0);
  EXPECT_EQ(b, s);
  SegModel c = t;
  ema_update(c, s, 1.0);
  EXPECT_EQ(c, t);
  EXPECT_THROW(ema_update(c, s, 1.5), std::invalid_argument);
  SegModel other(SegModelConfig{2, 4, {5}, 4, true}, 1);
  EXPECT_THROW(ema_update(other, s, 0.5), ShapeError);
}

TEST(PseudoLabels, ThresholdContract) {
  const Tensor p = Tensor::matrix({{0.9, 0.1}, {0.4, 0.6}, {1.0, 0.0}, {0.5, 0.5}});
  EXPECT_EQ(pseudo_labels(p, 0.85), (std::vector<int>{0, -1, 0, -1}));
  EXPECT_EQ(pseudo_labels(p, 0.5), (std::vector<int>{0, 1, 0, -1}));
  EXPECT_EQ(pseudo_labels(p, 1.0), (std::vector<int>{-1, -1, -1, -1}));
  EXPECT_DOUBLE_EQ(acceptance_rate(p, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(acceptance_rate(p, 0.5), 0.75);
}

TEST(PseudoLabels, AcceptanceNonIncreasingInThreshold) {
  Rng rng(3);
  const Tensor p = testkit::random_probs(300, 4, rng);
  double prev = 1.0;
  for (double t = 0.0; t <= 1.0; t += 0.01) {
    const double r = acceptance_rate(p, t);
    EXPECT_LE(r, prev);
    prev = r;
  }
}

TEST(ScenePair, CyclesIndependently) {
  EXPECT_EQ(scene_pair(0, 3, 2), (std::pair<std::size_t, std::size_t>{0, 0}));
  EXPECT_EQ(scene_pair(4, 3, 2), (std::pair<std::size_t, std::size_t>{1, 0}));
  EXPECT_EQ(scene_pair(5, 3, 2), (std::pair<std::size_t, std::size_t>{2, 1}));
}

TEST(AdaptConfig, Validation) {
  AdaptConfig c;
  EXPECT_NO_THROW(c.validate());
  c.threshold = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AdaptConfig{};
  c.ema_rate = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AdaptConfig{};
  c.steps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AdaptConfig{};
  c.ot_batch = kMaxOtBatch + 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Adapt, BaselineMatchesReferenceLoopBitForBit) {
  const World w = world(4);
  AdaptConfig cfg = small_config(4);
  cfg.enable_iaam = false;
  cfg.enable_qcmb = false;
  const AdaptResult r = adapt(w.model, w.source, w.target, cfg);
  EXPECT_TRUE(r.student == reference_baseline(w, cfg));
  EXPECT_FALSE(r.flow || r.attention || r.projection || r.bank);
  for (const auto& rec : r.trace.records) {
    EXPECT_EQ(rec.l_inn, 0.0);
    EXPECT_EQ(rec.l_con, 0.0);
  }
}

TEST(Adapt, FullPipelineIsDeterministic) {
  const World w = world(5);
  const AdaptConfig cfg = small_config(5);
  const AdaptResult a = adapt(w.model, w.source, w.target, cfg, w.source);
  const AdaptResult b = adapt(w.model, w.source, w.target, cfg, w.source);
  EXPECT_TRUE(a.student == b.student);
  ASSERT_TRUE(a.flow && b.flow && a.bank && b.bank);
  EXPECT_TRUE(a.flow->params() == b.flow->params());
  EXPECT_TRUE(*a.bank == *b.bank);
  ASSERT_EQ(a.trace.records.size(), 4u);
  EXPECT_GT(a.trace.records.back().l_inn, 0.0);
  EXPECT_GT(a.trace.records.back().l_o, 0.0);
  EXPECT_TRUE(a.trace.records.back().val_miou.has_value());
  EXPECT_FALSE(a.trace.records.front().val_miou.has_value());
  for (int c = 0; c < 4; ++c) EXPECT_LE(a.bank->filled_count(c), cfg.bank_slots);
}

TEST(Adapt, DifferentSeedsDiffer) {
  const World w = world(6);
  const AdaptResult a = adapt(w.model, w.source, w.target, small_config(1));
  const AdaptResult b = adapt(w.model, w.source, w.target, small_config(2));
  EXPECT_FALSE(a.student == b.student);
}

TEST(Adapt, ThresholdOneUsesSourceOnly) {
  const World w = world(7);
  AdaptConfig cfg = small_config(7);
  cfg.enable_iaam = cfg.enable_qcmb = false;
  cfg.threshold = 1.0;
  const AdaptResult r = adapt(w.model, w.source, w.target, cfg);
  for (const auto& rec : r.trace.records) EXPECT_EQ(rec.accept_rate, 0.0);
}

TEST(AdaptTrace, CsvLayout) {
  AdaptTrace t;
  t.records.push_back({0, 1.5, 2.0, 0.25, 0.0, 0.5, std::nullopt});
  t.records.push_back({1, 1.0, 1.0, 0.5, 0.125, 0.75, 0.625});
  std::ostringstream os;
  t.write_csv(os);
  EXPECT_EQ(os.str(),
            "step,l_seg,l_inn,l_o,l_con,accept_rate,val_miou\n"
            "0,1.5,2,0.25,0,0.5,\n"
            "1,1,1,0.5,0.125,0.75,0.625\n");
}
