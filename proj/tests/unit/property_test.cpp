#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "rpcss/adversary.hpp"
#include "rpcss/iaam.hpp"
#include "rpcss/qcmb.hpp"

using namespace rpcss;

namespace {

constexpr int kTrials = 50;

double overlap_of(const Tensor& p, std::span<const int> y, double beta) {
  ad::Tape tape;
  return overlap_loss(tape.constant(p), y, {1.0, beta}).overlap.item();
}

double con(const Tensor& pos, const Tensor& neg, double tau) {
  ad::Tape tape;
  return contrastive_from_similarities(tape.constant(pos), tape.constant(neg), tau).item();
}

}  // namespace

TEST(Property, OverlapIncreasesWithWrongClassProbability) {
  Rng rng(1);
  for (int t = 0; t < kTrials; ++t) {
    const Tensor p = testkit::random_probs(6, 4, rng);
    const auto y = testkit::random_labels(6, 4, rng);
    ad::Tape tape;
    ad::Var v = tape.leaf(p);
    tape.backward(overlap_loss(v, y, {1.0, 20.0}).overlap);
    const Tensor g = tape.grad(v);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 4; ++c)
        if (static_cast<int>(c) != y[i]) EXPECT_GT(g.at(i, c), 0.0);
  }
}

TEST(Property, OverlapTermIncreasingInEachWrongEntry) {
  // The summand log(e^{b y_l} + e^{-b y_k}) is strictly increasing in y_l
  // with y_k held fixed; evaluate it on unnormalised rows via the loss on a
  // padded distribution whose slack column is the true class.
  Rng rng(2);
  std::uniform_real_distribution<double> u(0.05, 0.3);
  for (int t = 0; t < kTrials; ++t) {
    const double pk = u(rng), l1 = u(rng), l2 = u(rng), d = 0.01;
    const int y[] = {0};
    const Tensor lo = Tensor::matrix({{pk, l1, l2, 1.0 - pk - l1 - l2}});
    const Tensor hi = Tensor::matrix({{pk, l1 + d, l2, 1.0 - pk - l1 - l2 - d}});
    const double b = 20.0;
    const auto term = [&](double yl) { return std::log(std::exp(b * yl) + std::exp(-b * pk)); };
    const double expected = (term(l1 + d) - term(l1)) + (term(1.0 - pk - l1 - l2 - d) - term(1.0 - pk - l1 - l2));
    EXPECT_NEAR((overlap_of(hi, y, b) - overlap_of(lo, y, b)) * b, expected, 1e-10);
    EXPECT_GT(term(l1 + d), term(l1));
  }
}

TEST(Property, HigherTemperatureSeparatesConfusionMore) {
  const int y[] = {0};
  const Tensor clean = Tensor::matrix({{0.95, 0.05}});
  const Tensor confused = Tensor::matrix({{0.5, 0.5}});
  const double gap20 = overlap_of(confused, y, 20.0) - overlap_of(clean, y, 20.0);
  const double gap1 = overlap_of(confused, y, 1.0) - overlap_of(clean, y, 1.0);
  EXPECT_GT(gap20, gap1);
}

TEST(Property, ContrastiveMonotoneInSimilarities) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < kTrials; ++t) {
    Tensor pos(Shape{1, 3}), neg(Shape{1, 4});
    for (double& v : pos.data()) v = u(rng);
    for (double& v : neg.data()) v = u(rng);
    const double base = con(pos, neg, 0.07);
    Tensor pos_up = pos;
    pos_up[static_cast<std::size_t>(t) % 3] += 0.05;
    Tensor neg_up = neg;
    neg_up[static_cast<std::size_t>(t) % 4] += 0.05;
    EXPECT_LT(con(pos_up, neg, 0.07), base);
    EXPECT_GT(con(pos, neg_up, 0.07), base);
  }
}

TEST(Property, QualityScoreBounds) {
  Rng rng(4);
  for (int t = 0; t < kTrials; ++t) {
    const double gamma = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
    const Tensor f = testkit::uniform(Shape{40, 5}, rng, -2, 2);
    const auto y = testkit::random_labels(40, 3, rng);
    const QualityScores q = quality_score(f, y, QualityConfig{6, gamma, 0.25});
    for (std::size_t i = 0; i < 40; ++i) {
      EXPECT_GT(q.density[i], 0.0);
      EXPECT_LE(q.density[i], 1.0);
      EXPECT_GE(q.penalty[i] * gamma, -gamma - 1e-12);
      EXPECT_LE(q.penalty[i] * gamma, gamma + 1e-12);
      EXPECT_NEAR(q.score[i], q.density[i] - gamma * q.penalty[i], 1e-12);
    }
  }
}

TEST(Property, ClassKNonDecreasing) {
  for (std::size_t kb : {1u, 4u, 16u, 33u})
    for (std::size_t total : {1u, 7u, 100u, 5000u}) {
      std::size_t prev = 0;
      for (std::size_t n = 1; n <= total; ++n) {
        const std::size_t k = class_k(kb, n, total);
        EXPECT_GE(k, prev);
        EXPECT_GE(k, 1u);
        EXPECT_LE(k, kb);
        prev = k;
      }
      EXPECT_EQ(prev, kb);
    }
}

TEST(Property, MomentumUpdateStaysInHull) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(-0.7, 1.3);
  for (int t = 0; t < kTrials; ++t) {
    MemoryBank bank(2, 2, 4, std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    for (int k = 0; k < 6; ++k) {
      std::vector<double> v(4);
      for (double& x : v) x = u(rng);
      bank.update(k % 2, v);
      EXPECT_EQ(bank.prototypes().shape(), (Shape{2, 2, 4}));
    }
    for (double x : bank.prototypes().data()) {
      EXPECT_GE(x, -0.7);
      EXPECT_LE(x, 1.3);
    }
  }
}

TEST(Property, PgdStaysInEpsilonBall) {
  Rng rng(6);
  SegModelConfig mc;
  mc.dim = 8;
  mc.hidden = {12};
  mc.neighbors = 4;
  for (int t = 0; t < 10; ++t) {
    const SegModel m(mc, static_cast<std::uint64_t>(t));
    PointCloud pc;
    pc.num_classes = 4;
    pc.points = testkit::uniform(Shape{30, 3}, rng, -2, 2);
    pc.labels = testkit::random_labels(30, 4, rng);
    AttackConfig cfg;
    cfg.alpha = std::uniform_real_distribution<double>(0.01, 0.2)(rng);
    cfg.epsilon = cfg.alpha * std::uniform_real_distribution<double>(1.0, 4.0)(rng);
    cfg.iterations = 6;
    cfg.grad_norm = t % 2 ? GradNorm::per_point : GradNorm::global;
    const PointCloud adv = pgd_attack(m, pc, pc.labels, cfg, [&](int, const Tensor& pts) {
      EXPECT_LE(max_abs_diff(pts, pc.points), cfg.epsilon + 1e-12);
    });
    EXPECT_LE(max_abs_diff(adv.points, pc.points), cfg.epsilon + 1e-12);
  }
}

TEST(Property, MiouInvariantUnderPointPermutation) {
  Rng rng(7);
  for (int t = 0; t < kTrials; ++t) {
    const auto truth = testkit::random_labels(200, 5, rng);
    auto pred = testkit::random_labels(200, 5, rng);
    for (std::size_t i = 0; i < 200; i += 2) pred[i] = truth[i];
    std::vector<std::size_t> perm(200);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> tp(200), pp(200);
    for (std::size_t i = 0; i < 200; ++i) {
      tp[i] = truth[perm[i]];
      pp[i] = pred[perm[i]];
    }
    ConfusionMatrix a(5), b(5);
    a.add(truth, pred);
    b.add(tp, pp);
    EXPECT_EQ(compute_miou(a).miou, compute_miou(b).miou);
  }
}

TEST(Property, MiouInvariantUnderClassRelabelling) {
  Rng rng(8);
  for (int t = 0; t < kTrials; ++t) {
    const auto truth = testkit::random_labels(150, 4, rng);
    const auto pred = testkit::random_labels(150, 4, rng);
    std::vector<int> relabel{0, 1, 2, 3};
    std::shuffle(relabel.begin(), relabel.end(), rng);
    std::vector<int> tr(150), pr(150);
    for (std::size_t i = 0; i < 150; ++i) {
      tr[i] = relabel[static_cast<std::size_t>(truth[i])];
      pr[i] = relabel[static_cast<std::size_t>(pred[i])];
    }
    ConfusionMatrix a(4), b(4);
    a.add(truth, pred);
    b.add(tr, pr);
    EXPECT_NEAR(compute_miou(a).miou, compute_miou(b).miou, 1e-15);
  }
}
