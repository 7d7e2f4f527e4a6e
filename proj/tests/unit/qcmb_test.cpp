#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "rpcss/error.hpp"
#include "rpcss/qcmb.hpp"

using namespace rpcss;

namespace {

std::vector<double> row(std::initializer_list<double> v) { return v; }

double con(const Tensor& pos, const Tensor& neg, double tau) {
  ad::Tape tape;
  return contrastive_from_similarities(tape.constant(pos), tape.constant(neg), tau).item();
}

}  // namespace

TEST(ClassK, HandValues) {
  EXPECT_EQ(class_k(16, 1, 8), 8u);
  EXPECT_EQ(class_k(16, 125, 1000), 8u);
  EXPECT_EQ(class_k(16, 1, 1000), 2u);
  EXPECT_EQ(class_k(16, 300, 300), 16u);
  EXPECT_EQ(class_k(1, 1, 1000000), 1u);
  EXPECT_THROW(class_k(16, 0, 10), std::invalid_argument);
  EXPECT_THROW(class_k(16, 11, 10), std::invalid_argument);
}

TEST(Quality, SameClassNeighbours) {
  const Tensor f = Tensor::matrix({{1, 0}, {2, 0}, {1, 1}});
  const int y[] = {0, 0, 0};
  const QualityScores q = quality_score_fixed_k(f, y, 2, 1.0);
  EXPECT_NEAR(q.density[0], 0.5, 1e-12);
  EXPECT_NEAR(q.penalty[0], 0.0, 1e-12);
  EXPECT_NEAR(q.score[0], 0.5, 1e-12);
}

TEST(Quality, DifferentClassNeighbourWithUnitCosine) {
  const Tensor f = Tensor::matrix({{1, 0}, {2, 0}, {1, 1}});
  const int y[] = {0, 1, 0};
  const QualityScores q = quality_score_fixed_k(f, y, 2, 1.0);
  EXPECT_NEAR(q.density[0], 0.5, 1e-12);
  EXPECT_NEAR(q.penalty[0], 0.5, 1e-12);
  EXPECT_NEAR(q.score[0], 0.0, 1e-12);
}

TEST(Quality, IsolatedPointHasVanishingDensity) {
  const Tensor f = Tensor::matrix({{0, 0}, {1e9, 0}, {0, 1e9}});
  const int y[] = {0, 0, 0};
  const QualityScores q = quality_score_fixed_k(f, y, 2, 1.0);
  EXPECT_LT(q.density[0], 1e-8);
  EXPECT_GT(q.density[0], 0.0);
}

TEST(Quality, ClassAwareKIsClamped) {
  Rng rng(1);
  const Tensor f = testkit::uniform(Shape{6, 3}, rng);
  const int y[] = {0, 0, 0, 1, 1, 1};
  QualityConfig cfg;
  cfg.k_base = 16;
  const QualityScores q = quality_score(f, y, cfg);
  EXPECT_TRUE(q.k_clamped);
  cfg.k_base = 2;
  EXPECT_FALSE(quality_score(f, y, cfg).k_clamped);
  const int bad[] = {0, 0, -1, 1, 1, 1};
  EXPECT_THROW(quality_score(f, bad, cfg), std::invalid_argument);
}

TEST(Selection, Contract) {
  const int y[] = {0, 0};
  const double s[] = {0.9, 0.1};
  EXPECT_EQ(select_high_quality(y, s, 2, 0.5)[0], (std::vector<std::size_t>{0}));
  EXPECT_TRUE(select_high_quality(y, s, 2, 0.5)[1].empty());
  EXPECT_EQ(select_high_quality(y, s, 2, 1.0)[0], (std::vector<std::size_t>{0, 1}));

  const int y2[] = {1, 0, 1, 1, -1};
  const double s2[] = {0.3, 0.5, 0.3, 0.2, 9.0};
  const auto sel = select_high_quality(y2, s2, 2, 0.5);
  EXPECT_EQ(sel[0], (std::vector<std::size_t>{1}));
  EXPECT_EQ(sel[1], (std::vector<std::size_t>{0, 2}));
  const auto tie = select_high_quality(y2, s2, 2, 0.3);
  EXPECT_EQ(tie[1], (std::vector<std::size_t>{0}));
}

TEST(Bank, UnfilledSlotCopiesTarget) {
  MemoryBank bank(2, 3, 2, 0.98);
  EXPECT_EQ(bank.update(1, row({0.3, -0.4})), 0u);
  EXPECT_TRUE(bank.filled(1, 0));
  EXPECT_FALSE(bank.filled(1, 1));
  EXPECT_EQ(bank.prototype(1, 0)[0], 0.3);
  EXPECT_EQ(bank.prototype(1, 0)[1], -0.4);
  EXPECT_EQ(bank.filled_count(0), 0u);
  EXPECT_EQ(bank.prototypes().shape(), (Shape{2, 3, 2}));
}

TEST(Bank, ZeroSlotMomentumHandValue) {
  MemoryBank bank(1, 1, 3, 0.98);
  bank.update(0, row({0, 0, 0}));
  const auto u = row({1.0, -2.0, 0.5});
  bank.update(0, u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(bank.prototype(0, 0)[k], 0.02 * u[k], 1e-12);
}

TEST(Bank, GeometricConvergence) {
  MemoryBank bank(1, 1, 2, 0.9);
  const auto v0 = row({4.0, -1.0});
  const auto u = row({1.0, 2.0});
  bank.update(0, v0);
  for (int n = 1; n <= 40; ++n) {
    bank.update(0, u);
    const double r = std::pow(0.9, n);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(bank.prototype(0, 0)[k], u[k] + r * (v0[k] - u[k]), 1e-12);
  }
}

TEST(Bank, LeastRecentlyUpdatedSlotRotates) {
  MemoryBank bank(1, 3, 1, 0.5);
  std::vector<std::size_t> slots;
  for (int i = 0; i < 7; ++i) slots.push_back(bank.update(0, row({static_cast<double>(i)})));
  EXPECT_EQ(slots, (std::vector<std::size_t>{0, 1, 2, 0, 1, 2, 0}));
  EXPECT_EQ(bank.filled_count(0), 3u);
  EXPECT_THROW(bank.update(0, row({1.0, 2.0})), ShapeError);
  EXPECT_THROW(bank.update(1, row({1.0})), std::out_of_range);
}

TEST(Bank, UpdateFromSelectedMean) {
  Rng rng(2);
  const ProjectionHead head(ProjectionConfig{3, 5, 4}, 2);
  const Tensor feats = testkit::uniform(Shape{5, 3}, rng);
  const std::size_t sel[] = {1, 3, 4};
  MemoryBank bank(2, 2, 4, 0.98);
  update_bank(bank, head, 1, feats, sel);
  Tensor mean(Shape{1, 3});
  for (std::size_t i : sel)
    for (std::size_t k = 0; k < 3; ++k) mean.at(0, k) += feats.at(i, k) / 3.0;
  const Tensor p = head(mean);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(bank.prototype(1, 0)[k], p.at(0, k), 1e-12);
}

TEST(Contrastive, EqualSimilaritiesGiveLn2) {
  EXPECT_NEAR(con(Tensor::matrix({{0.3}}), Tensor::matrix({{0.3}}), 0.07), std::log(2.0), 1e-6);
}

TEST(Contrastive, SeparatedSimilaritiesNearZero) {
  const double v = con(Tensor::matrix({{1.0}}), Tensor::matrix({{-1.0}}), 0.07);
  EXPECT_NEAR(v, std::log1p(std::exp(-2.0 / 0.07)), 1e-6);
  EXPECT_NEAR(v, 3.8e-13, 1e-13);
}

TEST(Contrastive, BankCosineMatchesHandValue) {
  MemoryBank bank(2, 2, 2, 0.98);
  bank.update(0, row({2.0, 0.0}));
  bank.update(1, row({-3.0, 0.0}));
  ad::Tape tape;
  const int y[] = {0};
  std::size_t used = 0;
  const double v = contrastive_loss(tape.constant(Tensor::matrix({{5.0, 0.0}})), bank, y, {}, &used).item();
  EXPECT_EQ(used, 1u);
  EXPECT_NEAR(v, std::log1p(std::exp(-2.0 / 0.07)), 1e-15);
}

TEST(Contrastive, SkipsQueriesWithoutPositives) {
  MemoryBank bank(3, 2, 2, 0.98);
  bank.update(0, row({1.0, 0.0}));
  bank.update(1, row({0.0, 1.0}));
  Rng rng(3);
  const Tensor q = testkit::uniform(Shape{3, 2}, rng);
  ad::Tape tape;
  const int y[] = {0, 2, -1};
  std::size_t used = 0;
  const ad::Var l = contrastive_loss(tape.constant(q), bank, y, {}, &used);
  EXPECT_EQ(used, 1u);
  ad::Tape t2;
  const int only_first[] = {0};
  EXPECT_NEAR(l.item(), contrastive_loss(t2.constant(Tensor::matrix({{q.at(0, 0), q.at(0, 1)}})), bank, only_first, {})
                            .item(),
              1e-15);
  const int none[] = {2, 2, -1};
  ad::Tape t3;
  EXPECT_THROW(contrastive_loss(t3.constant(q), bank, none, {}), std::invalid_argument);
}

TEST(Contrastive, DuplicatedBatchKeepsMean) {
  MemoryBank bank(2, 4, 3, 0.98);
  Rng rng(4);
  for (int c = 0; c < 2; ++c)
    for (int s = 0; s < 3; ++s) {
      const Tensor v = testkit::uniform(Shape{3}, rng);
      bank.update(c, v.data());
    }
  const Tensor q = testkit::uniform(Shape{4, 3}, rng);
  const auto y = testkit::random_labels(4, 2, rng);
  Tensor q2(Shape{8, 3});
  std::vector<int> y2 = y;
  y2.insert(y2.end(), y.begin(), y.end());
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < 3; ++k) q2.at(i, k) = q.at(i % 4, k);
  ad::Tape tape;
  EXPECT_NEAR(contrastive_loss(tape.constant(q), bank, y, {}).item(),
              contrastive_loss(tape.constant(q2), bank, y2, {}).item(), 1e-12);
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  MemoryBank bank(3, 3, 4, 0.98);
  Rng rng(5);
  for (int c = 0; c < 3; ++c)
    for (int s = 0; s < 2; ++s) bank.update(c, testkit::uniform(Shape{4}, rng).data());
  const ProjectionHead head(ProjectionConfig{3, 6, 4}, 5);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor f = testkit::uniform(Shape{5, 3}, rng);
    const auto y = testkit::random_labels(5, 3, rng);
    ContrastConfig cfg;
    cfg.tau = 0.5;
    const auto fd = testkit::check_gradients(
        [&](ad::Tape& tape, std::span<const ad::Var> x) {
          return contrastive_loss(head(head.params().bind(tape, false), x[0]), bank, y, cfg);
        },
        {f});
    EXPECT_LT(fd.rel_error, 1e-4);
  }
  const auto fd_sim = testkit::check_gradients(
      [](ad::Tape&, std::span<const ad::Var> x) { return contrastive_from_similarities(x[0], x[1], 0.2); },
      {testkit::uniform(Shape{3, 2}, rng), testkit::uniform(Shape{3, 4}, rng)});
  EXPECT_LT(fd_sim.rel_error, 1e-4);
}

TEST(Contrastive, ConfigValidation) {
  ContrastConfig c;
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  QualityConfig q;
  q.select_fraction = 0.0;
  EXPECT_THROW(q.validate(), ConfigError);
  q = QualityConfig{};
  q.k_base = 0;
  EXPECT_THROW(q.validate(), ConfigError);
}

TEST(Combined, Arithmetic) {
  EXPECT_DOUBLE_EQ(combined_loss(1.0, 0.5, 0.1), 1.05);
  EXPECT_DOUBLE_EQ(combined_loss(1.0, 0.5, 0.0), 1.0);
  EXPECT_NEAR(combined_loss(1.0, 0.5, 0.4) - combined_loss(1.0, 0.5, 0.2),
              combined_loss(1.0, 0.5, 0.2) - combined_loss(1.0, 0.5, 0.0), 1e-12);
  ad::Tape tape;
  EXPECT_DOUBLE_EQ(
      combined_loss(tape.constant(Tensor::scalar(1.0)), tape.constant(Tensor::scalar(0.5)), 0.1).item(), 1.05);
}
