#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "rpcss/error.hpp"
#include "rpcss/scene.hpp"

using namespace rpcss;

namespace {

SceneConfig base_config(std::uint64_t seed, std::size_t n = 1000) {
  SceneConfig cfg;
  cfg.num_classes = 4;
  cfg.points_per_scene = n;
  cfg.seed = seed;
  return cfg;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("rpcss_scene_test_" + name);
}

}  // namespace

TEST(Scene, ClassCountsWithinMultinomialBound) {
  const PointCloud pc = generate_scene(base_config(7));
  ASSERT_EQ(pc.size(), 1000u);
  std::vector<int> count(4, 0);
  for (int y : pc.labels) ++count[static_cast<std::size_t>(y)];
  const double sigma = std::sqrt(1000 * 0.25 * 0.75);
  for (int c : count) EXPECT_LE(std::abs(c - 250.0), 3 * sigma);
}

TEST(Scene, DeterministicForSeed) {
  EXPECT_EQ(generate_scene(base_config(3), 2), generate_scene(base_config(3), 2));
  EXPECT_NE(generate_scene(base_config(3), 2).points, generate_scene(base_config(4), 2).points);
}

TEST(Scene, DegenerateSimplex) {
  SceneConfig cfg = base_config(1, 200);
  cfg.class_frequency = {1, 0, 0, 0};
  for (int y : generate_scene(cfg).labels) EXPECT_EQ(y, 0);
}

TEST(Scene, ConfigValidation) {
  SceneConfig cfg = base_config(1);
  cfg.num_classes = 1;
  EXPECT_THROW(generate_scene(cfg), ConfigError);
  cfg = base_config(1);
  cfg.class_frequency = {0.5, 0.5, 0.1, 0.0};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = base_config(1);
  cfg.shift.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_corruption("hail"), ConfigError);
}

TEST(Scene, IdentityShiftAndZeroSeverity) {
  const PointCloud pc = generate_scene(base_config(2, 300));
  EXPECT_EQ(apply_domain_shift(pc, DomainShift{}, 9), pc);
  EXPECT_EQ(apply_corruption(pc, CorruptionKind::fog, 0.0, 9), pc);
  EXPECT_EQ(apply_corruption(pc, CorruptionKind::none, 1.0, 9), pc);
}

TEST(Scene, RotationAboutZ) {
  PointCloud pc;
  pc.points = Tensor::matrix({{1, 0, 0}});
  pc.labels = {0};
  pc.num_classes = 2;
  DomainShift s;
  s.rotation_deg = 90;
  const PointCloud out = apply_domain_shift(pc, s, 0);
  EXPECT_NEAR(out.points.at(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(out.points.at(0, 1), 1.0, 1e-12);
  EXPECT_NEAR(out.points.at(0, 2), 0.0, 1e-12);
}

TEST(Scene, DropoutWithinBinomialBound) {
  const PointCloud pc = generate_scene(base_config(5));
  DomainShift s;
  s.dropout = 0.5;
  const PointCloud out = apply_domain_shift(pc, s, 17);
  EXPECT_LE(std::abs(static_cast<double>(out.size()) - 500.0), 3 * std::sqrt(250.0));
}

TEST(Scene, ShiftKeepsLabelsOfSurvivors) {
  const PointCloud pc = generate_scene(base_config(5, 400));
  DomainShift s;
  s.rotation_deg = 30;
  s.scale = {1.2, 0.8, 1.0};
  s.jitter = 0.05;
  const PointCloud out = apply_domain_shift(pc, s, 3);
  EXPECT_EQ(out.labels, pc.labels);
}

TEST(Scene, FogDropsMoreAtHigherSeverity) {
  int strictly = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PointCloud pc = generate_scene(base_config(seed));
    const PointCloud half = apply_corruption(pc, CorruptionKind::fog, 0.5, seed);
    const PointCloud full = apply_corruption(pc, CorruptionKind::fog, 1.0, seed);
    strictly += full.size() < half.size() ? 1 : 0;
  }
  EXPECT_EQ(strictly, 10);
}

TEST(Scene, SnowAddsPoints) {
  const PointCloud pc = generate_scene(base_config(8));
  EXPECT_GT(apply_corruption(pc, CorruptionKind::snow, 0.5, 1).size(), pc.size());
}

TEST(Scene, ChamferNonDecreasingInSeverity) {
  for (CorruptionKind kind : {CorruptionKind::fog, CorruptionKind::snow, CorruptionKind::rain}) {
    double prev_mean = 0.0;
    for (double sev : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      double sum = 0.0;
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const PointCloud pc = generate_scene(base_config(seed, 300));
        sum += chamfer_distance(pc.points, apply_corruption(pc, kind, sev, seed).points);
      }
      const double mean = sum / 20.0;
      EXPECT_GE(mean, prev_mean) << corruption_name(kind) << " severity " << sev;
      prev_mean = mean;
    }
  }
}

TEST(Scene, TargetScenesAreTagged) {
  SceneConfig cfg = base_config(4, 300);
  cfg.shift.rotation_deg = 10;
  cfg.corruption = {CorruptionKind::rain, 0.5};
  const PointCloud t = generate_target_scene(cfg, 3);
  EXPECT_EQ(t.domain, Domain::target);
  EXPECT_NO_THROW(t.validate());
  EXPECT_EQ(t, generate_target_scene(cfg, 3));
}

TEST(Scene, PcssRoundTrip) {
  PointCloud pc = generate_scene(base_config(6, 200));
  const auto path = temp_file("roundtrip.pcss");
  write_pcss(path, pc);
  const PointCloud back = read_pcss(path);
  EXPECT_EQ(back.labels, pc.labels);
  EXPECT_EQ(back.num_classes, pc.num_classes);
  for (std::size_t k = 0; k < pc.points.size(); ++k) {
    EXPECT_EQ(back.points[k], static_cast<double>(static_cast<float>(pc.points[k])));
  }
  EXPECT_EQ(std::filesystem::file_size(path), 16u + 200u * 14u);
  std::filesystem::remove(path);
}

TEST(Scene, PcssRejectsBadMagic) {
  const auto path = temp_file("bad.pcss");
  std::ofstream(path, std::ios::binary) << "NOPE0000000000000";
  EXPECT_THROW(read_pcss(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Scene, CsvExport) {
  PointCloud pc;
  pc.points = Tensor::matrix({{1, 2, 3}, {0.5, -1, 0}});
  pc.labels = {1, 0};
  pc.num_classes = 2;
  const auto path = temp_file("out.csv");
  write_csv(path, pc);
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  EXPECT_EQ(ss.str(), "1,2,3,1\n0.5,-1,0,0\n");
  std::filesystem::remove(path);
}

TEST(Scene, ChamferOfIdenticalCloudsIsZero) {
  const PointCloud pc = generate_scene(base_config(6, 100));
  EXPECT_EQ(chamfer_distance(pc.points, pc.points), 0.0);
}
