#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rpcss/adversary.hpp"
#include "rpcss/scene.hpp"
#include "rpcss/segnet.hpp"
#include "rpcss/uda.hpp"

namespace rpcss::cli {

struct SceneSection {
  SceneConfig scene;
  std::size_t source_scenes = 16;
  std::size_t target_scenes = 8;
  std::size_t validation_scenes = 2;
  std::size_t test_scenes = 8;
};

struct AttackSection {
  std::vector<AttackKind> kinds{AttackKind::pgd, AttackKind::ifgsm};
  std::vector<double> alphas{0.03, 0.05, 0.07, 0.10};
  int iterations = 10;
  GradNorm grad_norm = GradNorm::per_point;
  /// PGD budget as a multiple of alpha; 0 keeps epsilon = alpha.
  double epsilon_scale = 10.0;

  AttackConfig attack(AttackKind kind, double alpha) const;
};

struct EvalSection {
  AttackKind ablation_kind = AttackKind::pgd;
  double ablation_alpha = 0.10;
};

struct ReportSection {
  std::size_t scatter_points = 400;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output = "runs/default";
  SceneSection scene;
  SegModelConfig model;
  TrainConfig train;
  AdaptConfig adapt;
  AttackSection attack;
  EvalSection eval;
  ReportSection report;

  /// Copies the global seed into every module config and validates them.
  void finalize();
};

/// Built-in experiment: fog plus a rotated, anisotropically scaled target.
ExperimentConfig default_config();

/// Parses YAML on top of default_config(). Unknown keys, wrong types and
/// invalid values throw ConfigError naming the key path and source line.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<string>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical YAML with every field spelled out; parse_config round-trips it.
std::string to_yaml(const ExperimentConfig& cfg);
std::string scene_yaml(const ExperimentConfig& cfg);

/// SHA-256 hex digests of the canonical forms; the output directory is not
/// part of the config hash.
std::string config_hash(const ExperimentConfig& cfg);
std::string scene_hash(const ExperimentConfig& cfg);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace rpcss::cli
