#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpcss/cli/config.hpp"

namespace rpcss::cli {

/// A required upstream artifact is missing or inconsistent.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Directory layout of one experiment run.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path source() const { return root / "source"; }
  std::filesystem::path adapt(const std::string& variant) const { return root / "adapt" / variant; }
  std::filesystem::path attack(const std::string& model, AttackKind kind, double alpha) const;
  std::filesystem::path eval(const std::string& model) const { return root / "eval" / model; }
  std::filesystem::path report() const { return root / "report"; }
  /// Checkpoint of "source" or of an adaptation variant.
  std::filesystem::path checkpoint(const std::string& model) const;
};

/// "baseline", "iaam", "qcmb" or "full" from the adaptation toggles.
std::string variant_name(const AdaptConfig& cfg);
void apply_variant(AdaptConfig& cfg, const std::string& variant);

std::filesystem::path cmd_generate(const ExperimentConfig& cfg);
std::filesystem::path cmd_train_source(const ExperimentConfig& cfg);
std::filesystem::path cmd_adapt(const ExperimentConfig& cfg);
/// Every (kind, alpha) of the sweep against `model`; returns the directories.
std::vector<std::filesystem::path> cmd_attack(const ExperimentConfig& cfg, const std::string& model);
std::filesystem::path attack_one(const ExperimentConfig& cfg, const std::string& model, AttackKind kind, double alpha);
/// Clean and per-attack reports for `model`; with `force`, scene-config hash
/// mismatches between artifacts are only logged.
std::filesystem::path cmd_evaluate(const ExperimentConfig& cfg, const std::string& model, bool force = false);
/// Baseline / IAAM / full variants, clean and under the ablation attack,
/// merged into one table. Missing or stale upstream artifacts are rebuilt.
std::filesystem::path cmd_ablation(const ExperimentConfig& cfg, bool force = false);
std::filesystem::path cmd_report(const std::filesystem::path& run_dir);

/// Full command-line entry point; returns the process exit code
/// (0 success, 1 runtime failure, 2 config or usage error).
int run_cli(int argc, char** argv);

}  // namespace rpcss::cli
