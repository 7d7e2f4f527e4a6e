#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <regex>

#include "rpcss/cli/commands.hpp"
#include "rpcss/error.hpp"

namespace fs = std::filesystem;
using namespace rpcss;
using namespace rpcss::cli;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rpcss_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig cfg = parse_config(R"(
seed: 11
scene:
  points_per_scene: 160
  source_scenes: 3
  target_scenes: 2
  validation_scenes: 1
  test_scenes: 2
train:
  epochs: 3
adapt:
  steps: 2
  ot: {batch: 32}
  bank: {slots: 4, projection_width: 8}
)");
  cfg.output = out;
  return cfg;
}

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "rpcss");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig a = default_config();
  const ExperimentConfig b = parse_config(to_yaml(a));
  EXPECT_EQ(to_yaml(a), to_yaml(b));
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(a.scene.source_scenes, 16u);
  EXPECT_EQ(a.scene.scene.corruption.kind, CorruptionKind::fog);
}

TEST(Config, OverridesAreApplied) {
  const ExperimentConfig c = parse_config("seed: 5\nadapt:\n  contrast: {lambda: 0.3}\nattack:\n  kinds: [ifgsm]\n");
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.adapt.seed, 5u);
  EXPECT_EQ(c.scene.scene.seed, 5u);
  EXPECT_DOUBLE_EQ(c.adapt.contrast.lambda, 0.3);
  ASSERT_EQ(c.attack.kinds.size(), 1u);
  EXPECT_EQ(c.attack.kinds[0], AttackKind::ifgsm);
  EXPECT_NE(scene_hash(c), scene_hash(default_config()));
  EXPECT_EQ(scene_hash(parse_config("adapt: {steps: 7}")), scene_hash(default_config()));
}

TEST(Config, UnknownKeyNamesPathAndLine) {
  try {
    parse_config("adapt:\n  steps: 3\n  quality:\n    k_bse: 4\n", "x.yaml");
    FAIL() << "accepted an unknown key";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("adapt.quality.k_bse"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("x.yaml:4:"), std::string::npos) << e.what();
  }
}

TEST(Config, TypeAndRangeErrors) {
  EXPECT_THROW(parse_config("seed: -1"), ConfigError);
  EXPECT_THROW(parse_config("train: {epochs: 1.5}"), ConfigError);
  EXPECT_THROW(parse_config("adapt: {threshold: 1.5}"), ConfigError);
  EXPECT_THROW(parse_config("attack: {kinds: [fgsm]}"), ConfigError);
  EXPECT_THROW(parse_config("scene: {shift: {scale: [1, 2]}}"), ConfigError);
  EXPECT_THROW(parse_config("scene: 3"), ConfigError);
  EXPECT_THROW(parse_config("[unclosed"), ConfigError);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("exit");
  std::ofstream(dir / "bad.yaml") << "train:\n  epochz: 3\n";
  EXPECT_EQ(invoke({"generate", "-c", (dir / "bad.yaml").string()}), 2);
  EXPECT_EQ(invoke({"nonsense"}), 2);
  EXPECT_EQ(invoke({"train-source", "-o", (dir / "empty").string()}), 1);
  EXPECT_EQ(invoke({"report", (dir / "empty").string()}), 1);
}

TEST(Cli, MissingArtifactIsNamed) {
  const fs::path dir = scratch("missing");
  const ExperimentConfig cfg = tiny(dir / "run");
  cmd_generate(cfg);
  try {
    cmd_adapt(cfg);
    FAIL();
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find((dir / "run" / "source" / "manifest.json").string()), std::string::npos)
        << e.what();
  }
}

TEST(Cli, GenerateIsDeterministic) {
  const fs::path dir = scratch("generate");
  ExperimentConfig cfg = tiny(dir / "a");
  cmd_generate(cfg);
  cfg.output = dir / "b";
  cmd_generate(cfg);
  const auto ma = nlohmann::json::parse(slurp(dir / "a" / "data" / "manifest.json"));
  EXPECT_EQ(ma.at("counts").at("source"), 3);
  EXPECT_EQ(ma.at("counts").at("test"), 2);
  EXPECT_EQ(ma.at("files").size(), 3u + 2u + 1u + 2u);
  EXPECT_EQ(ma.at("config_hash"), config_hash(cfg));
  EXPECT_EQ(slurp(dir / "a" / "data" / "manifest.json"), slurp(dir / "b" / "data" / "manifest.json"));
  EXPECT_EQ(slurp(dir / "a" / "data" / "test" / "scene_0001.pcss"),
            slurp(dir / "b" / "data" / "test" / "scene_0001.pcss"));
}

TEST(Cli, SweepEvaluateAndReport) {
  const fs::path dir = scratch("sweep");
  ExperimentConfig cfg = tiny(dir / "run");
  cfg.attack.kinds = {AttackKind::pgd};
  cmd_generate(cfg);
  cmd_train_source(cfg);
  const auto dirs = cmd_attack(cfg, "source");
  ASSERT_EQ(dirs.size(), 4u);
  for (const auto& d : dirs) EXPECT_TRUE(fs::exists(d / "manifest.json"));
  const fs::path eval = cmd_evaluate(cfg, "source");
  std::size_t reports = 0;
  for (const auto& f : fs::directory_iterator(eval))
    if (f.path().extension() == ".json" && f.path().filename() != "manifest.json") ++reports;
  EXPECT_EQ(reports, 4u);

  const fs::path md = cmd_report(cfg.output);
  const std::string first_md = slurp(md);
  const std::string first_svg = slurp(cfg.output / "report" / "scatter_source_pgd_a0.10.svg");
  cmd_report(cfg.output);
  EXPECT_EQ(slurp(md), first_md);
  EXPECT_EQ(slurp(cfg.output / "report" / "scatter_source_pgd_a0.10.svg"), first_svg);
  const std::regex row(R"(\| source/pgd_a)");
  const auto begin = std::sregex_iterator(first_md.begin(), first_md.end(), row);
  EXPECT_EQ(std::distance(begin, std::sregex_iterator()), 4);

  const auto j = nlohmann::json::parse(slurp(eval / "pgd_a0.10.json"));
  const RobustnessReport r = report_from_json(j.at("report").dump());
  EXPECT_EQ(robustness_drop(r.miou_clean, r.miou_adv), r.robustness_drop);
  EXPECT_LE(r.miou_adv, r.miou_clean);
}

TEST(Cli, TinyAttackMatchesClean) {
  const fs::path dir = scratch("continuity");
  ExperimentConfig cfg = tiny(dir / "run");
  cfg.attack.kinds = {AttackKind::pgd};
  cfg.attack.alphas = {1e-9};
  cfg.attack.epsilon_scale = 0.0;
  cmd_generate(cfg);
  cmd_train_source(cfg);
  cmd_attack(cfg, "source");
  cmd_evaluate(cfg, "source");
  const auto j = nlohmann::json::parse(slurp(cfg.output / "eval" / "source" / "pgd_a0.00.json"));
  EXPECT_NEAR(j.at("report").at("miou_adv").get<double>(), j.at("report").at("miou_clean").get<double>(), 1e-3);
}

TEST(Cli, RefusesMixedSceneConfigsUnlessForced) {
  const fs::path dir = scratch("mixed");
  ExperimentConfig cfg = tiny(dir / "run");
  cfg.attack.kinds = {AttackKind::ifgsm};
  cfg.attack.alphas = {0.05};
  cmd_generate(cfg);
  cmd_train_source(cfg);
  cmd_attack(cfg, "source");
  ExperimentConfig other = cfg;
  other.scene.scene.extent = 12.0;
  EXPECT_THROW(cmd_evaluate(other, "source"), ArtifactError);
  EXPECT_NO_THROW(cmd_evaluate(other, "source", true));
}

TEST(Cli, AdaptIsBitReproducible) {
  const fs::path dir = scratch("adapt");
  ExperimentConfig cfg = tiny(dir / "a");
  cmd_generate(cfg);
  cmd_train_source(cfg);
  cmd_adapt(cfg);
  const std::string first = slurp(cfg.output / "adapt" / "full" / "model.segm");
  cmd_adapt(cfg);
  EXPECT_EQ(slurp(cfg.output / "adapt" / "full" / "model.segm"), first);
  EXPECT_FALSE(first.empty());
}
