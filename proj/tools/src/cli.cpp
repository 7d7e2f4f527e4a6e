#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "rpcss/cli/commands.hpp"
#include "rpcss/error.hpp"

namespace rpcss::cli {

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_color_st("rpcss");
  logger->set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("RPCSS_LOG")) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off") {
      spdlog::warn("RPCSS_LOG='{}' is not a log level; keeping info", env);
    } else {
      spdlog::set_level(level);
    }
  }
}

}  // namespace

int run_cli(int argc, char** argv) {
  if (!spdlog::get("rpcss")) setup_logging();

  CLI::App app{"Robust point-cloud segmentation under domain shift: data, training, adaptation, attacks, reports"};
  app.require_subcommand(1);
  std::string config_path, output, model = "full", variant;
  bool force = false, ablation = false;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "experiment config (YAML); built-in defaults when omitted");
    sub->add_option("-o,--output", output, "run directory, overrides the config's output");
  };
  CLI::App* gen = app.add_subcommand("generate", "write source, target, validation and test scenes");
  CLI::App* train = app.add_subcommand("train-source", "train the segmentation model on source scenes");
  CLI::App* adapt = app.add_subcommand("adapt", "adapt the source model to the target domain");
  adapt->add_option("--variant", variant, "baseline, iaam, qcmb or full; overrides the config toggles")
      ->check(CLI::IsMember({"baseline", "iaam", "qcmb", "full"}));
  CLI::App* attack = app.add_subcommand("attack", "run the attack sweep against a model's test predictions");
  attack->add_option("-m,--model", model, "source or an adaptation variant");
  CLI::App* evaluate = app.add_subcommand("evaluate", "score clean and attacked test scenes");
  evaluate->add_option("-m,--model", model, "source or an adaptation variant");
  evaluate->add_flag("--ablation", ablation, "baseline / IAAM / full table under the ablation attack");
  evaluate->add_flag("--force", force, "accept artifacts built from a different scene config");
  CLI::App* report = app.add_subcommand("report", "markdown summary with IoU bars and feature scatters");
  std::string run_dir;
  report->add_option("run_dir", run_dir, "run directory")->required();
  for (CLI::App* sub : {gen, train, adapt, attack, evaluate}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (report->parsed()) {
      cmd_report(run_dir);
      return 0;
    }
    ExperimentConfig cfg = config_path.empty() ? default_config() : load_config(config_path);
    if (!output.empty()) cfg.output = output;
    if (!variant.empty()) apply_variant(cfg.adapt, variant);
    if (gen->parsed()) {
      cmd_generate(cfg);
    } else if (train->parsed()) {
      cmd_train_source(cfg);
    } else if (adapt->parsed()) {
      cmd_adapt(cfg);
    } else if (attack->parsed()) {
      cmd_attack(cfg, model);
    } else if (evaluate->parsed()) {
      if (ablation) {
        cmd_ablation(cfg, force);
      } else {
        cmd_evaluate(cfg, model, force);
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}

}  // namespace rpcss::cli
