#include "rpcss/cli/commands.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "artifacts.hpp"
#include "rpcss/checkpoint.hpp"
#include "rpcss/error.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace rpcss::cli {

namespace {

constexpr std::uint32_t kTargetBase = 1000;
constexpr std::uint32_t kValidationBase = 2000;
constexpr std::uint32_t kTestBase = 3000;

std::string scene_file(std::size_t i) { return fmt::format("scene_{:04d}.pcss", i); }

json base_manifest(const char* command, const ExperimentConfig& cfg) {
  json m;
  m["command"] = command;
  m["config_hash"] = config_hash(cfg);
  m["scene_hash"] = scene_hash(cfg);
  m["seed"] = cfg.seed;
  return m;
}

void write_split(const fs::path& dir, const std::vector<PointCloud>& scenes, json& files) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    write_pcss(dir / scene_file(i), scenes[i]);
    files.push_back(dir.filename().string() + "/" + scene_file(i));
  }
}

SegModel load_model(const RunLayout& run, const std::string& model) {
  const fs::path path = run.checkpoint(model);
  require_artifact(path);
  return unpack_model(load_checkpoint(path));
}

json read_checked(const fs::path& dir, const ExperimentConfig& cfg, bool force) {
  json m = read_manifest(dir);
  check_scene_hash(m, scene_hash(cfg), dir, force);
  return m;
}

std::string alpha_tag(double alpha) { return fmt::format("{:.2f}", alpha); }

RobustnessReport score(const SegModel& model, const std::vector<PointCloud>& clean,
                       const std::vector<PointCloud>& adv, const AttackConfig& attack) {
  const MiouResult c = compute_miou(confusion_on(model, clean));
  const MiouResult a = compute_miou(confusion_on(model, adv));
  RobustnessReport r;
  r.attack = attack;
  r.miou_clean = c.miou;
  r.miou_adv = a.miou;
  r.robustness_drop = robustness_drop(c.miou, a.miou);
  r.iou_clean = c.per_class;
  r.iou_adv = a.per_class;
  return r;
}

std::string pct(double v) { return std::isnan(v) ? "-" : fmt::format("{:.2f}", 100.0 * v); }

void write_classwise(const fs::path& path, const std::vector<std::pair<std::string, RobustnessReport>>& rows,
                     const std::string& title) {
  std::ofstream os(path);
  os << "# " << title << "\n\n| condition | mIoU |";
  const std::size_t C = rows.empty() ? 0 : rows.front().second.iou_clean.size();
  for (std::size_t c = 0; c < C; ++c) os << " class " << c << " |";
  os << " rb.dr (%) |\n|---|---|";
  for (std::size_t c = 0; c < C; ++c) os << "---|";
  os << "---|\n";
  for (const auto& [name, r] : rows) {
    os << "| " << name << " | " << pct(r.miou_adv) << " |";
    for (std::size_t c = 0; c < C; ++c) os << " " << pct(r.iou_adv[c]) << " |";
    os << " " << pct(r.robustness_drop) << " |\n";
  }
}

json condition_json(const RunLayout& run, const std::string& model, const fs::path& adv_dir,
                    const RobustnessReport& r) {
  json j;
  j["model"] = model;
  j["checkpoint"] = fs::relative(run.checkpoint(model), run.root).generic_string();
  j["adversarial"] = fs::relative(adv_dir, run.root).generic_string();
  j["report"] = json::parse(report_to_json(r));
  return j;
}

RobustnessReport evaluate_condition(const ExperimentConfig& cfg, const RunLayout& run, const std::string& model,
                                    const SegModel& net, const std::vector<PointCloud>& test, AttackKind kind,
                                    double alpha, bool force) {
  const fs::path dir = run.attack(model, kind, alpha);
  const json m = read_checked(dir, cfg, force);
  if (m.at("checkpoint_sha256") != sha256_file(run.checkpoint(model))) {
    const std::string msg = dir.string() + " was produced by a different checkpoint of '" + model + "'";
    if (!force) throw ArtifactError(msg);
    spdlog::warn("{} (forced)", msg);
  }
  const std::vector<PointCloud> adv = load_split(dir, m);
  const RobustnessReport r = score(net, test, adv, cfg.attack.attack(kind, alpha));
  std::ofstream(run.eval(model) / fmt::format("{}_a{}.json", attack_kind_name(kind), alpha_tag(alpha)))
      << condition_json(run, model, dir, r).dump(2) << "\n";
  return r;
}

bool up_to_date(const fs::path& dir, const std::string& hash) {
  if (!fs::exists(dir / "manifest.json")) return false;
  return read_manifest(dir).value("config_hash", "") == hash;
}

}  // namespace

fs::path RunLayout::attack(const std::string& model, AttackKind kind, double alpha) const {
  return root / "attack" / model / fmt::format("{}_a{}", attack_kind_name(kind), alpha_tag(alpha));
}

fs::path RunLayout::checkpoint(const std::string& model) const {
  if (model == "source") return source() / "model.segm";
  return adapt(model) / "model.segm";
}

std::string variant_name(const AdaptConfig& cfg) {
  if (cfg.enable_iaam && cfg.enable_qcmb) return "full";
  if (cfg.enable_iaam) return "iaam";
  if (cfg.enable_qcmb) return "qcmb";
  return "baseline";
}

void apply_variant(AdaptConfig& cfg, const std::string& variant) {
  if (variant == "full") {
    cfg.enable_iaam = cfg.enable_qcmb = true;
  } else if (variant == "iaam") {
    cfg.enable_iaam = true;
    cfg.enable_qcmb = false;
  } else if (variant == "qcmb") {
    cfg.enable_iaam = false;
    cfg.enable_qcmb = true;
  } else if (variant == "baseline") {
    cfg.enable_iaam = cfg.enable_qcmb = false;
  } else {
    throw ConfigError("unknown adaptation variant '" + variant + "' (baseline, iaam, qcmb, full)");
  }
}

fs::path cmd_generate(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.output};
  const SceneConfig& sc = cfg.scene.scene;
  json m = base_manifest("generate", cfg);
  json files = json::array();
  json counts;
  const auto split = [&](const char* name, std::size_t n, auto&& make) {
    std::vector<PointCloud> scenes;
    for (std::size_t i = 0; i < n; ++i) scenes.push_back(make(static_cast<std::uint32_t>(i)));
    write_split(run.data() / name, scenes, files);
    counts[name] = n;
  };
  split("source", cfg.scene.source_scenes, [&](std::uint32_t i) { return generate_scene(sc, i); });
  split("target", cfg.scene.target_scenes, [&](std::uint32_t i) { return generate_target_scene(sc, kTargetBase + i); });
  split("validation", cfg.scene.validation_scenes,
        [&](std::uint32_t i) { return generate_target_scene(sc, kValidationBase + i); });
  split("test", cfg.scene.test_scenes, [&](std::uint32_t i) { return generate_target_scene(sc, kTestBase + i); });
  m["counts"] = counts;
  write_manifest(run.data(), m, files);
  std::ofstream(run.root / "config.yaml") << to_yaml(cfg);
  spdlog::info("generated {} source, {} target, {} validation and {} test scenes in {}", cfg.scene.source_scenes,
               cfg.scene.target_scenes, cfg.scene.validation_scenes, cfg.scene.test_scenes, run.data().string());
  return run.data();
}

fs::path cmd_train_source(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.output};
  const json data = read_checked(run.data(), cfg, false);
  const std::vector<PointCloud> source = load_split(run.data(), data, "source/");
  SegModel model(cfg.model, cfg.seed);
  model.fit_input_normalization(source);
  spdlog::info("training on {} source scenes for {} epochs", source.size(), cfg.train.epochs);
  const TrainResult tr = train_source(model, source, cfg.train);

  const fs::path dir = run.source();
  fs::create_directories(dir);
  save_checkpoint(dir / "model.segm", pack_model(model));
  {
    std::ofstream os(dir / "loss.csv");
    os.precision(10);
    os << "epoch,loss\n";
    for (std::size_t e = 0; e < tr.epoch_loss.size(); ++e) os << e << ',' << tr.epoch_loss[e] << '\n';
  }
  json m = base_manifest("train-source", cfg);
  m["data_manifest_sha256"] = sha256_file(run.data() / "manifest.json");
  write_manifest(dir, m, json::array({"model.segm", "loss.csv"}));
  spdlog::info("final epoch loss {:.4f}", tr.epoch_loss.empty() ? 0.0 : tr.epoch_loss.back());
  return dir;
}

fs::path cmd_adapt(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.output};
  const json data = read_checked(run.data(), cfg, false);
  read_checked(run.source(), cfg, false);
  const SegModel model = load_model(run, "source");
  const auto source = load_split(run.data(), data, "source/");
  const auto target = load_split(run.data(), data, "target/");
  const auto validation = load_split(run.data(), data, "validation/");
  const std::string variant = variant_name(cfg.adapt);
  spdlog::info("adapting ({}) for {} steps", variant, cfg.adapt.steps);
  const AdaptResult res = adapt(model, source, target, cfg.adapt, validation);

  const fs::path dir = run.adapt(variant);
  fs::create_directories(dir);
  Checkpoint ckpt = pack_model(res.student);
  if (res.flow) pack_flow(ckpt, *res.flow);
  if (res.attention) pack_attention(ckpt, *res.attention);
  if (res.projection) pack_projection(ckpt, *res.projection);
  if (res.bank) pack_bank(ckpt, *res.bank);
  save_checkpoint(dir / "model.segm", ckpt);
  {
    std::ofstream os(dir / "trace.csv");
    res.trace.write_csv(os);
  }
  json m = base_manifest("adapt", cfg);
  m["variant"] = variant;
  m["source_checkpoint_sha256"] = sha256_file(run.checkpoint("source"));
  write_manifest(dir, m, json::array({"model.segm", "trace.csv"}));
  if (!res.trace.records.empty() && res.trace.records.back().val_miou) {
    spdlog::info("validation mIoU after adaptation {:.4f}", *res.trace.records.back().val_miou);
  }
  return dir;
}

fs::path attack_one(const ExperimentConfig& cfg, const std::string& model, AttackKind kind, double alpha) {
  const RunLayout run{cfg.output};
  const json data = read_checked(run.data(), cfg, false);
  const SegModel net = load_model(run, model);
  const auto test = load_split(run.data(), data, "test/");
  const AttackConfig ac = cfg.attack.attack(kind, alpha);
  ac.validate();
  std::vector<PointCloud> adv;
  for (const PointCloud& pc : test) adv.push_back(run_attack(net, pc, pc.labels, ac));

  const fs::path dir = run.attack(model, kind, alpha);
  fs::remove_all(dir);
  json files = json::array();
  fs::create_directories(dir);
  for (std::size_t i = 0; i < adv.size(); ++i) {
    write_pcss(dir / scene_file(i), adv[i]);
    files.push_back(scene_file(i));
  }
  json m = base_manifest("attack", cfg);
  m["model"] = model;
  m["checkpoint_sha256"] = sha256_file(run.checkpoint(model));
  m["attack"] = json::parse(report_to_json(RobustnessReport{ac, 0, 0, 0, {}, {}}));
  m["attack"].erase("miou_clean");
  m["attack"].erase("miou_adv");
  m["attack"].erase("robustness_drop");
  m["attack"].erase("per_class");
  write_manifest(dir, m, files);
  spdlog::info("{} alpha={} against '{}': {} scenes -> {}", attack_kind_name(kind), alpha, model, adv.size(),
               dir.string());
  return dir;
}

std::vector<fs::path> cmd_attack(const ExperimentConfig& cfg, const std::string& model) {
  std::vector<fs::path> out;
  for (AttackKind kind : cfg.attack.kinds)
    for (double alpha : cfg.attack.alphas) out.push_back(attack_one(cfg, model, kind, alpha));
  return out;
}

fs::path cmd_evaluate(const ExperimentConfig& cfg, const std::string& model, bool force) {
  const RunLayout run{cfg.output};
  const json data = read_checked(run.data(), cfg, force);
  const fs::path ckpt_dir = model == "source" ? run.source() : run.adapt(model);
  read_checked(ckpt_dir, cfg, force);
  const SegModel net = load_model(run, model);
  const auto test = load_split(run.data(), data, "test/");
  const fs::path dir = run.eval(model);
  fs::create_directories(dir);

  std::vector<std::pair<std::string, RobustnessReport>> rows;
  json files = json::array();
  for (AttackKind kind : cfg.attack.kinds)
    for (double alpha : cfg.attack.alphas) {
      const RobustnessReport r = evaluate_condition(cfg, run, model, net, test, kind, alpha, force);
      if (rows.empty()) {
        RobustnessReport clean = r;
        clean.miou_adv = r.miou_clean;
        clean.iou_adv = r.iou_clean;
        clean.robustness_drop = 0.0;
        rows.emplace_back("clean", clean);
      }
      rows.emplace_back(fmt::format("{} a={}", attack_kind_name(kind), alpha_tag(alpha)), r);
      files.push_back(fmt::format("{}_a{}.json", attack_kind_name(kind), alpha_tag(alpha)));
      spdlog::info("{} {} alpha={}: clean {:.4f} adv {:.4f} drop {:.2f}%", model, attack_kind_name(kind), alpha,
                   r.miou_clean, r.miou_adv, 100.0 * r.robustness_drop);
    }
  write_classwise(dir / "classwise.md", rows, "Class-wise IoU (%) of '" + model + "'");
  files.push_back("classwise.md");
  write_manifest(dir, base_manifest("evaluate", cfg), files);
  return dir;
}

fs::path cmd_ablation(const ExperimentConfig& cfg, bool force) {
  const RunLayout run{cfg.output};
  const AttackKind kind = cfg.eval.ablation_kind;
  const double alpha = cfg.eval.ablation_alpha;
  const json data = read_checked(run.data(), cfg, force);
  const auto test = load_split(run.data(), data, "test/");
  const char* variants[] = {"baseline", "iaam", "full"};
  const char* labels[] = {"baseline", "IAAM", "IAAM + QC-MB"};
  std::vector<RobustnessReport> reports;
  for (const char* v : variants) {
    ExperimentConfig vc = cfg;
    apply_variant(vc.adapt, v);
    if (!up_to_date(run.adapt(v), config_hash(vc))) cmd_adapt(vc);
    const fs::path adir = run.attack(v, kind, alpha);
    if (!up_to_date(adir, config_hash(vc)) ||
        read_manifest(adir).at("checkpoint_sha256") != sha256_file(run.checkpoint(v))) {
      attack_one(vc, v, kind, alpha);
    }
    fs::create_directories(run.eval(v));
    reports.push_back(evaluate_condition(vc, run, v, load_model(run, v), test, kind, alpha, force));
  }

  const fs::path dir = run.root / "eval";
  json rows = json::array();
  std::ostringstream md;
  md << "# Ablation (" << attack_kind_name(kind) << ", alpha = " << alpha_tag(alpha) << ")\n\n"
     << "| variant | condition | mIoU (%) | rb.dr (%) |\n|---|---|---|---|\n";
  for (int attacked = 0; attacked < 2; ++attacked)
    for (std::size_t i = 0; i < 3; ++i) {
      const RobustnessReport& r = reports[i];
      const double miou = attacked ? r.miou_adv : r.miou_clean;
      md << "| " << labels[i] << " | " << (attacked ? "attacked" : "clean") << " | " << pct(miou) << " | "
         << (attacked ? pct(r.robustness_drop) : std::string("-")) << " |\n";
      json row;
      row["variant"] = variants[i];
      row["attacked"] = attacked == 1;
      row["miou"] = miou;
      if (attacked) row["robustness_drop"] = r.robustness_drop;
      rows.push_back(row);
    }
  std::ofstream(dir / "ablation.md") << md.str();
  json out;
  out["attack"] = attack_kind_name(kind);
  out["alpha"] = alpha;
  out["scene_hash"] = scene_hash(cfg);
  out["rows"] = rows;
  std::ofstream(dir / "ablation.json") << out.dump(2) << "\n";
  spdlog::info("ablation table written to {}", (dir / "ablation.md").string());
  return dir / "ablation.md";
}

}  // namespace rpcss::cli
