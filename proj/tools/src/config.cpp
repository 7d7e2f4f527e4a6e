#include "rpcss/cli/config.hpp"

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include <array>
#include <type_traits>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "rpcss/error.hpp"

namespace rpcss::cli {

namespace {

std::string where(const std::string& origin, const YAML::Mark& m) {
  if (m.is_null()) return origin;
  return origin + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

class Reader {
 public:
  Reader(YAML::Node node, std::string path, const std::string& origin)
      : node_(std::move(node)), path_(std::move(path)), origin_(origin) {
    if (node_.IsDefined() && !node_.IsNull() && !node_.IsMap()) fail(node_, "expected a mapping");
  }

  template <class T>
  void get(const char* key, T& out) {
    const YAML::Node v = lookup(key);
    if (!v) return;
    read(v, full(key), out);
  }

  Reader child(const char* key) {
    const YAML::Node v = lookup(key);
    return Reader(v ? v : YAML::Node(), full(key), origin_);
  }

  void finish() const {
    if (!node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) {
        throw ConfigError(where(origin_, kv.first.Mark()) + ": unknown key '" + full(key.c_str()) + "'");
      }
    }
  }

 private:
  YAML::Node lookup(const char* key) {
    seen_.insert(key);
    if (!node_.IsMap()) return YAML::Node(YAML::NodeType::Undefined);
    return node_[key];
  }

  std::string full(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  [[noreturn]] void fail(const YAML::Node& v, const std::string& msg) const {
    throw ConfigError(where(origin_, v.Mark()) + ": " + (path_.empty() ? "" : path_ + ": ") + msg);
  }
  [[noreturn]] void fail(const YAML::Node& v, const std::string& key, const std::string& msg) const {
    throw ConfigError(where(origin_, v.Mark()) + ": " + key + ": " + msg);
  }

  template <class T>
  T scalar(const YAML::Node& v, const std::string& key, const char* what) const {
    if (!v.IsScalar()) fail(v, key, std::string("expected ") + what);
    try {
      return v.as<T>();
    } catch (const YAML::Exception&) {
      fail(v, key, std::string("expected ") + what + ", got '" + v.Scalar() + "'");
    }
  }

  void read(const YAML::Node& v, const std::string& key, double& out) const {
    out = scalar<double>(v, key, "a number");
    if (!std::isfinite(out)) fail(v, key, "must be finite");
  }
  void read(const YAML::Node& v, const std::string& key, bool& out) const { out = scalar<bool>(v, key, "true/false"); }
  void read(const YAML::Node& v, const std::string& key, std::string& out) const {
    out = scalar<std::string>(v, key, "a string");
  }
  void read(const YAML::Node& v, const std::string& key, std::filesystem::path& out) const {
    out = scalar<std::string>(v, key, "a path");
  }
  void read(const YAML::Node& v, const std::string& key, int& out) const { out = scalar<int>(v, key, "an integer"); }
  static_assert(std::is_same_v<std::size_t, std::uint64_t>);
  void read(const YAML::Node& v, const std::string& key, std::uint64_t& out) const {
    const auto s = scalar<std::string>(v, key, "a non-negative integer");
    if (s.empty() || s[0] == '-') fail(v, key, "expected a non-negative integer, got '" + s + "'");
    out = scalar<std::uint64_t>(v, key, "a non-negative integer");
  }
  void read(const YAML::Node& v, const std::string& key, AttackKind& out) const {
    try {
      out = parse_attack_kind(scalar<std::string>(v, key, "an attack name"));
    } catch (const ConfigError& e) {
      fail(v, key, e.what());
    }
  }
  void read(const YAML::Node& v, const std::string& key, GradNorm& out) const {
    try {
      out = parse_grad_norm(scalar<std::string>(v, key, "a normalisation name"));
    } catch (const ConfigError& e) {
      fail(v, key, e.what());
    }
  }
  void read(const YAML::Node& v, const std::string& key, CorruptionKind& out) const {
    try {
      out = parse_corruption(scalar<std::string>(v, key, "a corruption name"));
    } catch (const ConfigError& e) {
      fail(v, key, e.what());
    }
  }
  template <class T>
  void read(const YAML::Node& v, const std::string& key, std::vector<T>& out) const {
    if (!v.IsSequence()) fail(v, key, "expected a list");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      T item{};
      read(v[i], key + "[" + std::to_string(i) + "]", item);
      out.push_back(item);
    }
  }
  void read(const YAML::Node& v, const std::string& key, std::array<double, 3>& out) const {
    if (!v.IsSequence() || v.size() != 3) fail(v, key, "expected a list of 3 numbers");
    for (std::size_t i = 0; i < 3; ++i) read(v[i], key + "[" + std::to_string(i) + "]", out[i]);
  }

  YAML::Node node_;
  std::string path_;
  const std::string& origin_;
  std::set<std::string> seen_;
};

std::string hex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < n; ++i) {
    s += digits[d[i] >> 4];
    s += digits[d[i] & 15];
  }
  return s;
}

template <class T>
void emit_seq(YAML::Emitter& e, const char* key, const T& values) {
  e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (const auto& v : values) e << v;
  e << YAML::EndSeq;
}

void emit_scene(YAML::Emitter& e, const SceneSection& s) {
  const SceneConfig& sc = s.scene;
  e << YAML::Key << "scene" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "num_classes" << YAML::Value << sc.num_classes;
  e << YAML::Key << "points_per_scene" << YAML::Value << sc.points_per_scene;
  emit_seq(e, "class_frequency", sc.class_frequency);
  e << YAML::Key << "extent" << YAML::Value << sc.extent;
  e << YAML::Key << "source_scenes" << YAML::Value << s.source_scenes;
  e << YAML::Key << "target_scenes" << YAML::Value << s.target_scenes;
  e << YAML::Key << "validation_scenes" << YAML::Value << s.validation_scenes;
  e << YAML::Key << "test_scenes" << YAML::Value << s.test_scenes;
  e << YAML::Key << "shift" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "rotation_deg" << YAML::Value << sc.shift.rotation_deg;
  emit_seq(e, "scale", sc.shift.scale);
  e << YAML::Key << "dropout" << YAML::Value << sc.shift.dropout;
  e << YAML::Key << "jitter" << YAML::Value << sc.shift.jitter;
  e << YAML::EndMap;
  e << YAML::Key << "corruption" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << corruption_name(sc.corruption.kind);
  e << YAML::Key << "severity" << YAML::Value << sc.corruption.severity;
  e << YAML::EndMap;
  e << YAML::EndMap;
}

std::vector<std::string> kind_names(const std::vector<AttackKind>& kinds) {
  std::vector<std::string> out;
  for (AttackKind k : kinds) out.push_back(attack_kind_name(k));
  return out;
}

}  // namespace

AttackConfig AttackSection::attack(AttackKind kind, double alpha) const {
  AttackConfig a;
  a.kind = kind;
  a.alpha = alpha;
  a.iterations = iterations;
  a.grad_norm = grad_norm;
  a.epsilon = epsilon_scale > 0.0 ? epsilon_scale * alpha : 0.0;
  return a;
}

void ExperimentConfig::finalize() {
  scene.scene.seed = seed;
  train.seed = seed;
  adapt.seed = seed;
  model.num_classes = scene.scene.num_classes;
  scene.scene.validate();
  if (scene.source_scenes == 0 || scene.target_scenes == 0 || scene.test_scenes == 0) {
    throw ConfigError("scene: source_scenes, target_scenes and test_scenes must be > 0");
  }
  if (model.dim == 0 || model.neighbors == 0) throw ConfigError("model: dim and neighbors must be > 0");
  for (std::size_t h : model.hidden)
    if (h == 0) throw ConfigError("model.hidden: widths must be > 0");
  train.validate();
  adapt.validate();
  if (attack.kinds.empty() || attack.alphas.empty()) throw ConfigError("attack: kinds and alphas must be non-empty");
  if (!(attack.epsilon_scale == 0.0 || attack.epsilon_scale >= 1.0)) {
    throw ConfigError("attack.epsilon_scale must be 0 or >= 1");
  }
  for (double a : attack.alphas) attack.attack(AttackKind::pgd, a).validate();
  attack.attack(eval.ablation_kind, eval.ablation_alpha).validate();
  if (report.scatter_points == 0) throw ConfigError("report.scatter_points must be > 0");
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  DomainShift& s = cfg.scene.scene.shift;
  s.rotation_deg = 25.0;
  s.scale = {1.1, 1.1, 0.9};
  s.jitter = 0.02;
  cfg.scene.scene.corruption = {CorruptionKind::fog, 0.4};
  cfg.finalize();
  return cfg;
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(where(origin, e.mark) + ": " + e.msg);
  }
  ExperimentConfig cfg = default_config();
  Reader r(root, "", origin);
  r.get("seed", cfg.seed);
  r.get("output", cfg.output);

  Reader sc = r.child("scene");
  SceneConfig& scene = cfg.scene.scene;
  sc.get("num_classes", scene.num_classes);
  sc.get("points_per_scene", scene.points_per_scene);
  sc.get("class_frequency", scene.class_frequency);
  sc.get("extent", scene.extent);
  sc.get("source_scenes", cfg.scene.source_scenes);
  sc.get("target_scenes", cfg.scene.target_scenes);
  sc.get("validation_scenes", cfg.scene.validation_scenes);
  sc.get("test_scenes", cfg.scene.test_scenes);
  Reader shift = sc.child("shift");
  shift.get("rotation_deg", scene.shift.rotation_deg);
  shift.get("scale", scene.shift.scale);
  shift.get("dropout", scene.shift.dropout);
  shift.get("jitter", scene.shift.jitter);
  shift.finish();
  Reader corr = sc.child("corruption");
  corr.get("kind", scene.corruption.kind);
  corr.get("severity", scene.corruption.severity);
  corr.finish();
  sc.finish();

  Reader m = r.child("model");
  m.get("dim", cfg.model.dim);
  m.get("hidden", cfg.model.hidden);
  m.get("neighbors", cfg.model.neighbors);
  m.get("bias", cfg.model.bias);
  m.finish();

  Reader t = r.child("train");
  t.get("learning_rate", cfg.train.learning_rate);
  t.get("epochs", cfg.train.epochs);
  t.get("batch_scenes", cfg.train.batch_scenes);
  t.finish();

  AdaptConfig& a = cfg.adapt;
  Reader ad = r.child("adapt");
  ad.get("steps", a.steps);
  ad.get("threshold", a.threshold);
  ad.get("ema_rate", a.ema_rate);
  ad.get("lr_student", a.lr_student);
  ad.get("lr_flow", a.lr_flow);
  ad.get("lr_attention", a.lr_attention);
  ad.get("lr_projection", a.lr_projection);
  ad.get("enable_iaam", a.enable_iaam);
  ad.get("enable_qcmb", a.enable_qcmb);
  ad.get("eval_every", a.eval_every);
  Reader fl = ad.child("flow");
  fl.get("blocks", a.flow.blocks);
  fl.get("hidden", a.flow.hidden);
  fl.get("scale_clamp", a.flow.scale_clamp);
  fl.finish();
  Reader at = ad.child("attention");
  at.get("heads", a.attention_heads);
  at.get("head_dim", a.attention_head_dim);
  at.finish();
  Reader ot = ad.child("ot");
  ot.get("reg", a.ot.reg);
  ot.get("max_iters", a.ot.max_iters);
  ot.get("tol", a.ot.tol);
  ot.get("batch", a.ot_batch);
  ot.finish();
  Reader ov = ad.child("overlap");
  ov.get("gamma", a.overlap.gamma);
  ov.get("beta", a.overlap.beta);
  ov.finish();
  Reader q = ad.child("quality");
  q.get("k_base", a.quality.k_base);
  q.get("gamma", a.quality.gamma);
  q.get("select_fraction", a.quality.select_fraction);
  q.finish();
  Reader con = ad.child("contrast");
  con.get("tau", a.contrast.tau);
  con.get("lambda", a.contrast.lambda);
  con.get("positives", a.contrast.positives);
  con.get("negatives", a.contrast.negatives);
  con.finish();
  Reader bank = ad.child("bank");
  bank.get("slots", a.bank_slots);
  bank.get("projection_width", a.projection_width);
  bank.get("momentum", a.bank_momentum);
  bank.finish();
  ad.finish();

  Reader atk = r.child("attack");
  atk.get("kinds", cfg.attack.kinds);
  atk.get("alphas", cfg.attack.alphas);
  atk.get("iterations", cfg.attack.iterations);
  atk.get("grad_norm", cfg.attack.grad_norm);
  atk.get("epsilon_scale", cfg.attack.epsilon_scale);
  atk.finish();

  Reader ev = r.child("eval");
  ev.get("ablation_kind", cfg.eval.ablation_kind);
  ev.get("ablation_alpha", cfg.eval.ablation_alpha);
  ev.finish();

  Reader rep = r.child("report");
  rep.get("scatter_points", cfg.report.scatter_points);
  rep.finish();
  r.finish();

  try {
    cfg.finalize();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string scene_yaml(const ExperimentConfig& cfg) {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "seed" << YAML::Value << cfg.seed;
  emit_scene(e, cfg.scene);
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

std::string to_yaml(const ExperimentConfig& cfg) {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "seed" << YAML::Value << cfg.seed;
  e << YAML::Key << "output" << YAML::Value << cfg.output.string();
  emit_scene(e, cfg.scene);

  e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "dim" << YAML::Value << cfg.model.dim;
  emit_seq(e, "hidden", cfg.model.hidden);
  e << YAML::Key << "neighbors" << YAML::Value << cfg.model.neighbors;
  e << YAML::Key << "bias" << YAML::Value << cfg.model.bias;
  e << YAML::EndMap;

  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "learning_rate" << YAML::Value << cfg.train.learning_rate;
  e << YAML::Key << "epochs" << YAML::Value << cfg.train.epochs;
  e << YAML::Key << "batch_scenes" << YAML::Value << cfg.train.batch_scenes;
  e << YAML::EndMap;

  const AdaptConfig& a = cfg.adapt;
  e << YAML::Key << "adapt" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "steps" << YAML::Value << a.steps;
  e << YAML::Key << "threshold" << YAML::Value << a.threshold;
  e << YAML::Key << "ema_rate" << YAML::Value << a.ema_rate;
  e << YAML::Key << "lr_student" << YAML::Value << a.lr_student;
  e << YAML::Key << "lr_flow" << YAML::Value << a.lr_flow;
  e << YAML::Key << "lr_attention" << YAML::Value << a.lr_attention;
  e << YAML::Key << "lr_projection" << YAML::Value << a.lr_projection;
  e << YAML::Key << "enable_iaam" << YAML::Value << a.enable_iaam;
  e << YAML::Key << "enable_qcmb" << YAML::Value << a.enable_qcmb;
  e << YAML::Key << "eval_every" << YAML::Value << a.eval_every;
  e << YAML::Key << "flow" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "blocks" << YAML::Value << a.flow.blocks;
  e << YAML::Key << "hidden" << YAML::Value << a.flow.hidden;
  e << YAML::Key << "scale_clamp" << YAML::Value << a.flow.scale_clamp;
  e << YAML::EndMap;
  e << YAML::Key << "attention" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "heads" << YAML::Value << a.attention_heads;
  e << YAML::Key << "head_dim" << YAML::Value << a.attention_head_dim;
  e << YAML::EndMap;
  e << YAML::Key << "ot" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "reg" << YAML::Value << a.ot.reg;
  e << YAML::Key << "max_iters" << YAML::Value << a.ot.max_iters;
  e << YAML::Key << "tol" << YAML::Value << a.ot.tol;
  e << YAML::Key << "batch" << YAML::Value << a.ot_batch;
  e << YAML::EndMap;
  e << YAML::Key << "overlap" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "gamma" << YAML::Value << a.overlap.gamma;
  e << YAML::Key << "beta" << YAML::Value << a.overlap.beta;
  e << YAML::EndMap;
  e << YAML::Key << "quality" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "k_base" << YAML::Value << a.quality.k_base;
  e << YAML::Key << "gamma" << YAML::Value << a.quality.gamma;
  e << YAML::Key << "select_fraction" << YAML::Value << a.quality.select_fraction;
  e << YAML::EndMap;
  e << YAML::Key << "contrast" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "tau" << YAML::Value << a.contrast.tau;
  e << YAML::Key << "lambda" << YAML::Value << a.contrast.lambda;
  e << YAML::Key << "positives" << YAML::Value << a.contrast.positives;
  e << YAML::Key << "negatives" << YAML::Value << a.contrast.negatives;
  e << YAML::EndMap;
  e << YAML::Key << "bank" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "slots" << YAML::Value << a.bank_slots;
  e << YAML::Key << "projection_width" << YAML::Value << a.projection_width;
  e << YAML::Key << "momentum" << YAML::Value << a.bank_momentum;
  e << YAML::EndMap;
  e << YAML::EndMap;

  e << YAML::Key << "attack" << YAML::Value << YAML::BeginMap;
  emit_seq(e, "kinds", kind_names(cfg.attack.kinds));
  emit_seq(e, "alphas", cfg.attack.alphas);
  e << YAML::Key << "iterations" << YAML::Value << cfg.attack.iterations;
  e << YAML::Key << "grad_norm" << YAML::Value << grad_norm_name(cfg.attack.grad_norm);
  e << YAML::Key << "epsilon_scale" << YAML::Value << cfg.attack.epsilon_scale;
  e << YAML::EndMap;

  e << YAML::Key << "eval" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "ablation_kind" << YAML::Value << attack_kind_name(cfg.eval.ablation_kind);
  e << YAML::Key << "ablation_alpha" << YAML::Value << cfg.eval.ablation_alpha;
  e << YAML::EndMap;

  e << YAML::Key << "report" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "scatter_points" << YAML::Value << cfg.report.scatter_points;
  e << YAML::EndMap;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr)) {
    throw std::runtime_error("sha256 failed");
  }
  return hex(md, len);
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return sha256_hex(ss.str());
}

std::string config_hash(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.output.clear();
  return sha256_hex(to_yaml(c));
}
std::string scene_hash(const ExperimentConfig& cfg) { return sha256_hex(scene_yaml(cfg)); }

}  // namespace rpcss::cli
