#include "rpcss/scene.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "rpcss/error.hpp"
#include "rpcss/knn.hpp"
#include "rpcss/nn.hpp"

namespace rpcss {

namespace {

constexpr double kTierHeight = 5.0;

enum class Primitive { ground, box, pole, blob };

struct Instance {
  double cx = 0, cy = 0, cz = 0;
  double hx = 0, hy = 0, height = 0, sigma = 0;
};

std::array<double, 3> sample_on_instance(Primitive kind, const Instance& in, double extent, double z_off,
                                         Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  switch (kind) {
    case Primitive::ground:
      return {extent * (2.0 * u(rng) - 1.0), extent * (2.0 * u(rng) - 1.0), z_off + 0.03 * gauss(rng)};
    case Primitive::pole: {
      const double a = 2.0 * std::numbers::pi * u(rng);
      const double r = 0.05 * std::abs(gauss(rng));
      return {in.cx + r * std::cos(a), in.cy + r * std::sin(a), z_off + 0.3 + in.height * u(rng)};
    }
    case Primitive::blob:
      return {in.cx + in.sigma * gauss(rng), in.cy + in.sigma * gauss(rng), z_off + in.cz + in.sigma * gauss(rng)};
    case Primitive::box: {
      // four side faces and the roof, chosen by area
      const double sx = 2.0 * in.hx * in.height, sy = 2.0 * in.hy * in.height, top = 4.0 * in.hx * in.hy;
      const double pick = u(rng) * (2.0 * sx + 2.0 * sy + top);
      const double base = z_off + 0.4;
      const double fx = 2.0 * u(rng) - 1.0, fz = u(rng);
      double x, y, z;
      if (pick < 2.0 * sx) {
        x = in.cx + fx * in.hx;
        y = in.cy + (pick < sx ? -in.hy : in.hy);
        z = base + fz * in.height;
      } else if (pick < 2.0 * sx + 2.0 * sy) {
        x = in.cx + (pick < 2.0 * sx + sy ? -in.hx : in.hx);
        y = in.cy + fx * in.hy;
        z = base + fz * in.height;
      } else {
        x = in.cx + fx * in.hx;
        y = in.cy + (2.0 * u(rng) - 1.0) * in.hy;
        z = base + in.height;
      }
      return {x + 0.01 * gauss(rng), y + 0.01 * gauss(rng), z + 0.01 * gauss(rng)};
    }
  }
  return {0, 0, 0};
}

std::vector<Instance> make_instances(Primitive kind, double extent, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto place = [&] { return 0.8 * extent * (2.0 * u(rng) - 1.0); };
  std::vector<Instance> out;
  switch (kind) {
    case Primitive::ground:
      out.push_back({});
      break;
    case Primitive::box:
      for (int i = 0; i < 3; ++i) out.push_back({place(), place(), 0, 0.8 + 0.7 * u(rng), 0.8 + 0.7 * u(rng), 1.0 + u(rng), 0});
      break;
    case Primitive::pole:
      for (int i = 0; i < 4; ++i) out.push_back({place(), place(), 0, 0, 0, 3.5 + 1.0 * u(rng), 0});
      break;
    case Primitive::blob:
      for (int i = 0; i < 3; ++i) out.push_back({place(), place(), 1.8 + 1.2 * u(rng), 0, 0, 0, 0.3 + 0.2 * u(rng)});
      break;
  }
  return out;
}

PointCloud subset(const PointCloud& pc, const std::vector<std::size_t>& keep) {
  PointCloud out;
  out.num_classes = pc.num_classes;
  out.domain = pc.domain;
  out.scene_id = pc.scene_id;
  out.points = Tensor(Shape{keep.size(), 3});
  out.labels.reserve(keep.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    for (std::size_t c = 0; c < 3; ++c) out.points.at(r, c) = pc.points.at(keep[r], c);
    out.labels.push_back(pc.labels[keep[r]]);
  }
  return out;
}

// Adds `extra` [k,3] points labelled by their nearest point in `pc`.
PointCloud append_labelled_by_nearest(const PointCloud& pc, const Tensor& extra) {
  if (extra.rows() == 0) return pc;
  const std::vector<std::size_t> nn = nearest_indices(extra, pc.points);
  PointCloud out = pc;
  const std::size_t n = pc.size(), k = extra.rows();
  std::vector<double> data(pc.points.data().begin(), pc.points.data().end());
  data.insert(data.end(), extra.data().begin(), extra.data().end());
  out.points = Tensor(Shape{n + k, 3}, std::move(data));
  for (std::size_t i = 0; i < k; ++i) out.labels.push_back(pc.labels[nn[i]]);
  return out;
}

double horizontal_range(const Tensor& p, std::size_t i) { return std::hypot(p.at(i, 0), p.at(i, 1)); }

double max_range(const Tensor& p) {
  double r = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) r = std::max(r, horizontal_range(p, i));
  return r > 0.0 ? r : 1.0;
}

// Keeps points whose coupled uniform draw clears their drop probability; at
// least one point always survives.
PointCloud drop_points(const PointCloud& pc, const std::vector<double>& drop_prob, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (u(rng) >= drop_prob[i]) keep.push_back(i);
  }
  if (keep.empty()) keep.push_back(0);
  return subset(pc, keep);
}

void write_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  os.write(b, 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("pcss: truncated file");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace

void PointCloud::validate() const {
  if (labels.empty()) throw ShapeError("point cloud: N must be > 0");
  if (points.shape() != Shape{labels.size(), 3}) {
    throw ShapeError("point cloud: points " + shape_str(points.shape()) + " for " + std::to_string(labels.size()) +
                     " labels");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ShapeError("point cloud: label " + std::to_string(y) + " out of range");
  }
  if (!points.all_finite()) throw NumericError("point cloud: non-finite coordinate");
}

bool DomainShift::is_identity() const noexcept {
  return rotation_deg == 0.0 && scale == std::array<double, 3>{1.0, 1.0, 1.0} && dropout == 0.0 && jitter == 0.0;
}

void DomainShift::validate() const {
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("shift.dropout must be in [0,1)");
  if (!(jitter >= 0.0)) throw ConfigError("shift.jitter must be >= 0");
  for (double s : scale)
    if (!(s > 0.0)) throw ConfigError("shift.scale entries must be > 0");
}

CorruptionKind parse_corruption(const std::string& name) {
  if (name == "none") return CorruptionKind::none;
  if (name == "fog") return CorruptionKind::fog;
  if (name == "snow") return CorruptionKind::snow;
  if (name == "rain") return CorruptionKind::rain;
  throw ConfigError("unknown corruption kind '" + name + "'");
}

std::string corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::fog: return "fog";
    case CorruptionKind::snow: return "snow";
    case CorruptionKind::rain: return "rain";
  }
  return "none";
}

std::vector<double> SceneConfig::frequencies() const {
  if (class_frequency.empty()) return std::vector<double>(static_cast<std::size_t>(num_classes), 1.0 / num_classes);
  return class_frequency;
}

void SceneConfig::validate() const {
  if (num_classes < 2) throw ConfigError("scene.num_classes must be >= 2");
  if (points_per_scene == 0) throw ConfigError("scene.points_per_scene must be > 0");
  if (!(extent > 0.0)) throw ConfigError("scene.extent must be > 0");
  if (!class_frequency.empty()) {
    if (class_frequency.size() != static_cast<std::size_t>(num_classes)) {
      throw ConfigError("scene.class_frequency needs one weight per class");
    }
    double s = 0.0;
    for (double f : class_frequency) {
      if (!(f >= 0.0)) throw ConfigError("scene.class_frequency weights must be >= 0");
      s += f;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("scene.class_frequency must sum to 1");
  }
  shift.validate();
  if (!(corruption.severity >= 0.0 && corruption.severity <= 1.0)) {
    throw ConfigError("scene.corruption.severity must be in [0,1]");
  }
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  // splitmix64 finaliser over the combined words
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

PointCloud generate_scene(const SceneConfig& cfg, std::uint32_t scene_id) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0x5CE7E000ULL + scene_id));
  const std::vector<double> freq = cfg.frequencies();
  const auto C = static_cast<std::size_t>(cfg.num_classes);

  std::vector<std::vector<Instance>> instances(C);
  for (std::size_t c = 0; c < C; ++c) instances[c] = make_instances(static_cast<Primitive>(c % 4), cfg.extent, rng);

  std::discrete_distribution<int> pick_class(freq.begin(), freq.end());
  PointCloud pc;
  pc.num_classes = cfg.num_classes;
  pc.domain = Domain::source;
  pc.scene_id = scene_id;
  pc.points = Tensor(Shape{cfg.points_per_scene, 3});
  pc.labels.resize(cfg.points_per_scene);
  for (std::size_t i = 0; i < cfg.points_per_scene; ++i) {
    const int c = pick_class(rng);
    const auto& inst = instances[static_cast<std::size_t>(c)];
    std::uniform_int_distribution<std::size_t> pick_inst(0, inst.size() - 1);
    const Instance& chosen = inst[pick_inst(rng)];
    const auto p = sample_on_instance(static_cast<Primitive>(c % 4), chosen, cfg.extent, kTierHeight * (c / 4), rng);
    for (std::size_t d = 0; d < 3; ++d) pc.points.at(i, d) = p[d];
    pc.labels[i] = c;
  }
  return pc;
}

PointCloud generate_target_scene(const SceneConfig& cfg, std::uint32_t scene_id) {
  PointCloud pc = generate_scene(cfg, scene_id);
  pc = apply_domain_shift(pc, cfg.shift, derive_seed(cfg.seed, 0x5A1F7000ULL + scene_id));
  pc = apply_corruption(pc, cfg.corruption.kind, cfg.corruption.severity,
                        derive_seed(cfg.seed, 0xC0AA7000ULL + scene_id));
  pc.domain = Domain::target;
  return pc;
}

PointCloud apply_domain_shift(const PointCloud& pc, const DomainShift& shift, std::uint64_t seed) {
  shift.validate();
  if (shift.is_identity()) return pc;
  Rng rng(derive_seed(seed, 0x5417F7ULL));
  PointCloud out = pc;
  const double a = shift.rotation_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out.points.at(i, 0), y = out.points.at(i, 1), z = out.points.at(i, 2);
    out.points.at(i, 0) = shift.scale[0] * (ca * x - sa * y);
    out.points.at(i, 1) = shift.scale[1] * (sa * x + ca * y);
    out.points.at(i, 2) = shift.scale[2] * z;
  }
  if (shift.dropout > 0.0) {
    out = drop_points(out, std::vector<double>(out.size(), shift.dropout), rng);
  }
  if (shift.jitter > 0.0) {
    std::normal_distribution<double> noise(0.0, shift.jitter);
    for (double& v : out.points.data()) v += noise(rng);
  }
  return out;
}

PointCloud apply_corruption(const PointCloud& pc, CorruptionKind kind, double severity, std::uint64_t seed) {
  if (!(severity >= 0.0 && severity <= 1.0)) throw ConfigError("corruption severity must be in [0,1]");
  if (kind == CorruptionKind::none || severity == 0.0) return pc;

  // Independent, severity-free streams so draws are coupled across severities.
  Rng drop_rng(derive_seed(seed, 0xD209ULL));
  Rng add_rng(derive_seed(seed, 0xADD0ULL));
  Rng jitter_rng(derive_seed(seed, 0x717EULL));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double r_max = max_range(pc.points);
  const auto n = static_cast<double>(pc.size());

  switch (kind) {
    case CorruptionKind::fog: {
      std::vector<double> p(pc.size());
      for (std::size_t i = 0; i < pc.size(); ++i) p[i] = 0.9 * severity * horizontal_range(pc.points, i) / r_max;
      PointCloud kept = drop_points(pc, p, drop_rng);
      const auto extra = static_cast<std::size_t>(std::lround(0.1 * severity * n));
      // backscatter clutter close to the sensor
      Tensor clutter(Shape{extra, 3});
      for (std::size_t i = 0; i < extra; ++i) {
        const double ang = 2.0 * std::numbers::pi * u(add_rng), rad = 3.0 * std::sqrt(u(add_rng));
        clutter.at(i, 0) = rad * std::cos(ang);
        clutter.at(i, 1) = rad * std::sin(ang);
        clutter.at(i, 2) = 0.2 + 1.8 * u(add_rng);
      }
      return append_labelled_by_nearest(kept, clutter);
    }
    case CorruptionKind::snow: {
      PointCloud out = pc;
      for (double& v : out.points.data()) v += 0.03 * severity * gauss(jitter_rng);
      const auto extra = static_cast<std::size_t>(std::lround(0.2 * severity * n)) + 1;
      const std::size_t clusters = 1 + extra / 8;
      std::vector<std::array<double, 3>> centres(clusters);
      const double lo = -r_max / std::numbers::sqrt2, span = 2.0 * r_max / std::numbers::sqrt2;
      for (auto& c : centres) c = {lo + span * u(add_rng), lo + span * u(add_rng), 0.5 + 3.5 * u(add_rng)};
      Tensor flakes(Shape{extra, 3});
      for (std::size_t i = 0; i < extra; ++i) {
        const auto& c = centres[i % clusters];
        for (std::size_t d = 0; d < 3; ++d) flakes.at(i, d) = c[d] + 0.15 * gauss(add_rng);
      }
      return append_labelled_by_nearest(out, flakes);
    }
    case CorruptionKind::rain: {
      std::vector<double> p(pc.size());
      for (std::size_t i = 0; i < pc.size(); ++i) p[i] = 0.4 * severity * horizontal_range(pc.points, i) / r_max;
      PointCloud out = drop_points(pc, p, drop_rng);
      for (std::size_t i = 0; i < out.size(); ++i) {
        out.points.at(i, 0) += 0.01 * severity * gauss(jitter_rng);
        out.points.at(i, 1) += 0.01 * severity * gauss(jitter_rng);
        out.points.at(i, 2) += 0.12 * severity * gauss(jitter_rng);
      }
      return out;
    }
    case CorruptionKind::none:
      break;
  }
  return pc;
}

double chamfer_distance(const Tensor& a, const Tensor& b) {
  auto one_way = [](const Tensor& from, const Tensor& to) {
    const std::vector<std::size_t> nn = nearest_indices(from, to);
    double s = 0.0;
    for (std::size_t i = 0; i < from.rows(); ++i) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < from.cols(); ++c) {
        const double diff = from.at(i, c) - to.at(nn[i], c);
        d2 += diff * diff;
      }
      s += std::sqrt(d2);
    }
    return s / static_cast<double>(from.rows());
  };
  return one_way(a, b) + one_way(b, a);
}

void write_pcss(const std::filesystem::path& path, const PointCloud& pc) {
  pc.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("PCSS", 4);
  write_u32(os, 1);
  write_u32(os, static_cast<std::uint32_t>(pc.size()));
  write_u32(os, static_cast<std::uint32_t>(pc.num_classes));
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (std::size_t d = 0; d < 3; ++d) write_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(pc.points.at(i, d))));
    const auto label = static_cast<std::uint16_t>(pc.labels[i]);
    const char b[2] = {static_cast<char>(label), static_cast<char>(label >> 8)};
    os.write(b, 2);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

PointCloud read_pcss(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "PCSS") throw FormatError("pcss: bad magic in " + path.string());
  if (read_u32(is) != 1) throw FormatError("pcss: unsupported version in " + path.string());
  const std::uint32_t n = read_u32(is);
  const std::uint32_t c = read_u32(is);
  PointCloud pc;
  pc.num_classes = static_cast<int>(c);
  pc.points = Tensor(Shape{n, 3});
  pc.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < 3; ++d) pc.points.at(i, d) = std::bit_cast<float>(read_u32(is));
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) throw FormatError("pcss: truncated file " + path.string());
    pc.labels[i] = static_cast<int>(b[0] | (b[1] << 8));
  }
  pc.validate();
  return pc;
}

void write_csv(const std::filesystem::path& path, const PointCloud& pc) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.precision(9);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    os << pc.points.at(i, 0) << ',' << pc.points.at(i, 1) << ',' << pc.points.at(i, 2) << ',' << pc.labels[i] << '\n';
  }
}

}  // namespace rpcss
