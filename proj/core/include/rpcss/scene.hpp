#pragma once

// Synthetic labelled point-cloud scenes, domain shifts and weather-style
// corruptions, plus the PCSS binary and CSV exporters.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rpcss/tensor.hpp"

namespace rpcss {

enum class Domain : std::uint8_t { source, target };

struct PointCloud {
  Tensor points;            // [N,3], meters
  std::vector<int> labels;  // N ids in [0, num_classes)
  int num_classes = 0;
  Domain domain = Domain::source;
  std::uint32_t scene_id = 0;

  std::size_t size() const noexcept { return labels.size(); }
  /// Throws if any type invariant is violated.
  void validate() const;
  bool operator==(const PointCloud&) const = default;
};

struct DomainShift {
  double rotation_deg = 0.0;  // about +z
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  double dropout = 0.0;  // in [0,1)
  double jitter = 0.0;   // Gaussian sigma, meters

  bool is_identity() const noexcept;
  void validate() const;
};

enum class CorruptionKind { none, fog, snow, rain };

CorruptionKind parse_corruption(const std::string& name);
std::string corruption_name(CorruptionKind kind);

struct Corruption {
  CorruptionKind kind = CorruptionKind::none;
  double severity = 0.0;  // in [0,1]
};

struct SceneConfig {
  int num_classes = 4;
  std::size_t points_per_scene = 512;
  /// Empty means uniform.
  std::vector<double> class_frequency;
  /// Half-width of the square scene footprint, meters.
  double extent = 10.0;
  DomainShift shift;
  Corruption corruption;
  std::uint64_t seed = 0;

  std::vector<double> frequencies() const;
  void validate() const;
};

/// Clean source-geometry scene. Each class lives on its own parametric
/// primitive (ground plane, raised boxes, poles, blobs; cycling with a height
/// offset when num_classes > 4). Deterministic in cfg.seed.
PointCloud generate_scene(const SceneConfig& cfg, std::uint32_t scene_id = 0);

/// generate_scene followed by the configured domain shift and corruption,
/// tagged as a target-domain scene.
PointCloud generate_target_scene(const SceneConfig& cfg, std::uint32_t scene_id = 0);

/// Rotation about z, per-axis scale, uniform dropout, Gaussian jitter (in that
/// order). Labels of surviving points are preserved.
PointCloud apply_domain_shift(const PointCloud& pc, const DomainShift& shift, std::uint64_t seed);

/// Severity 0 is the identity. Draws are coupled across severities for a fixed
/// seed, so dropped-point sets grow monotonically with severity.
PointCloud apply_corruption(const PointCloud& pc, CorruptionKind kind, double severity, std::uint64_t seed);

/// Symmetric Chamfer distance: mean nearest-neighbour Euclidean distance from
/// a to b plus from b to a.
double chamfer_distance(const Tensor& a, const Tensor& b);

/// Little-endian "PCSS" v1: magic, u32 version, u32 N, u32 C, then N x
/// (f32 x, f32 y, f32 z, u16 label). Domain and scene id are not stored.
void write_pcss(const std::filesystem::path& path, const PointCloud& pc);
PointCloud read_pcss(const std::filesystem::path& path);

/// One "x,y,z,label" line per point.
void write_csv(const std::filesystem::path& path, const PointCloud& pc);

/// Deterministic stream seed derived from a base seed and a tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace rpcss
