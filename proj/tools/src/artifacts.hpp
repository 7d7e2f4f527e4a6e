#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "rpcss/scene.hpp"

namespace rpcss::cli {

/// Throws ArtifactError naming `path` when it does not exist.
void require_artifact(const std::filesystem::path& path);

/// `files` is a list of paths relative to `dir`; each is recorded with its
/// SHA-256 in dir/manifest.json.
void write_manifest(const std::filesystem::path& dir, nlohmann::ordered_json manifest,
                    const nlohmann::ordered_json& files);
nlohmann::ordered_json read_manifest(const std::filesystem::path& dir);

void check_scene_hash(const nlohmann::ordered_json& manifest, const std::string& expected,
                      const std::filesystem::path& dir, bool force);

/// Point clouds listed in the manifest whose path starts with `prefix`, in
/// manifest order.
std::vector<PointCloud> load_split(const std::filesystem::path& dir, const nlohmann::ordered_json& manifest,
                                   const std::string& prefix = "");

}  // namespace rpcss::cli
