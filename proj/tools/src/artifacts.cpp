#include "artifacts.hpp"

#include <spdlog/spdlog.h>

#include <fstream>

#include "rpcss/cli/commands.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace rpcss::cli {

void require_artifact(const fs::path& path) {
  if (!fs::exists(path)) throw ArtifactError("missing artifact: " + path.string());
}

void write_manifest(const fs::path& dir, json manifest, const json& files) {
  json entries = json::array();
  for (const auto& f : files) {
    const std::string rel = f.get<std::string>();
    entries.push_back({{"path", rel}, {"sha256", sha256_file(dir / rel)}});
  }
  manifest["files"] = entries;
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

json read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  require_artifact(path);
  std::ifstream is(path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ArtifactError("malformed manifest " + path.string() + ": " + e.what());
  }
}

void check_scene_hash(const json& manifest, const std::string& expected, const fs::path& dir, bool force) {
  const std::string got = manifest.value("scene_hash", "");
  if (got == expected) return;
  const std::string msg = "scene-config hash mismatch in " + dir.string() + " (artifact " + got.substr(0, 12) +
                          ", config " + expected.substr(0, 12) + ")";
  if (!force) throw ArtifactError(msg + "; regenerate or pass --force");
  spdlog::warn("{} (forced)", msg);
}

std::vector<PointCloud> load_split(const fs::path& dir, const json& manifest, const std::string& prefix) {
  std::vector<PointCloud> out;
  for (const auto& f : manifest.at("files")) {
    const std::string rel = f.at("path").get<std::string>();
    if (!rel.starts_with(prefix) || !rel.ends_with(".pcss")) continue;
    require_artifact(dir / rel);
    out.push_back(read_pcss(dir / rel));
  }
  return out;
}

}  // namespace rpcss::cli
