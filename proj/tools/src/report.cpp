#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>

#include "artifacts.hpp"
#include "rpcss/checkpoint.hpp"
#include "rpcss/cli/commands.hpp"
#include "rpcss/error.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace rpcss::cli {

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

const char* color(int c) { return kPalette[static_cast<std::size_t>(c) % std::size(kPalette)]; }

struct Condition {
  std::string name;  // eval/<model>/<file stem>
  json doc;
  RobustnessReport report;
};

std::vector<Condition> collect(const fs::path& run_dir) {
  std::vector<fs::path> paths;
  const fs::path eval = run_dir / "eval";
  if (fs::is_directory(eval)) {
    for (const auto& model : fs::directory_iterator(eval)) {
      if (!model.is_directory()) continue;
      for (const auto& f : fs::directory_iterator(model.path()))
        if (f.path().extension() == ".json" && f.path().filename() != "manifest.json") paths.push_back(f.path());
    }
  }
  std::sort(paths.begin(), paths.end());
  std::vector<Condition> out;
  for (const fs::path& p : paths) {
    std::ifstream is(p);
    Condition c;
    try {
      c.doc = json::parse(is);
      c.report = report_from_json(c.doc.at("report").dump());
    } catch (const json::exception& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
    c.name = c.doc.at("model").get<std::string>() + "/" + p.stem().string();
    out.push_back(std::move(c));
  }
  return out;
}

std::string slug(const std::string& name) {
  std::string s = name;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

std::string bars_svg(const Condition& c) {
  const RobustnessReport& r = c.report;
  const std::size_t C = r.iou_clean.size();
  const double W = 80.0 + 70.0 * static_cast<double>(C), H = 260.0, top = 30.0, base = 220.0, h = base - top;
  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" font-family=\"sans-serif\" "
      "font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"10\" y=\"18\">per-class IoU: {}</text>\n",
      W, H, c.name);
  for (int t = 0; t <= 4; ++t) {
    const double y = base - h * t / 4.0;
    s += fmt::format("<line x1=\"40\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"#ddd\"/>"
                     "<text x=\"8\" y=\"{:.2f}\">{:.2f}</text>\n",
                     y, W - 10, y, y + 4, t / 4.0);
  }
  for (std::size_t k = 0; k < C; ++k) {
    const double x = 50.0 + 70.0 * static_cast<double>(k);
    const double vc = std::isnan(r.iou_clean[k]) ? 0.0 : r.iou_clean[k];
    const double va = std::isnan(r.iou_adv[k]) ? 0.0 : r.iou_adv[k];
    s += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"25\" height=\"{:.2f}\" fill=\"#4c78a8\"/>\n", x,
                     base - h * vc, h * vc);
    s += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"25\" height=\"{:.2f}\" fill=\"#e45756\"/>\n", x + 27,
                     base - h * va, h * va);
    s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\">class {}</text>\n", x + 5, base + 15, k);
  }
  s += fmt::format("<rect x=\"{:.2f}\" y=\"240\" width=\"10\" height=\"10\" fill=\"#4c78a8\"/>"
                   "<text x=\"{:.2f}\" y=\"249\">clean</text>"
                   "<rect x=\"{:.2f}\" y=\"240\" width=\"10\" height=\"10\" fill=\"#e45756\"/>"
                   "<text x=\"{:.2f}\" y=\"249\">attacked</text>\n</svg>\n",
                   50.0, 64.0, 120.0, 134.0);
  return s;
}

// Joint 2-D principal projection of clean and attacked features.
std::string scatter_svg(const Condition& c, const Tensor& clean, const Tensor& adv, const std::vector<int>& labels,
                        std::size_t max_points) {
  const std::size_t n = clean.rows(), d = clean.cols();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(2 * n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = clean.at(i, k);
      X(static_cast<Eigen::Index>(n + i), static_cast<Eigen::Index>(k)) = adv.at(i, k);
    }
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(X.transpose() * X);
  Eigen::MatrixXd P(static_cast<Eigen::Index>(d), 2);
  for (int j = 0; j < 2; ++j) {
    Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(d) - 1 - j);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    P.col(j) = v;
  }
  const Eigen::MatrixXd Y = X * P;
  const double lo0 = Y.col(0).minCoeff(), hi0 = Y.col(0).maxCoeff();
  const double lo1 = Y.col(1).minCoeff(), hi1 = Y.col(1).maxCoeff();
  const double span0 = std::max(hi0 - lo0, 1e-12), span1 = std::max(hi1 - lo1, 1e-12);
  const double panel = 260.0, pad = 20.0;
  const std::size_t stride = std::max<std::size_t>(1, (n + max_points - 1) / max_points);

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" font-family=\"sans-serif\" "
      "font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"10\" y=\"16\">feature projection: {}</text>\n",
      2 * panel + 3 * pad, panel + 2 * pad + 20, c.name);
  for (int side = 0; side < 2; ++side) {
    const double ox = pad + side * (panel + pad), oy = pad + 20;
    s += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"none\" "
                     "stroke=\"#999\"/><text x=\"{:.2f}\" y=\"{:.2f}\">{}</text>\n",
                     ox, oy, panel, panel, ox + 4, oy + 12, side ? "attacked" : "clean");
    for (std::size_t i = 0; i < n; i += stride) {
      const auto row = static_cast<Eigen::Index>(side * n + i);
      const double x = ox + 6 + (panel - 12) * (Y(row, 0) - lo0) / span0;
      const double y = oy + panel - 6 - (panel - 12) * (Y(row, 1) - lo1) / span1;
      s += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"2\" fill=\"{}\"/>\n", x, y, color(labels[i]));
    }
  }
  s += "</svg>\n";
  return s;
}

std::string write_text(const fs::path& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
  return path.filename().string();
}

}  // namespace

fs::path cmd_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw ArtifactError("missing run directory: " + run_dir.string());
  const std::vector<Condition> conds = collect(run_dir);
  if (conds.empty()) throw ArtifactError("no evaluation outputs under " + (run_dir / "eval").string());
  ExperimentConfig cfg = default_config();
  if (fs::exists(run_dir / "config.yaml")) cfg = load_config(run_dir / "config.yaml");

  const RunLayout run{run_dir};
  const json data = read_manifest(run.data());
  const std::vector<PointCloud> test = load_split(run.data(), data, "test/");
  if (test.empty()) throw ArtifactError("no test scenes in " + run.data().string());

  const fs::path out = run.report();
  fs::create_directories(out);
  std::string md = "# Robustness report\n\n| condition | attack | alpha | mIoU clean (%) | mIoU adv (%) | rb.dr (%) |\n"
                   "|---|---|---|---|---|---|\n";
  std::string figs;
  for (const Condition& c : conds) {
    const RobustnessReport& r = c.report;
    if (robustness_drop(r.miou_clean, r.miou_adv) != r.robustness_drop) {
      throw FormatError(c.name + ": stored robustness drop disagrees with its mIoU cells");
    }
    md += fmt::format("| {} | {} | {:.2f} | {:.2f} | {:.2f} | {:.2f} |\n", c.name, attack_kind_name(r.attack.kind),
                      r.attack.alpha, 100 * r.miou_clean, 100 * r.miou_adv, 100 * r.robustness_drop);

    const std::string bars = write_text(out / ("iou_" + slug(c.name) + ".svg"), bars_svg(c));
    const fs::path ckpt = run_dir / c.doc.at("checkpoint").get<std::string>();
    const fs::path adv_dir = run_dir / c.doc.at("adversarial").get<std::string>();
    require_artifact(ckpt);
    const SegModel model = unpack_model(load_checkpoint(ckpt));
    const std::vector<PointCloud> adv = load_split(adv_dir, read_manifest(adv_dir));
    if (adv.empty()) throw ArtifactError("no adversarial scenes in " + adv_dir.string());
    const std::string scatter = write_text(
        out / ("scatter_" + slug(c.name) + ".svg"),
        scatter_svg(c, extract_features(model, test.front()), extract_features(model, adv.front()),
                    test.front().labels, cfg.report.scatter_points));
    figs += fmt::format("## {}\n\n![per-class IoU]({})\n\n![feature projection]({})\n\n", c.name, bars, scatter);
  }
  md += "\n" + figs;
  std::ofstream(out / "report.md", std::ios::binary) << md;
  spdlog::info("report with {} conditions written to {}", conds.size(), (out / "report.md").string());
  return out / "report.md";
}

}  // namespace rpcss::cli
