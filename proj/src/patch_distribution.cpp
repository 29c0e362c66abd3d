#include "gazereg/patch_distribution.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace gazereg {

int PatchGrid::index_of(double x, double y) const {
  const int i = std::clamp(static_cast<int>(std::floor(x / patch_w)), 0, n_h - 1);
  const int j = std::clamp(static_cast<int>(std::floor(y / patch_h)), 0, n_v - 1);
  return j * n_h + i;
}

PatchGrid PatchGrid::for_image(int width, int height, int n_h, int n_v) {
  if (n_h <= 0 || n_v <= 0) throw ShapeError("PatchGrid: patch counts must be positive");
  if (width % n_h != 0 || height % n_v != 0)
    throw ShapeError("PatchGrid: " + std::to_string(width) + "x" + std::to_string(height) +
                     " image does not divide into " + std::to_string(n_h) + "x" + std::to_string(n_v) + " patches");
  return PatchGrid{n_h, n_v, width / n_h, height / n_v};
}

void PatchGrid::require_fits(int width, int height, const char* what) const {
  if (n_h <= 0 || n_v <= 0 || patch_w <= 0 || patch_h <= 0)
    throw ShapeError(std::string(what) + ": degenerate patch grid");
  if (width != n_h * patch_w || height != n_v * patch_h)
    throw ShapeError(std::string(what) + ": " + std::to_string(width) + "x" + std::to_string(height) +
                     " image does not match a " + std::to_string(n_h) + "x" + std::to_string(n_v) + " grid of " +
                     std::to_string(patch_w) + "x" + std::to_string(patch_h) + " patches");
}

namespace {

GazeDistribution normalise(const Eigen::VectorXd& mass, int frame_id) {
  GazeDistribution d;
  d.frame_id = frame_id;
  const double total = mass.sum();
  if (!(total > 0.0)) {
    d.probs = Eigen::VectorXd::Constant(mass.size(), 1.0 / static_cast<double>(mass.size()));
    d.fallback = DistributionFallback::uniform;
    return d;
  }
  d.probs = mass / total;
  return d;
}

}  // namespace

GazeDistribution gaze_distribution(const Heatmap& binary, const PatchGrid& grid) {
  if (binary.kind != HeatmapKind::binary) throw ParameterError("gaze_distribution: expects a binary heatmap");
  return normalise(patch_mass(binary.values, grid), binary.frame_id);
}

GazeDistribution distribution_from_continuous(const Heatmap& continuous, const PatchGrid& grid) {
  if ((continuous.values < 0.0).any()) throw ParameterError("distribution_from_continuous: negative heatmap value");
  return normalise(patch_mass(continuous.values, grid), continuous.frame_id);
}

Eigen::VectorXd merge_vertical_pairs(const Eigen::VectorXd& fine, const PatchGrid& grid) {
  if (grid.n_v % 2 != 0) throw ShapeError("merge_vertical_pairs: n_v must be even");
  if (fine.size() != grid.count()) throw ShapeError("merge_vertical_pairs: length mismatch");
  Eigen::VectorXd coarse(grid.count() / 2);
  for (int j = 0; j < grid.n_v / 2; ++j)
    for (int i = 0; i < grid.n_h; ++i)
      coarse(j * grid.n_h + i) = fine((2 * j) * grid.n_h + i) + fine((2 * j + 1) * grid.n_h + i);
  return coarse;
}

std::string distributions_to_json(const std::map<int, GazeDistribution>& dists) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [id, d] : dists) {
    doc[std::to_string(id)] = std::vector<double>(d.probs.data(), d.probs.data() + d.probs.size());
  }
  return doc.dump(2);
}

}  // namespace gazereg
