#ifndef GAZEREG_PATCH_DISTRIBUTION_HPP
#define GAZEREG_PATCH_DISTRIBUTION_HPP

#include <map>
#include <string>

#include "gazereg/heatmap.hpp"

namespace gazereg {

/// Regular tiling of an image into n_h x n_v patches. Patch (i, j) is column
/// i, row j; flattened index is j * n_h + i (row-major).
struct PatchGrid {
  int n_h = 4;
  int n_v = 4;
  int patch_w = 8;
  int patch_h = 8;

  int count() const { return n_h * n_v; }
  int width() const { return n_h * patch_w; }
  int height() const { return n_v * patch_h; }
  int index_of(double x, double y) const;

  /// Grid with the given patch counts; the image must divide evenly.
  static PatchGrid for_image(int width, int height, int n_h, int n_v);
  void require_fits(int width, int height, const char* what) const;

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

enum class DistributionFallback { none, uniform };

struct GazeDistribution {
  Eigen::VectorXd probs;
  int frame_id = 0;
  DistributionFallback fallback = DistributionFallback::none;
};

/// Unnormalised per-patch sums of pixel values, row-major over the grid.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> patch_mass(const Plane<Scalar>& values, const PatchGrid& grid) {
  grid.require_fits(static_cast<int>(values.cols()), static_cast<int>(values.rows()), "patch_mass");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mass(grid.count());
  for (int j = 0; j < grid.n_v; ++j)
    for (int i = 0; i < grid.n_h; ++i)
      mass(j * grid.n_h + i) = values.block(j * grid.patch_h, i * grid.patch_w, grid.patch_h, grid.patch_w).sum();
  return mass;
}

/// Share of heatmap mass falling in each patch. A heatmap with no mass has
/// no defined share; it yields the uniform distribution, flagged.
GazeDistribution gaze_distribution(const Heatmap& binary, const PatchGrid& grid);
GazeDistribution distribution_from_continuous(const Heatmap& continuous, const PatchGrid& grid);

/// Sums vertically adjacent patch pairs of a fine grid (n_v must be even).
Eigen::VectorXd merge_vertical_pairs(const Eigen::VectorXd& fine, const PatchGrid& grid);

/// JSON object keyed by frame id, each value the probability array.
std::string distributions_to_json(const std::map<int, GazeDistribution>& dists);

}  // namespace gazereg

#endif  // GAZEREG_PATCH_DISTRIBUTION_HPP
