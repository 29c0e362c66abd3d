#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "gazereg/errors.hpp"
#include "gazereg/patch_distribution.hpp"

using namespace gazereg;

namespace {

Heatmap binary_of(const Plane<double>& v) {
  Heatmap h;
  h.values = v;
  h.kind = HeatmapKind::binary;
  return h;
}

Heatmap continuous_of(const Plane<double>& v) {
  Heatmap h;
  h.values = v;
  return h;
}

// discrete gaussian mass per patch, long double, pixel by pixel
std::vector<long double> gaussian_patch_mass(const std::vector<std::pair<double, double>>& centres, double sigma,
                                             const PatchGrid& g) {
  std::vector<long double> m(static_cast<std::size_t>(g.count()), 0.0L);
  long double total = 0;
  for (int y = 0; y < g.height(); ++y)
    for (int x = 0; x < g.width(); ++x) {
      long double v = 0;
      for (auto [cx, cy] : centres)
        v += std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2.0L * sigma * sigma));
      m[static_cast<std::size_t>((y / g.patch_h) * g.n_h + x / g.patch_w)] += v;
      total += v;
    }
  for (auto& v : m) v /= total;
  return m;
}

Plane<double> random_binary(std::mt19937_64& rng, int w, int h, double density) {
  std::bernoulli_distribution b(density);
  Plane<double> p(h, w);
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = b(rng) ? 1.0 : 0.0;
  return p;
}

}  // namespace

TEST_CASE("4x4 binary on a 2x2 grid: [2/3, 0, 0, 1/3]") {
  Plane<double> v = Plane<double>::Zero(4, 4);
  v(0, 0) = v(1, 1) = 1;
  v(3, 3) = 1;
  const auto d = gaze_distribution(binary_of(v), PatchGrid::for_image(4, 4, 2, 2));
  CHECK(d.fallback == DistributionFallback::none);
  CHECK(d.probs(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(d.probs(1) == 0.0);
  CHECK(d.probs(2) == 0.0);
  CHECK(d.probs(3) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("all ones gives uniform; all zeros gives the flagged uniform fallback") {
  const PatchGrid g = PatchGrid::for_image(32, 32, 4, 4);
  const auto ones = gaze_distribution(binary_of(Plane<double>::Ones(32, 32)), g);
  CHECK(ones.fallback == DistributionFallback::none);
  CHECK((ones.probs.array() - 1.0 / 16).abs().maxCoeff() < 1e-15);
  const auto zeros = gaze_distribution(binary_of(Plane<double>::Zero(32, 32)), g);
  CHECK(zeros.fallback == DistributionFallback::uniform);
  CHECK((zeros.probs.array() - 1.0 / 16).abs().maxCoeff() < 1e-15);
}

TEST_CASE("indivisible sizes and wrong kinds are rejected") {
  CHECK_THROWS_AS(PatchGrid::for_image(30, 32, 4, 4), ShapeError);
  const PatchGrid g = PatchGrid::for_image(32, 32, 4, 4);
  CHECK_THROWS_AS(gaze_distribution(binary_of(Plane<double>::Ones(24, 32)), g), ShapeError);
  CHECK_THROWS_AS(gaze_distribution(continuous_of(Plane<double>::Ones(32, 32)), g), ParameterError);
  Plane<double> neg = Plane<double>::Ones(32, 32);
  neg(3, 3) = -1;
  CHECK_THROWS_AS(distribution_from_continuous(continuous_of(neg), g), ParameterError);
}

TEST_CASE("index_of maps pixels to row-major patches and clamps the far edge") {
  const PatchGrid g{4, 2, 8, 16};
  CHECK(g.index_of(0, 0) == 0);
  CHECK(g.index_of(31.9, 0) == 3);
  CHECK(g.index_of(8, 16) == 5);
  CHECK(g.index_of(32, 32) == 7);
}

TEST_CASE("narrow gaussian inside one patch keeps at least 0.99 of the mass") {
  const PatchGrid g = PatchGrid::for_image(32, 32, 4, 4);
  AlignmentWindow w;
  w.selected.push_back({0, 11.5, 19.5});
  const auto d = distribution_from_continuous(gaussian_splat(w, 32, 32, 1.0), g);
  const auto oracle = gaussian_patch_mass({{11.5, 19.5}}, 1.0, g);
  CHECK(d.probs(g.index_of(11.5, 19.5)) >= 0.99);
  for (int n = 0; n < g.count(); ++n) CHECK(std::abs(d.probs(n) - static_cast<double>(oracle[n])) < 1e-12);
}

TEST_CASE("two equal gaussians in different patches split the mass in half") {
  const PatchGrid g = PatchGrid::for_image(32, 32, 4, 4);
  AlignmentWindow w;
  w.selected.push_back({0, 4, 4});
  w.selected.push_back({33, 27, 20});
  const auto d = distribution_from_continuous(gaussian_splat(w, 32, 32, 1.0), g);
  const auto oracle = gaussian_patch_mass({{4, 4}, {27, 20}}, 1.0, g);
  CHECK(d.probs(0) == doctest::Approx(0.5).epsilon(1e-3));
  CHECK(d.probs(11) == doctest::Approx(0.5).epsilon(1e-3));
  for (int n = 0; n < g.count(); ++n) CHECK(std::abs(d.probs(n) - static_cast<double>(oracle[n])) < 1e-12);
}

TEST_CASE("constant continuous heatmap is uniform") {
  const PatchGrid g = PatchGrid::for_image(16, 8, 4, 2);
  const auto d = distribution_from_continuous(continuous_of(Plane<double>::Constant(8, 16, 0.3)), g);
  CHECK((d.probs.array() - 1.0 / 8).abs().maxCoeff() < 1e-15);
}

TEST_CASE("random binary maps: sums to one, merge conserves mass exactly") {
  std::mt19937_64 rng(7);
  const PatchGrid fine = PatchGrid::for_image(32, 32, 4, 4);
  const PatchGrid coarse = PatchGrid::for_image(32, 32, 4, 2);
  for (int trial = 0; trial < 300; ++trial) {
    const Plane<double> v = random_binary(rng, 32, 32, 0.02 + 0.3 * (trial % 5) / 4.0);
    const auto d = gaze_distribution(binary_of(v), fine);
    CHECK(std::abs(d.probs.sum() - 1.0) < 1e-9);
    CHECK(d.probs.minCoeff() >= 0.0);
    const Eigen::VectorXd merged_mass = merge_vertical_pairs(patch_mass(v, fine), fine);
    CHECK((merged_mass - patch_mass(v, coarse)).cwiseAbs().maxCoeff() == 0.0);
    const auto dc = gaze_distribution(binary_of(v), coarse);
    CHECK((merge_vertical_pairs(d.probs, fine) - dc.probs).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("permuting patch contents permutes the distribution") {
  std::mt19937_64 rng(9);
  const PatchGrid g = PatchGrid::for_image(32, 32, 4, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const Plane<double> v = random_binary(rng, 32, 32, 0.1);
    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Plane<double> moved(32, 32);
    for (int n = 0; n < 16; ++n)
      moved.block((perm[n] / 4) * 8, (perm[n] % 4) * 8, 8, 8) = v.block((n / 4) * 8, (n % 4) * 8, 8, 8);
    const auto a = gaze_distribution(binary_of(v), g);
    const auto b = gaze_distribution(binary_of(moved), g);
    for (int n = 0; n < 16; ++n) CHECK(b.probs(perm[n]) == a.probs(n));
  }
}

TEST_CASE("merge rejects odd row counts and length mismatches") {
  CHECK_THROWS_AS(merge_vertical_pairs(Eigen::VectorXd::Ones(12), PatchGrid{4, 3, 8, 8}), ShapeError);
  CHECK_THROWS_AS(merge_vertical_pairs(Eigen::VectorXd::Ones(15), PatchGrid{4, 4, 8, 8}), ShapeError);
}

TEST_CASE("json export keyed by frame id") {
  std::map<int, GazeDistribution> m;
  m[7].probs = Eigen::VectorXd::Constant(4, 0.25);
  const std::string s = distributions_to_json(m);
  CHECK(s.find("\"7\"") != std::string::npos);
  CHECK(s.find("0.25") != std::string::npos);
}
