#include <doctest.h>

#include <random>

#include "gazereg/errors.hpp"
#include "gazereg/flow_occlusion.hpp"
#include "gazereg/synth.hpp"

using namespace gazereg;

namespace {

Plane<double> noise_plane(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Plane<double> p(h, w);
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = u(rng);
  return p;
}

// exhaustive SAD over every displacement, plain loops
std::pair<int, int> sad_oracle(const Plane<double>& src, const Plane<double>& dst, int bx, int by, int block,
                               int search) {
  double best = 1e300;
  std::pair<int, int> arg{0, 0};
  int best_mag = 1 << 30;
  for (int dy = -search; dy <= search; ++dy)
    for (int dx = -search; dx <= search; ++dx) {
      if (by + dy < 0 || bx + dx < 0 || by + dy + block > src.rows() || bx + dx + block > src.cols()) continue;
      double s = 0;
      for (int y = 0; y < block; ++y)
        for (int x = 0; x < block; ++x) s += std::abs(dst(by + dy + y, bx + dx + x) - src(by + y, bx + x));
      const int mag = dx * dx + dy * dy;
      if (s < best || (s == best && mag < best_mag)) best = s, arg = {dx, dy}, best_mag = mag;
    }
  return arg;
}

GazeTrack track_of(std::vector<GazeSample> s) {
  GazeTrack t;
  t.samples = std::move(s);
  return t;
}

}  // namespace

TEST_CASE("block matching: identical frames give zero flow") {
  std::mt19937_64 rng(1);
  const Plane<double> a = noise_plane(rng, 32, 32);
  const FlowField f = estimate_flow_blockmatch(a, a, 8, 4);
  CHECK(f.fx.abs().maxCoeff() == 0.0);
  CHECK(f.fy.abs().maxCoeff() == 0.0);
}

TEST_CASE("block matching: 3 px right shift on interior blocks, matches the exhaustive oracle everywhere") {
  std::mt19937_64 rng(2);
  const Plane<double> a = noise_plane(rng, 40, 40);
  Plane<double> b = noise_plane(rng, 40, 40);
  b.rightCols(37) = a.leftCols(37);
  const FlowField f = estimate_flow_blockmatch(a, b, 8, 4);
  for (int by = 8; by < 32; by += 8)
    for (int bx = 8; bx < 32; bx += 8) {
      CHECK(f.fx(by, bx) == 3.0);
      CHECK(f.fy(by, bx) == 0.0);
    }
  for (int by = 0; by < 40; by += 8)
    for (int bx = 0; bx < 40; bx += 8) {
      const auto [dx, dy] = sad_oracle(a, b, bx, by, 8, 4);
      CHECK(f.fx(by + 3, bx + 5) == dx);
      CHECK(f.fy(by + 3, bx + 5) == dy);
    }
}

TEST_CASE("block matching: deterministic on noise, flat frames tie to zero, size mismatch rejected") {
  std::mt19937_64 rng(3);
  const Plane<double> a = noise_plane(rng, 24, 24), b = noise_plane(rng, 24, 24);
  const FlowField f1 = estimate_flow_blockmatch(a, b, 8, 3), f2 = estimate_flow_blockmatch(a, b, 8, 3);
  CHECK((f1.fx - f2.fx).abs().maxCoeff() == 0.0);
  CHECK((f1.fy - f2.fy).abs().maxCoeff() == 0.0);
  const Plane<double> flat = Plane<double>::Constant(16, 16, 0.5);
  CHECK(estimate_flow_blockmatch(flat, flat, 4, 2).fx.abs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(estimate_flow_blockmatch(a, noise_plane(rng, 16, 24), 8, 3), ShapeError);
  CHECK_THROWS_AS(estimate_flow_blockmatch(a, b, 0, 3), ParameterError);
}

TEST_CASE("translate_pixel: substitution, identity, clamping") {
  FlowField f = FlowField::zero(32, 32);
  f.fx(10, 10) = 3;
  f.fy(10, 10) = -2;
  const auto t = translate_pixel(10, 10, f);
  CHECK(t.x == 13.0);
  CHECK(t.y == 8.0);
  CHECK_FALSE(t.clamped);
  const auto id = translate_pixel(5.0, 7.0, FlowField::zero(32, 32));
  CHECK(id.x == 5.0);
  CHECK(id.y == 7.0);
  const auto out = translate_pixel(30, 1, FlowField::constant(32, 32, 5.0, -4.0));
  CHECK(out.x == 31.0);
  CHECK(out.y == 0.0);
  CHECK(out.clamped);
}

TEST_CASE("bilinear sampling interpolates, nearest rounds") {
  FlowField f = FlowField::zero(4, 4);
  f.fx(0, 1) = 2.0;
  CHECK(sample_flow(f, 0.5, 0.0, FlowSampling::bilinear).first == doctest::Approx(1.0));
  CHECK(sample_flow(f, 0.6, 0.0, FlowSampling::nearest).first == 2.0);
  CHECK(sample_flow(f, 0.4, 0.0, FlowSampling::nearest).first == 0.0);
}

TEST_CASE("consistency distance: signed difference of magnitudes") {
  const FlowField fwd = FlowField::constant(16, 16, 3.0, -1.0);
  const FlowField bwd = FlowField::constant(16, 16, -3.0, 1.0);
  const auto [dx, dy] = consistency_distance(4, 4, fwd, bwd);
  CHECK(dx == 0.0);
  CHECK(dy == 0.0);

  FlowField f5 = FlowField::constant(16, 16, 5.0, 0.0);
  CHECK(consistency_distance(2, 2, f5, FlowField::zero(16, 16)).first == 5.0);

  FlowField f2 = FlowField::constant(16, 16, 2.0, 0.0);
  FlowField b6 = FlowField::constant(16, 16, -6.0, 0.0);
  CHECK(consistency_distance(2, 2, f2, b6).first == -4.0);
  CHECK(consistency_distance(2, 2, f2, b6, ConsistencyVariant::vector_sum).first == -4.0);
  FlowField b6p = FlowField::constant(16, 16, 6.0, 0.0);
  CHECK(consistency_distance(2, 2, f2, b6p).first == -4.0);
  CHECK(consistency_distance(2, 2, f2, b6p, ConsistencyVariant::vector_sum).first == 8.0);
}

TEST_CASE("occlusion check: zero flow is minor, 10 of 16 pixels is major") {
  const auto r0 = occlusion_check(FlowField::zero(8, 8), FlowField::zero(8, 8));
  CHECK(r0.eta_observed == 0.0);
  CHECK(r0.verdict == OcclusionVerdict::minor);

  FlowField fwd = FlowField::zero(4, 4);
  for (int i = 0; i < 10; ++i) fwd.fy(i / 4, i % 4) = 25.0;  // clamps to the bottom row, bwd is zero there
  const auto r = occlusion_check(fwd, FlowField::zero(4, 4));
  CHECK(r.eta_observed == 0.625);
  CHECK(r.verdict == OcclusionVerdict::major);
}

TEST_CASE("occlusion check: verdict threshold is strict, eta non-increasing in epsilon") {
  FlowField fwd = FlowField::zero(10, 10);
  for (int i = 0; i < 60; ++i) fwd.fx(i / 10, i % 10) = 21.0 + i % 7;
  const auto at = occlusion_check(fwd, FlowField::zero(10, 10));
  CHECK(at.eta_observed == 0.6);
  CHECK(at.verdict == OcclusionVerdict::minor);
  double prev = 2.0;
  for (double eps = 0.0; eps < 40.0; eps += 0.5) {
    OcclusionParams p;
    p.epsilon_px = eps;
    const double eta = occlusion_check(fwd, FlowField::zero(10, 10), p).eta_observed;
    CHECK(eta >= 0.0);
    CHECK(eta <= 1.0);
    CHECK(eta <= prev);
    prev = eta;
  }
}

TEST_CASE("planted 80% occluder is major; brute-force mask share agrees") {
  std::mt19937_64 rng(4);
  for (double cov : {0.0, 0.3, 0.8}) {
    const OcclusionScene sc = make_occlusion_scene(32, 32, cov, 2, rng);
    const auto r = occlusion_check(sc.fwd, sc.bwd);
    CHECK(r.eta_observed == doctest::Approx(sc.mask.mean()));
    CHECK((r.verdict == OcclusionVerdict::major) == (cov > 0.6));
  }
}

TEST_CASE("aggregation: zero flows keep every point untranslated") {
  const std::vector<FrameRef> frames{{0, 800, "a", 32, 32}, {1, 900, "b", 32, 32}, {2, 1000, "c", 32, 32}};
  const GazeTrack t = track_of({{810, 3, 4}, {850, 5, 6}, {920, 7, 8}, {1000, 9, 10}});
  TableFlowProvider prov;
  for (int s : {0, 1}) {
    prov.add(s, 2, FlowField::zero(32, 32));
    prov.add(2, s, FlowField::zero(32, 32));
  }
  const auto agg = aggregate_with_occlusion(t, frames, 2, 200, prov);
  const auto plain = align_window(t, frames[2], WindowMode::aggregated, 200);
  CHECK(agg.window.selected == plain.selected);
  CHECK(agg.dropped == 0);
  CHECK(agg.checked.size() == 2);
}

TEST_CASE("aggregation: occluded frame's points are dropped, panned frame's points shift by the flow") {
  std::mt19937_64 rng(5);
  const std::vector<FrameRef> frames{{0, 850, "a", 32, 32}, {1, 930, "b", 32, 32}, {2, 1000, "c", 32, 32}};
  const GazeTrack t = track_of({{860, 10, 10}, {900, 11, 12}, {940, 12, 13}, {990, 14, 15}, {1000, 16, 16}});
  const OcclusionScene occluded = make_occlusion_scene(32, 32, 0.9, 3, rng);
  const OcclusionScene panned = make_occlusion_scene(32, 32, 0.0, 3, rng);
  TableFlowProvider prov;
  prov.add(0, 2, occluded.fwd);
  prov.add(2, 0, occluded.bwd);
  prov.add(1, 2, panned.fwd);
  prov.add(2, 1, panned.bwd);
  const auto agg = aggregate_with_occlusion(t, frames, 2, 200, prov);
  CHECK(agg.dropped == 2);
  REQUIRE(agg.window.selected.size() == 3);
  CHECK(agg.window.selected[0] == GazeSample{940, 15, 13});
  CHECK(agg.window.selected[1] == GazeSample{990, 17, 15});
  CHECK(agg.window.selected[2] == GazeSample{1000, 16, 16});
  const auto plain = align_window(t, frames[2], WindowMode::aggregated, 200);
  CHECK(agg.window.selected.size() <= plain.selected.size());
}

TEST_CASE("aggregation: pan estimated by block matching moves earlier points +3 px") {
  std::mt19937_64 rng(6);
  const OcclusionScene sc = make_occlusion_scene(32, 32, 0.0, 3, rng);
  std::map<int, Plane<double>> images{{0, sc.src.planes[0]}, {1, sc.dst.planes[0]}};
  BlockMatchFlowProvider prov([&](const FrameRef& f) { return images.at(f.frame_id); }, 8, 4);
  const std::vector<FrameRef> frames{{0, 900, "a", 32, 32}, {1, 1000, "b", 32, 32}};
  const GazeTrack t = track_of({{910, 12, 12}, {950, 20.4, 9.6}, {1000, 5, 5}});
  const auto agg = aggregate_with_occlusion(t, frames, 1, 200, prov);
  REQUIRE(agg.window.selected.size() == 3);
  CHECK(agg.checked.at(0).report.verdict == OcclusionVerdict::minor);
  CHECK(agg.window.selected[0].x == 15.0);
  CHECK(agg.window.selected[0].y == 12.0);
  CHECK(agg.window.selected[1].x == doctest::Approx(23.4));
  CHECK(agg.window.selected[2].x == 5.0);
}

TEST_CASE("aggregation: missing flow pair surfaces a provider error") {
  const std::vector<FrameRef> frames{{0, 900, "a", 8, 8}, {1, 1000, "b", 8, 8}};
  TableFlowProvider empty;
  CHECK_THROWS_AS(aggregate_with_occlusion(track_of({{950, 1, 1}}), frames, 1, 200, empty), ProviderError);
}

TEST_CASE("GFL1 round-trip") {
  FlowField f = FlowField::constant(5, 3, 1.5, -2.25);
  f.fx(1, 2) = 7;
  write_flow("gfl1_roundtrip.gfl", f);
  const FlowField back = read_flow("gfl1_roundtrip.gfl");
  CHECK((back.fx - f.fx).abs().maxCoeff() == 0.0);
  CHECK((back.fy - f.fy).abs().maxCoeff() == 0.0);
  const std::string bytes = encode_gfl1(f);
  CHECK(bytes.substr(0, 4) == "GFL1");
  CHECK(bytes.size() == 12 + 2 * 15 * 4);
  CHECK_THROWS(decode_gfl1(bytes.substr(0, 20)));
}
