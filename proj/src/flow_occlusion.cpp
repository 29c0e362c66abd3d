#include "gazereg/flow_occlusion.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "gazereg/errors.hpp"

namespace gazereg {

FlowField estimate_flow_blockmatch(const Plane<double>& src, const Plane<double>& dst, int block, int search) {
  require_same_size(src, dst, "estimate_flow_blockmatch");
  if (block <= 0 || search <= 0) throw ParameterError("estimate_flow_blockmatch: block and search must be > 0");
  const int h = static_cast<int>(src.rows());
  const int w = static_cast<int>(src.cols());
  FlowField flow = FlowField::zero(w, h);

  for (int by = 0; by < h; by += block) {
    for (int bx = 0; bx < w; bx += block) {
      const int bh = std::min(block, h - by);
      const int bw = std::min(block, w - bx);
      const auto ref = src.block(by, bx, bh, bw);

      double best_sad = std::numeric_limits<double>::infinity();
      int best_dx = 0, best_dy = 0, best_mag = 0;
      for (int dy = -search; dy <= search; ++dy) {
        if (by + dy < 0 || by + dy + bh > h) continue;
        for (int dx = -search; dx <= search; ++dx) {
          if (bx + dx < 0 || bx + dx + bw > w) continue;
          const double sad = (dst.block(by + dy, bx + dx, bh, bw) - ref).abs().sum();
          const int mag = dx * dx + dy * dy;
          // Scan order is lexicographic in (dy, dx), so a strict comparison
          // on (sad, mag) keeps the lexicographically first candidate.
          if (sad < best_sad || (sad == best_sad && mag < best_mag)) {
            best_sad = sad;
            best_dx = dx;
            best_dy = dy;
            best_mag = mag;
          }
        }
      }
      flow.fx.block(by, bx, bh, bw).setConstant(best_dx);
      flow.fy.block(by, bx, bh, bw).setConstant(best_dy);
    }
  }
  return flow;
}

std::pair<double, double> sample_flow(const FlowField& flow, double x, double y, FlowSampling sampling) {
  const int w = flow.width();
  const int h = flow.height();
  if (w == 0 || h == 0) throw ShapeError("sample_flow: empty flow field");
  if (sampling == FlowSampling::nearest) {
    const int ix = std::clamp(static_cast<int>(std::lround(x)), 0, w - 1);
    const int iy = std::clamp(static_cast<int>(std::lround(y)), 0, h - 1);
    return {flow.fx(iy, ix), flow.fy(iy, ix)};
  }
  const double cx = std::clamp(x, 0.0, double(w - 1));
  const double cy = std::clamp(y, 0.0, double(h - 1));
  const int x0 = static_cast<int>(std::floor(cx));
  const int y0 = static_cast<int>(std::floor(cy));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double ax = cx - x0;
  const double ay = cy - y0;
  auto lerp = [&](const Plane<double>& p) {
    const double top = (1 - ax) * p(y0, x0) + ax * p(y0, x1);
    const double bot = (1 - ax) * p(y1, x0) + ax * p(y1, x1);
    return (1 - ay) * top + ay * bot;
  };
  return {lerp(flow.fx), lerp(flow.fy)};
}

TranslatedPixel translate_pixel(double x, double y, const FlowField& fwd, FlowSampling sampling) {
  const auto [fx, fy] = sample_flow(fwd, x, y, sampling);
  TranslatedPixel t;
  const double rx = x + fx;
  const double ry = y + fy;
  t.x = std::clamp(rx, 0.0, double(fwd.width() - 1));
  t.y = std::clamp(ry, 0.0, double(fwd.height() - 1));
  t.clamped = (t.x != rx) || (t.y != ry);
  return t;
}

std::pair<double, double> consistency_distance(double x, double y, const FlowField& fwd, const FlowField& bwd,
                                               ConsistencyVariant variant, FlowSampling sampling) {
  require_same_size(fwd.fx, bwd.fx, "consistency_distance");
  const auto [fx, fy] = sample_flow(fwd, x, y, sampling);
  const auto moved = translate_pixel(x, y, fwd, sampling);
  const auto [bx, by] = sample_flow(bwd, moved.x, moved.y, sampling);
  if (variant == ConsistencyVariant::vector_sum) return {fx + bx, fy + by};
  return {std::abs(fx) - std::abs(bx), std::abs(fy) - std::abs(by)};
}

OcclusionReport occlusion_check(const FlowField& fwd, const FlowField& bwd, const OcclusionParams& params) {
  require_same_size(fwd.fx, bwd.fx, "occlusion_check");
  require_same_size(fwd.fx, fwd.fy, "occlusion_check");
  require_same_size(bwd.fx, bwd.fy, "occlusion_check");
  OcclusionReport r;
  r.epsilon_px = params.epsilon_px;
  r.eta_threshold = params.eta_threshold;
  const int h = fwd.height();
  const int w = fwd.width();
  if (h == 0 || w == 0) return r;
  std::size_t exceeding = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto [dx, dy] = consistency_distance(x, y, fwd, bwd, params.variant, params.sampling);
      if (std::sqrt(dx * dx + dy * dy) > params.epsilon_px) ++exceeding;
    }
  }
  r.eta_observed = static_cast<double>(exceeding) / static_cast<double>(std::size_t(h) * std::size_t(w));
  r.verdict = r.eta_observed > params.eta_threshold ? OcclusionVerdict::major : OcclusionVerdict::minor;
  return r;
}

std::pair<FlowField, FlowField> BlockMatchFlowProvider::flows(const FrameRef& earlier, const FrameRef& anchor) {
  Plane<double> a, b;
  try {
    a = loader_(earlier);
    b = loader_(anchor);
  } catch (const Error& e) {
    throw ProviderError(earlier.frame_id, anchor.frame_id, e.what());
  }
  auto fwd = estimate_flow_blockmatch(a, b, block_, search_);
  auto bwd = estimate_flow_blockmatch(b, a, block_, search_);
  fwd.src_frame = bwd.dst_frame = earlier.frame_id;
  fwd.dst_frame = bwd.src_frame = anchor.frame_id;
  return {std::move(fwd), std::move(bwd)};
}

std::pair<FlowField, FlowField> TableFlowProvider::flows(const FrameRef& earlier, const FrameRef& anchor) {
  auto f = table_.find({earlier.frame_id, anchor.frame_id});
  auto b = table_.find({anchor.frame_id, earlier.frame_id});
  if (f == table_.end() || b == table_.end())
    throw ProviderError(earlier.frame_id, anchor.frame_id, "no flow pair registered");
  return {f->second, b->second};
}

std::string FileFlowProvider::file_name(int src, int dst) {
  return "flow_" + std::to_string(src) + "_" + std::to_string(dst) + ".gfl";
}

std::pair<FlowField, FlowField> FileFlowProvider::flows(const FrameRef& earlier, const FrameRef& anchor) {
  namespace fs = std::filesystem;
  try {
    auto fwd = read_flow((fs::path(dir_) / file_name(earlier.frame_id, anchor.frame_id)).string());
    auto bwd = read_flow((fs::path(dir_) / file_name(anchor.frame_id, earlier.frame_id)).string());
    fwd.src_frame = bwd.dst_frame = earlier.frame_id;
    fwd.dst_frame = bwd.src_frame = anchor.frame_id;
    return {std::move(fwd), std::move(bwd)};
  } catch (const IoError& e) {
    throw ProviderError(earlier.frame_id, anchor.frame_id, e.what());
  }
}

OcclusionAggregation aggregate_with_occlusion(const GazeTrack& track, const std::vector<FrameRef>& frames,
                                              std::size_t anchor_index, std::int64_t delta_ms,
                                              FlowProvider& provider, const OcclusionParams& params) {
  if (anchor_index >= frames.size()) throw ParameterError("aggregate_with_occlusion: anchor index out of range");
  const FrameRef& anchor = frames[anchor_index];
  OcclusionAggregation out;
  const AlignmentWindow plain = align_window(track, anchor, WindowMode::aggregated, delta_ms);
  out.window.frame_id = anchor.frame_id;
  out.window.mode = WindowMode::aggregated;
  out.window.delta_ms = delta_ms;

  // Frames ordered by time; each sample is attributed to the latest frame at
  // or before its timestamp (the earliest frame when none precedes it).
  std::vector<std::size_t> order(frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frames[a].timestamp_ms < frames[b].timestamp_ms; });
  auto owner_of = [&](std::int64_t ts) {
    std::size_t owner = order.front();
    for (std::size_t i : order) {
      if (frames[i].timestamp_ms > ts) break;
      if (frames[i].timestamp_ms <= anchor.timestamp_ms) owner = i;
    }
    return owner;
  };

  std::map<std::size_t, std::vector<GazeSample>> groups;
  for (const auto& s : plain.selected) groups[owner_of(s.timestamp_ms)].push_back(s);

  for (auto& [idx, samples] : groups) {
    if (idx == anchor_index || frames[idx].timestamp_ms == anchor.timestamp_ms) {
      out.window.selected.insert(out.window.selected.end(), samples.begin(), samples.end());
      continue;
    }
    auto [fwd, bwd] = provider.flows(frames[idx], anchor);
    FrameOcclusion fo;
    fo.frame_id = frames[idx].frame_id;
    fo.report = occlusion_check(fwd, bwd, params);
    fo.points = samples.size();
    out.checked.push_back(fo);
    if (fo.report.verdict == OcclusionVerdict::major) {
      out.dropped += samples.size();
      continue;
    }
    for (auto s : samples) {
      if (s.in_bounds(fwd.width(), fwd.height())) {
        const auto [fx, fy] = sample_flow(fwd, s.x, s.y, params.sampling);
        s.x += fx;
        s.y += fy;
      }
      out.window.selected.push_back(s);
      ++out.translated;
    }
  }
  std::stable_sort(out.window.selected.begin(), out.window.selected.end(),
                   [](const GazeSample& a, const GazeSample& b) { return a.timestamp_ms < b.timestamp_ms; });
  return out;
}

const char* to_string(OcclusionVerdict v) { return v == OcclusionVerdict::major ? "major" : "minor"; }

}  // namespace gazereg
