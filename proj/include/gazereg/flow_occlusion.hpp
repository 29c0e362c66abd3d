#ifndef GAZEREG_FLOW_OCCLUSION_HPP
#define GAZEREG_FLOW_OCCLUSION_HPP

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gazereg/gaze_ingest.hpp"
#include "gazereg/image.hpp"

namespace gazereg {

/// Dense displacement field from src_frame to dst_frame, in pixels.
template <typename Scalar>
struct FlowFieldT {
  Plane<Scalar> fx;
  Plane<Scalar> fy;
  int src_frame = 0;
  int dst_frame = 0;

  int width() const { return static_cast<int>(fx.cols()); }
  int height() const { return static_cast<int>(fx.rows()); }

  static FlowFieldT zero(int width, int height) {
    return {Plane<Scalar>::Zero(height, width), Plane<Scalar>::Zero(height, width), 0, 0};
  }
  static FlowFieldT constant(int width, int height, Scalar dx, Scalar dy) {
    return {Plane<Scalar>::Constant(height, width, dx), Plane<Scalar>::Constant(height, width, dy), 0, 0};
  }
};

using FlowField = FlowFieldT<double>;

enum class FlowSampling { nearest, bilinear };

/// How the per-pixel forward/backward discrepancy is measured.
///  magnitude_difference: d = |F_fwd(p)| - |F_bwd(p')| per axis (the default).
///  vector_sum: d = F_fwd(p) + F_bwd(p') per axis, the usual round-trip check.
enum class ConsistencyVariant { magnitude_difference, vector_sum };

enum class OcclusionVerdict { minor, major };

struct OcclusionReport {
  double eta_observed = 0.0;
  OcclusionVerdict verdict = OcclusionVerdict::minor;
  double epsilon_px = 20.0;
  double eta_threshold = 0.60;
};

struct OcclusionParams {
  double epsilon_px = 20.0;
  double eta_threshold = 0.60;
  ConsistencyVariant variant = ConsistencyVariant::magnitude_difference;
  FlowSampling sampling = FlowSampling::nearest;
};

struct TranslatedPixel {
  double x = 0.0;
  double y = 0.0;
  bool clamped = false;
};

/// Exhaustive SAD block matching on grayscale planes. Each block of
/// `block` x `block` pixels gets the integer displacement within `search`
/// that minimises the sum of absolute differences; ties go to the smaller
/// displacement magnitude, then to the lexicographically smaller (dy, dx).
FlowField estimate_flow_blockmatch(const Plane<double>& src, const Plane<double>& dst, int block, int search);

/// Flow value at a (possibly sub-pixel) position.
std::pair<double, double> sample_flow(const FlowField& flow, double x, double y,
                                      FlowSampling sampling = FlowSampling::nearest);

/// p + F(p), clamped to [0, w-1] x [0, h-1].
TranslatedPixel translate_pixel(double x, double y, const FlowField& fwd,
                                FlowSampling sampling = FlowSampling::nearest);

std::pair<double, double> consistency_distance(double x, double y, const FlowField& fwd, const FlowField& bwd,
                                               ConsistencyVariant variant = ConsistencyVariant::magnitude_difference,
                                               FlowSampling sampling = FlowSampling::nearest);

/// Fraction of pixels whose discrepancy norm exceeds epsilon; major iff the
/// fraction is strictly above eta.
OcclusionReport occlusion_check(const FlowField& fwd, const FlowField& bwd, const OcclusionParams& params = {});

/// Supplies the (forward, backward) flow pair between an earlier frame and
/// the anchor frame.
class FlowProvider {
 public:
  virtual ~FlowProvider() = default;
  virtual std::pair<FlowField, FlowField> flows(const FrameRef& earlier, const FrameRef& anchor) = 0;
};

/// Block matching over images fetched by a caller-supplied loader.
class BlockMatchFlowProvider : public FlowProvider {
 public:
  using Loader = std::function<Plane<double>(const FrameRef&)>;
  BlockMatchFlowProvider(Loader loader, int block = 8, int search = 4)
      : loader_(std::move(loader)), block_(block), search_(search) {}
  std::pair<FlowField, FlowField> flows(const FrameRef& earlier, const FrameRef& anchor) override;

 private:
  Loader loader_;
  int block_;
  int search_;
};

/// Precomputed flows held in memory, keyed by (src frame id, dst frame id).
class TableFlowProvider : public FlowProvider {
 public:
  void add(int src, int dst, FlowField flow) { table_[{src, dst}] = std::move(flow); }
  std::pair<FlowField, FlowField> flows(const FrameRef& earlier, const FrameRef& anchor) override;

 private:
  std::map<std::pair<int, int>, FlowField> table_;
};

/// Reads GFL1 files named `<dir>/flow_<src>_<dst>.gfl`.
class FileFlowProvider : public FlowProvider {
 public:
  explicit FileFlowProvider(std::string dir) : dir_(std::move(dir)) {}
  std::pair<FlowField, FlowField> flows(const FrameRef& earlier, const FrameRef& anchor) override;
  static std::string file_name(int src, int dst);

 private:
  std::string dir_;
};

struct FrameOcclusion {
  int frame_id = 0;
  OcclusionReport report;
  std::size_t points = 0;
};

struct OcclusionAggregation {
  AlignmentWindow window;
  std::vector<FrameOcclusion> checked;  // one entry per earlier frame holding gaze points
  std::size_t dropped = 0;
  std::size_t translated = 0;
};

/// Aggregated window for frames[anchor_index] with occlusion correction.
/// Each gaze sample belongs to the latest frame shown at or before it. Points
/// of earlier frames are dropped on a major verdict, otherwise moved into the
/// anchor frame by the forward flow. Anchor-frame points pass unchanged.
OcclusionAggregation aggregate_with_occlusion(const GazeTrack& track, const std::vector<FrameRef>& frames,
                                              std::size_t anchor_index, std::int64_t delta_ms,
                                              FlowProvider& provider, const OcclusionParams& params = {});

std::string encode_gfl1(const FlowField& flow);
FlowField decode_gfl1(std::string_view bytes);
void write_flow(const std::string& path, const FlowField& flow);
FlowField read_flow(const std::string& path);

const char* to_string(OcclusionVerdict v);

}  // namespace gazereg

#endif  // GAZEREG_FLOW_OCCLUSION_HPP
