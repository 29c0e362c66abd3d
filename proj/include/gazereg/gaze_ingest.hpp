#ifndef GAZEREG_GAZE_INGEST_HPP
#define GAZEREG_GAZE_INGEST_HPP

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace gazereg {

/// One eye-tracker reading: milliseconds since stream start and a pixel
/// position. Raw samples may lie outside the frame; they are kept and
/// excluded later at heatmap time.
struct GazeSample {
  std::int64_t timestamp_ms = 0;
  double x = 0.0;
  double y = 0.0;

  bool in_bounds(int width, int height) const {
    return x >= 0.0 && y >= 0.0 && x < width && y < height;
  }
  friend bool operator==(const GazeSample&, const GazeSample&) = default;
};

struct GazeTrack {
  std::vector<GazeSample> samples;  // strictly increasing timestamps
  double rate_hz = 30.0;
  std::size_t duplicates_collapsed = 0;
};

struct FrameRef {
  int frame_id = 0;
  std::int64_t timestamp_ms = 0;
  std::string image_path;
  int width = 0;
  int height = 0;
};

enum class WindowMode { singular, aggregated };

struct AlignmentWindow {
  int frame_id = 0;
  WindowMode mode = WindowMode::aggregated;
  std::int64_t delta_ms = 200;
  std::vector<GazeSample> selected;

  /// An empty window is a valid result; callers pick their own fallback.
  bool is_empty() const { return selected.empty(); }
};

/// Parses the `timestamp_ms,x,y` CSV format. Repeated timestamps collapse to
/// the last occurrence; decreasing timestamps raise OrderingError.
GazeTrack parse_gaze_csv(std::string_view text);
std::string to_gaze_csv(const GazeTrack& track);

/// Frame manifest: JSON array of {frame_id, timestamp_ms, image_path, width, height}.
std::vector<FrameRef> parse_frame_manifest(std::string_view json_text);
std::string to_frame_manifest(const std::vector<FrameRef>& frames);

/// Singular mode picks the latest sample at or before the frame time.
/// Aggregated mode takes every sample in the closed interval [t - delta, t].
AlignmentWindow align_window(const GazeTrack& track, const FrameRef& frame, WindowMode mode,
                             std::int64_t delta_ms);

/// Upper bound on |selected| for an aggregated window at the given rate.
std::size_t max_window_samples(std::int64_t delta_ms, double rate_hz);

const char* to_string(WindowMode mode);
WindowMode window_mode_from_string(std::string_view s);

}  // namespace gazereg

#endif  // GAZEREG_GAZE_INGEST_HPP
