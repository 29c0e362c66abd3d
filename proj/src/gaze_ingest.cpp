#include "gazereg/gaze_ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "gazereg/errors.hpp"

namespace gazereg {
namespace {

constexpr std::string_view kHeader = "timestamp_ms,x,y";

std::string_view trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_field(std::string_view field, std::size_t line, const char* name) {
  T value{};
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || field.empty())
    throw ParseError(line, std::string("bad ") + name + " field '" + std::string(field) + "'");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ParseError(line, std::string("non-finite ") + name);
  }
  return value;
}

}  // namespace

GazeTrack parse_gaze_csv(std::string_view text) {
  GazeTrack track;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = trim_cr(text.substr(pos, end - pos));
    ++line_no;
    pos = end + 1;

    if (!header_seen) {
      if (line != kHeader) throw ParseError(line_no, "expected header 'timestamp_ms,x,y'");
      header_seen = true;
      continue;
    }
    if (line.empty()) {
      if (pos >= text.size()) break;
      throw ParseError(line_no, "empty row");
    }

    std::size_t c1 = line.find(',');
    std::size_t c2 = c1 == std::string_view::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string_view::npos || line.find(',', c2 + 1) != std::string_view::npos)
      throw ParseError(line_no, "expected 3 fields");

    GazeSample s;
    s.timestamp_ms = parse_field<std::int64_t>(line.substr(0, c1), line_no, "timestamp_ms");
    s.x = parse_field<double>(line.substr(c1 + 1, c2 - c1 - 1), line_no, "x");
    s.y = parse_field<double>(line.substr(c2 + 1), line_no, "y");

    if (!track.samples.empty()) {
      const auto prev = track.samples.back().timestamp_ms;
      if (s.timestamp_ms == prev) {
        track.samples.back() = s;
        ++track.duplicates_collapsed;
        continue;
      }
      if (s.timestamp_ms < prev)
        throw OrderingError("line " + std::to_string(line_no) + ": timestamp " +
                            std::to_string(s.timestamp_ms) + " precedes " + std::to_string(prev));
    }
    track.samples.push_back(s);
  }
  if (!header_seen) throw ParseError(1, "missing header");
  return track;
}

std::string to_gaze_csv(const GazeTrack& track) {
  // Shortest round-trip formatting, so parse(to_csv(t)) == t exactly.
  std::string out(kHeader);
  out += '\n';
  char buf[64];
  for (const auto& s : track.samples) {
    out += std::to_string(s.timestamp_ms);
    for (double v : {s.x, s.y}) {
      out += ',';
      out.append(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
    }
    out += '\n';
  }
  return out;
}

std::vector<FrameRef> parse_frame_manifest(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(1, std::string("frame manifest: ") + e.what());
  }
  if (!doc.is_array()) throw ParseError(1, "frame manifest must be a JSON array");
  std::vector<FrameRef> frames;
  frames.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& f = doc[i];
    try {
      FrameRef r;
      r.frame_id = f.at("frame_id").get<int>();
      r.timestamp_ms = f.at("timestamp_ms").get<std::int64_t>();
      r.image_path = f.value("image_path", std::string());
      r.width = f.at("width").get<int>();
      r.height = f.at("height").get<int>();
      frames.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(i + 1, std::string("frame manifest entry: ") + e.what());
    }
  }
  return frames;
}

std::string to_frame_manifest(const std::vector<FrameRef>& frames) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& f : frames) {
    doc.push_back({{"frame_id", f.frame_id},
                   {"timestamp_ms", f.timestamp_ms},
                   {"image_path", f.image_path},
                   {"width", f.width},
                   {"height", f.height}});
  }
  return doc.dump(2);
}

AlignmentWindow align_window(const GazeTrack& track, const FrameRef& frame, WindowMode mode,
                             std::int64_t delta_ms) {
  if (delta_ms < 0) throw ParameterError("align_window: delta_ms must be >= 0");
  AlignmentWindow w;
  w.frame_id = frame.frame_id;
  w.mode = mode;
  w.delta_ms = delta_ms;

  const auto& s = track.samples;
  const std::int64_t t = frame.timestamp_ms;
  // First sample strictly after t.
  auto upper = std::upper_bound(s.begin(), s.end(), t,
                                [](std::int64_t v, const GazeSample& g) { return v < g.timestamp_ms; });
  if (mode == WindowMode::singular) {
    if (upper != s.begin()) w.selected.push_back(*std::prev(upper));
    return w;
  }
  auto lower = std::lower_bound(s.begin(), s.end(), t - delta_ms,
                                [](const GazeSample& g, std::int64_t v) { return g.timestamp_ms < v; });
  if (lower < upper) w.selected.assign(lower, upper);
  return w;
}

std::size_t max_window_samples(std::int64_t delta_ms, double rate_hz) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(delta_ms) * rate_hz / 1000.0)) + 1;
}

const char* to_string(WindowMode mode) {
  return mode == WindowMode::singular ? "singular" : "aggregated";
}

WindowMode window_mode_from_string(std::string_view s) {
  if (s == "singular") return WindowMode::singular;
  if (s == "aggregated") return WindowMode::aggregated;
  throw ConfigError("unknown window mode '" + std::string(s) + "'");
}

}  // namespace gazereg
