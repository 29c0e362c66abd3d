#ifndef GAZEREG_SYNTH_HPP
#define GAZEREG_SYNTH_HPP

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazereg/flow_occlusion.hpp"
#include "gazereg/gaze_ingest.hpp"
#include "gazereg/image.hpp"
#include "gazereg/patch_distribution.hpp"

namespace gazereg {

/// splitmix64 finaliser; used to derive independent per-sample seeds.
std::uint64_t mix_seed(std::uint64_t x);

/// Planted-signal task. Every keyframe holds one clean glyph (the signal) and
/// noisy glyphs of random classes everywhere else. Gaze follows the signal.
/// Output tokens per step are [class slot, location slot, ...]; see
/// future_tokens() for the exact rule.
struct SynthConfig {
  int n_h = 4;
  int n_v = 4;
  int patch_px = 8;
  int channels = 3;
  int n_classes = 8;
  int tau_o = 5;
  int tau_a = 2;
  int tokens_per_frame = 2;  // L
  double signal_noise = 0.05;
  double distractor_noise = 0.35;
  double gaze_jitter_px = 1.5;
  double saccade_prob = 0.3;   // chance a gaze sample lands anywhere in the frame
  double label_noise = 0.0;    // chance a token is resampled within its slot range
  double occlusion_prob = 0.0; // chance a keyframe gets an occluding sub-frame
  double occluder_coverage = 0.8;
  std::uint64_t motion_seed = 7;
  std::uint64_t glyph_seed = 1234;
  int frame_spacing_ms = 1000;
  double rate_hz = 30.0;
  int n_train = 3000;
  int n_val = 200;
  int n_test = 500;

  PatchGrid grid() const { return {n_h, n_v, patch_px, patch_px}; }
  int width() const { return n_h * patch_px; }
  int height() const { return n_v * patch_px; }
  int patches() const { return n_h * n_v; }
  /// Token ids used: classes [0, n_classes), locations [n_classes, n_classes + N).
  int vocab_needed() const { return n_classes + patches(); }
  std::int64_t frame_time(int k) const { return static_cast<std::int64_t>(k + 1) * frame_spacing_ms; }

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

/// Extra frame shown shortly before a keyframe. Occluded sub-frames carry a
/// large rectangle that the wearer looks at; it leaves the view by the
/// keyframe. Flows are ground truth towards the keyframe.
struct SubFrame {
  FrameRef ref;
  int key_frame = 0;
  bool occluded = false;
  double coverage = 0.0;
  Image image;
  FlowField fwd;  // sub-frame -> keyframe
  FlowField bwd;  // keyframe -> sub-frame
};

struct SynthSample {
  std::vector<Image> frames;  // tau_o keyframes
  std::vector<FrameRef> frame_refs;
  GazeTrack gaze;
  std::vector<int> signal_class;  // per keyframe
  std::vector<int> signal_patch;  // per keyframe
  std::vector<int> future_tokens;   // tau_a * L
  std::vector<int> current_tokens;  // tau_o * L
  std::vector<SubFrame> sub_frames;
};

struct SynthDataset {
  SynthConfig config;
  std::uint64_t seed = 0;
  std::vector<SynthSample> train, val, test;

  const std::vector<SynthSample>& split(const std::string& name) const;
};

/// Fixed glyph bitmaps, patch_px x patch_px, exactly half the pixels set.
std::vector<Plane<double>> make_glyphs(const SynthConfig& config);

/// Clean token rule for one sample; `rng` only drives label noise.
std::vector<int> future_tokens(const SynthConfig& config, const std::vector<int>& classes,
                               const std::vector<int>& patches, std::mt19937_64* noise_rng);
std::vector<int> current_tokens(const SynthConfig& config, const std::vector<int>& classes,
                                const std::vector<int>& patches, std::mt19937_64* noise_rng);

SynthSample generate_sample(const SynthConfig& config, const std::vector<Plane<double>>& glyphs,
                            std::uint64_t sample_seed);
SynthDataset generate(const SynthConfig& config, std::uint64_t seed);

/// Accuracy of the optimal predictor that knows the signal patch, by
/// enumerating every (class, position, step, slot) outcome.
double bayes_ceiling(const SynthConfig& config);

/// Every sub-frame and keyframe of a sample, ordered by time.
std::vector<FrameRef> frames_for_key(const SynthSample& sample, int key_frame);
/// Ground-truth flows for a sample's sub-frame/keyframe pairs.
TableFlowProvider ground_truth_flows(const SynthSample& sample);

/// Stand-alone occlusion scene: background panned by `pan_px`, plus an
/// occluder covering `coverage` of the source frame that leaves the view in
/// the destination. The mask marks occluder pixels in the source frame.
struct OcclusionScene {
  Image src;
  Image dst;
  FlowField fwd;
  FlowField bwd;
  Plane<double> mask;
  double coverage = 0.0;
};
OcclusionScene make_occlusion_scene(int width, int height, double coverage, int pan_px, std::mt19937_64& rng);

// On-disk layout: <dir>/index.json plus <dir>/<split>/<index>/ holding
// frame_<k>.gim, gaze.csv, frames.json and, for occlusion events,
// sub_<id>.gim and flow_<src>_<dst>.gfl files.
void write_dataset(const SynthDataset& data, const std::string& dir);
SynthDataset read_dataset(const std::string& dir);

}  // namespace gazereg

#endif  // GAZEREG_SYNTH_HPP
