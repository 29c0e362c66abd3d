#include "gazereg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "gazereg/containers.hpp"

namespace gazereg {
namespace fs = std::filesystem;

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

constexpr int kOccluderExit = 24;  // px an occluder travels between sub-frame and keyframe
constexpr int kSubFrameBase = 100;

// Values go through f32 so in-memory and on-disk datasets are identical.
double q32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::uint64_t split_tag(const std::string& split) {
  if (split == "train") return 1;
  if (split == "val") return 2;
  return 3;
}

std::vector<std::vector<int>> slot_permutations(const SynthConfig& c) {
  std::mt19937_64 rng(mix_seed(c.motion_seed));
  std::vector<std::vector<int>> perms;
  for (int i = 0; i < c.tau_a * c.tokens_per_frame; ++i) {
    std::vector<int> p(static_cast<std::size_t>(c.n_classes));
    for (int k = 0; k < c.n_classes; ++k) p[static_cast<std::size_t>(k)] = k;
    std::shuffle(p.begin(), p.end(), rng);
    perms.push_back(std::move(p));
  }
  return perms;
}

int maybe_noisy(int token, int lo, int range, double p, std::mt19937_64* rng) {
  if (!rng || p <= 0.0) return token;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(*rng) < p) return lo + std::uniform_int_distribution<int>(0, range - 1)(*rng);
  return token;
}

void paint_glyph(Image& img, const Plane<double>& glyph, int px, int py, double noise, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, noise);
  const int s = static_cast<int>(glyph.rows());
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        img(c, py + y, px + x) = q32(std::clamp(0.2 + 0.6 * glyph(y, x) + n(rng), 0.0, 1.0));
}

}  // namespace

// -------------------------------------------------------------------- config

void SynthConfig::validate() const {
  if (n_h <= 0 || n_v <= 0 || patch_px <= 1 || channels <= 0) throw ConfigError("synth: grid sizes must be positive");
  if (n_classes < 2) throw ConfigError("synth: need at least two classes");
  if (tau_o < 1 || tau_a < 1 || tokens_per_frame < 1) throw ConfigError("synth: tau_o, tau_a and L must be >= 1");
  if (signal_noise < 0 || distractor_noise < 0 || gaze_jitter_px < 0) throw ConfigError("synth: noise must be >= 0");
  for (double p : {saccade_prob, label_noise, occlusion_prob, occluder_coverage})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synth: probabilities must lie in [0, 1]");
  if (frame_spacing_ms <= 0 || !(rate_hz > 0)) throw ConfigError("synth: timing must be positive");
  if (n_train < 0 || n_val < 0 || n_test < 0) throw ConfigError("synth: split sizes must be >= 0");
  if ((patch_px * patch_px) % 2 != 0) throw ConfigError("synth: patch_px squared must be even");
}

nlohmann::json SynthConfig::to_json() const {
  return {{"n_h", n_h},
          {"n_v", n_v},
          {"patch_px", patch_px},
          {"channels", channels},
          {"n_classes", n_classes},
          {"tau_o", tau_o},
          {"tau_a", tau_a},
          {"tokens_per_frame", tokens_per_frame},
          {"signal_noise", signal_noise},
          {"distractor_noise", distractor_noise},
          {"gaze_jitter_px", gaze_jitter_px},
          {"saccade_prob", saccade_prob},
          {"label_noise", label_noise},
          {"occlusion_prob", occlusion_prob},
          {"occluder_coverage", occluder_coverage},
          {"motion_seed", motion_seed},
          {"glyph_seed", glyph_seed},
          {"frame_spacing_ms", frame_spacing_ms},
          {"rate_hz", rate_hz},
          {"n_train", n_train},
          {"n_val", n_val},
          {"n_test", n_test}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("n_h", c.n_h);
  get("n_v", c.n_v);
  get("patch_px", c.patch_px);
  get("channels", c.channels);
  get("n_classes", c.n_classes);
  get("tau_o", c.tau_o);
  get("tau_a", c.tau_a);
  get("tokens_per_frame", c.tokens_per_frame);
  get("signal_noise", c.signal_noise);
  get("distractor_noise", c.distractor_noise);
  get("gaze_jitter_px", c.gaze_jitter_px);
  get("saccade_prob", c.saccade_prob);
  get("label_noise", c.label_noise);
  get("occlusion_prob", c.occlusion_prob);
  get("occluder_coverage", c.occluder_coverage);
  get("motion_seed", c.motion_seed);
  get("glyph_seed", c.glyph_seed);
  get("frame_spacing_ms", c.frame_spacing_ms);
  get("rate_hz", c.rate_hz);
  get("n_train", c.n_train);
  get("n_val", c.n_val);
  get("n_test", c.n_test);
  return c;
}

const std::vector<SynthSample>& SynthDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

// -------------------------------------------------------------------- tokens

std::vector<Plane<double>> make_glyphs(const SynthConfig& c) {
  std::mt19937_64 rng(mix_seed(c.glyph_seed));
  const int n = c.patch_px * c.patch_px;
  std::vector<Plane<double>> glyphs;
  while (static_cast<int>(glyphs.size()) < c.n_classes) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    Plane<double> g = Plane<double>::Zero(c.patch_px, c.patch_px);
    for (int i = 0; i < n / 2; ++i) g(idx[static_cast<std::size_t>(i)] / c.patch_px, idx[static_cast<std::size_t>(i)] % c.patch_px) = 1.0;
    bool duplicate = false;
    for (const auto& o : glyphs) duplicate = duplicate || (o == g).all();
    if (!duplicate) glyphs.push_back(std::move(g));
  }
  return glyphs;
}

std::vector<int> future_tokens(const SynthConfig& c, const std::vector<int>& classes, const std::vector<int>& patches,
                               std::mt19937_64* noise_rng) {
  const auto perms = slot_permutations(c);
  const int n = c.patches();
  std::vector<int> out;
  for (int s = 0; s < c.tau_a; ++s)
    for (int j = 0; j < c.tokens_per_frame; ++j) {
      // Slot pairs reach back one frame at a time from the latest.
      const auto f = static_cast<std::size_t>(std::max(0, c.tau_o - 1 - j / 2));
      if (j % 2 == 0) {
        const int tok = perms[static_cast<std::size_t>(s * c.tokens_per_frame + j)][static_cast<std::size_t>(classes[f])];
        out.push_back(maybe_noisy(tok, 0, c.n_classes, c.label_noise, noise_rng));
      } else {
        const int tok = c.n_classes + (patches[f] + s + 1) % n;
        out.push_back(maybe_noisy(tok, c.n_classes, n, c.label_noise, noise_rng));
      }
    }
  return out;
}

std::vector<int> current_tokens(const SynthConfig& c, const std::vector<int>& classes, const std::vector<int>& patches,
                                std::mt19937_64* noise_rng) {
  std::vector<int> out;
  for (int k = 0; k < c.tau_o; ++k)
    for (int j = 0; j < c.tokens_per_frame; ++j) {
      const auto ku = static_cast<std::size_t>(k);
      if (j % 2 == 0)
        out.push_back(maybe_noisy(classes[ku], 0, c.n_classes, c.label_noise, noise_rng));
      else
        out.push_back(maybe_noisy(c.n_classes + patches[ku], c.n_classes, c.patches(), c.label_noise, noise_rng));
    }
  return out;
}

double bayes_ceiling(const SynthConfig& c) {
  c.validate();
  if (c.patches() > 16 || c.n_classes > 8) throw ParameterError("bayes_ceiling: config too large to enumerate");
  // For each clean outcome the observed token equals the clean one with
  // probability (1-p) + p/range and any other with p/range; the optimal
  // guess is the clean token.
  double total = 0.0;
  std::size_t count = 0;
  for (int cls = 0; cls < c.n_classes; ++cls)
    for (int pos = 0; pos < c.patches(); ++pos) {
      const std::vector<int> classes(static_cast<std::size_t>(c.tau_o), cls);
      const std::vector<int> patches(static_cast<std::size_t>(c.tau_o), pos);
      const auto clean = future_tokens(c, classes, patches, nullptr);
      for (std::size_t t = 0; t < clean.size(); ++t) {
        const bool is_class = (t % static_cast<std::size_t>(c.tokens_per_frame)) % 2 == 0;
        const int range = is_class ? c.n_classes : c.patches();
        const int lo = is_class ? 0 : c.n_classes;
        std::vector<double> dist(static_cast<std::size_t>(c.vocab_needed()), 0.0);
        for (int r = 0; r < range; ++r) dist[static_cast<std::size_t>(lo + r)] += c.label_noise / range;
        dist[static_cast<std::size_t>(clean[t])] += 1.0 - c.label_noise;
        total += *std::max_element(dist.begin(), dist.end());
        ++count;
      }
    }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------- generation

SynthSample generate_sample(const SynthConfig& c, const std::vector<Plane<double>>& glyphs, std::uint64_t sample_seed) {
  std::mt19937_64 rng(sample_seed);
  std::uniform_int_distribution<int> pick_class(0, c.n_classes - 1);
  std::uniform_int_distribution<int> pick_patch(0, c.patches() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int w = c.width(), h = c.height(), pp = c.patch_px;

  SynthSample s;
  for (int k = 0; k < c.tau_o; ++k) {
    const int cls = pick_class(rng);
    const int pos = pick_patch(rng);
    s.signal_class.push_back(cls);
    s.signal_patch.push_back(pos);
    Image img(w, h, c.channels);
    for (int n = 0; n < c.patches(); ++n) {
      const int px = (n % c.n_h) * pp, py = (n / c.n_h) * pp;
      if (n == pos)
        paint_glyph(img, glyphs[static_cast<std::size_t>(cls)], px, py, c.signal_noise, rng);
      else
        paint_glyph(img, glyphs[static_cast<std::size_t>(pick_class(rng))], px, py, c.distractor_noise, rng);
    }
    s.frames.push_back(std::move(img));
    s.frame_refs.push_back({k, c.frame_time(k), "frame_" + std::to_string(k) + ".gim", w, h});
  }

  // Occlusion events: an occluded sub-frame 200 ms before the keyframe and a
  // clean one 100 ms before it.
  struct Target {
    std::int64_t from, to;
    double cx, cy;
  };
  std::vector<Target> occluder_targets;
  for (int k = 0; k < c.tau_o; ++k) {
    if (!(unit(rng) < c.occlusion_prob)) continue;
    const std::int64_t tk = c.frame_time(k);
    const int side_w = std::min(w, static_cast<int>(std::ceil(std::sqrt(c.occluder_coverage) * w)));
    const int side_h = std::min(h, static_cast<int>(std::ceil(c.occluder_coverage * w * h / side_w)));
    const int x0 = std::uniform_int_distribution<int>(0, w - side_w)(rng);
    const int y0 = std::uniform_int_distribution<int>(0, h - side_h)(rng);

    SubFrame occ;
    occ.ref = {kSubFrameBase + 2 * k, tk - 200, "sub_" + std::to_string(kSubFrameBase + 2 * k) + ".gim", w, h};
    occ.key_frame = k;
    occ.occluded = true;
    occ.image = s.frames[static_cast<std::size_t>(k)];
    occ.fwd = FlowField::zero(w, h);
    occ.bwd = FlowField::zero(w, h);
    for (int ch = 0; ch < c.channels; ++ch)
      for (int y = y0; y < y0 + side_h; ++y)
        for (int x = x0; x < x0 + side_w; ++x) occ.image(ch, y, x) = q32(0.1);
    occ.fwd.fx.block(y0, x0, side_h, side_w).setConstant(kOccluderExit);
    occ.coverage = double(side_w) * side_h / (double(w) * h);
    occ.fwd.src_frame = occ.bwd.dst_frame = occ.ref.frame_id;
    occ.fwd.dst_frame = occ.bwd.src_frame = k;

    SubFrame clean;
    clean.ref = {kSubFrameBase + 2 * k + 1, tk - 100, "sub_" + std::to_string(kSubFrameBase + 2 * k + 1) + ".gim", w, h};
    clean.key_frame = k;
    clean.image = s.frames[static_cast<std::size_t>(k)];
    clean.fwd = FlowField::zero(w, h);
    clean.bwd = FlowField::zero(w, h);
    clean.fwd.src_frame = clean.bwd.dst_frame = clean.ref.frame_id;
    clean.fwd.dst_frame = clean.bwd.src_frame = k;

    occluder_targets.push_back({tk - 200, tk - 100, x0 + (side_w - 1) / 2.0, y0 + (side_h - 1) / 2.0});
    s.sub_frames.push_back(std::move(occ));
    s.sub_frames.push_back(std::move(clean));
  }

  // Gaze at 30 Hz, ~33 ms apart, aimed at the signal of the frame on screen.
  std::normal_distribution<double> jitter(0.0, c.gaze_jitter_px > 0 ? c.gaze_jitter_px : 1.0);
  const double step_ms = std::floor(1000.0 / c.rate_hz);
  s.gaze.rate_hz = c.rate_hz;
  for (std::int64_t i = 0;; ++i) {
    const auto ts = static_cast<std::int64_t>(i * step_ms);
    if (ts > c.frame_time(c.tau_o - 1)) break;
    int k = 0;
    while (k < c.tau_o - 1 && ts > c.frame_time(k)) ++k;
    const int pos = s.signal_patch[static_cast<std::size_t>(k)];
    double x = (pos % c.n_h) * pp + (pp - 1) / 2.0;
    double y = (pos / c.n_h) * pp + (pp - 1) / 2.0;
    for (const auto& t : occluder_targets)
      if (ts >= t.from && ts < t.to) {
        x = t.cx;
        y = t.cy;
      }
    const bool saccade = unit(rng) < c.saccade_prob;
    const double ux = unit(rng) * w, uy = unit(rng) * h;
    const double jx = jitter(rng), jy = jitter(rng);
    if (saccade) {
      x = ux;
      y = uy;
    } else if (c.gaze_jitter_px > 0) {
      x += jx;
      y += jy;
    }
    s.gaze.samples.push_back({ts, x, y});
  }

  std::mt19937_64 label_rng(mix_seed(sample_seed ^ 0x5bd1e995ULL));
  s.future_tokens = future_tokens(c, s.signal_class, s.signal_patch, &label_rng);
  s.current_tokens = current_tokens(c, s.signal_class, s.signal_patch, &label_rng);
  return s;
}

SynthDataset generate(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  SynthDataset d;
  d.config = config;
  d.seed = seed;
  const auto glyphs = make_glyphs(config);
  auto fill = [&](const std::string& name, int count, std::vector<SynthSample>& out) {
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
      out.push_back(generate_sample(config, glyphs, mix_seed(seed ^ (split_tag(name) << 40) ^ std::uint64_t(i))));
  };
  fill("train", config.n_train, d.train);
  fill("val", config.n_val, d.val);
  fill("test", config.n_test, d.test);
  return d;
}

std::vector<FrameRef> frames_for_key(const SynthSample& sample, int key_frame) {
  std::vector<FrameRef> out;
  for (const auto& sf : sample.sub_frames)
    if (sf.key_frame == key_frame) out.push_back(sf.ref);
  out.push_back(sample.frame_refs.at(static_cast<std::size_t>(key_frame)));
  return out;
}

TableFlowProvider ground_truth_flows(const SynthSample& sample) {
  TableFlowProvider t;
  for (const auto& sf : sample.sub_frames) {
    t.add(sf.ref.frame_id, sf.key_frame, sf.fwd);
    t.add(sf.key_frame, sf.ref.frame_id, sf.bwd);
  }
  return t;
}

OcclusionScene make_occlusion_scene(int width, int height, double coverage, int pan_px, std::mt19937_64& rng) {
  if (!(coverage >= 0.0 && coverage <= 1.0)) throw ParameterError("occlusion scene: coverage must lie in [0, 1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  OcclusionScene sc;
  sc.src = Image(width, height, 1);
  sc.dst = Image(width, height, 1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) sc.src(0, y, x) = unit(rng);
  // Background pans right by pan_px; uncovered columns get fresh texture.
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) sc.dst(0, y, x) = x - pan_px >= 0 && x - pan_px < width ? sc.src(0, y, x - pan_px) : unit(rng);

  // The occluder is a raster run of exactly round(coverage * w * h) pixels.
  const int total = width * height;
  const int count = static_cast<int>(std::lround(coverage * total));
  const int start = count < total ? std::uniform_int_distribution<int>(0, (total - count) / width)(rng) * width : 0;
  sc.mask = Plane<double>::Zero(height, width);
  sc.fwd = FlowField::constant(width, height, pan_px, 0.0);
  sc.bwd = FlowField::constant(width, height, -pan_px, 0.0);
  for (int i = start; i < start + count; ++i) {
    const int y = i / width, x = i % width;
    sc.mask(y, x) = 1.0;
    sc.src(0, y, x) = 0.05;
    sc.fwd.fx(y, x) = pan_px + width;  // leaves the view entirely
  }
  sc.coverage = double(count) / total;
  sc.fwd.src_frame = sc.bwd.dst_frame = 0;
  sc.fwd.dst_frame = sc.bwd.src_frame = 1;
  return sc;
}

// ------------------------------------------------------------------ disk I/O

namespace {

nlohmann::json sample_meta(const SynthSample& s) {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& sf : s.sub_frames)
    subs.push_back({{"frame_id", sf.ref.frame_id},
                    {"timestamp_ms", sf.ref.timestamp_ms},
                    {"key_frame", sf.key_frame},
                    {"occluded", sf.occluded},
                    {"coverage", sf.coverage}});
  return {{"signal_class", s.signal_class},
          {"signal_patch", s.signal_patch},
          {"future_tokens", s.future_tokens},
          {"current_tokens", s.current_tokens},
          {"sub_frames", subs}};
}

void write_sample(const SynthSample& s, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < s.frames.size(); ++k)
    write_image((dir / s.frame_refs[k].image_path).string(), s.frames[k].cast<float>());
  io::write_file((dir / "frames.json").string(), to_frame_manifest(s.frame_refs));
  io::write_file((dir / "gaze.csv").string(), to_gaze_csv(s.gaze));
  for (const auto& sf : s.sub_frames) {
    write_image((dir / sf.ref.image_path).string(), sf.image.cast<float>());
    write_flow((dir / FileFlowProvider::file_name(sf.ref.frame_id, sf.key_frame)).string(), sf.fwd);
    write_flow((dir / FileFlowProvider::file_name(sf.key_frame, sf.ref.frame_id)).string(), sf.bwd);
  }
  io::write_file((dir / "sample.json").string(), sample_meta(s).dump(1) + "\n");
}

SynthSample read_sample(const fs::path& dir, const SynthConfig& c) {
  SynthSample s;
  s.frame_refs = parse_frame_manifest(io::read_file((dir / "frames.json").string()));
  for (const auto& f : s.frame_refs) s.frames.push_back(read_image((dir / f.image_path).string()).cast<double>());
  s.gaze = parse_gaze_csv(io::read_file((dir / "gaze.csv").string()));
  s.gaze.rate_hz = c.rate_hz;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_file((dir / "sample.json").string()));
    s.signal_class = meta.at("signal_class").get<std::vector<int>>();
    s.signal_patch = meta.at("signal_patch").get<std::vector<int>>();
    s.future_tokens = meta.at("future_tokens").get<std::vector<int>>();
    s.current_tokens = meta.at("current_tokens").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("sample metadata in " + dir.string() + ": " + e.what());
  }
  for (const auto& m : meta.at("sub_frames")) {
    SubFrame sf;
    const int id = m.at("frame_id");
    sf.key_frame = m.at("key_frame");
    sf.occluded = m.at("occluded");
    sf.coverage = m.at("coverage");
    sf.ref = {id, m.at("timestamp_ms").get<std::int64_t>(), "sub_" + std::to_string(id) + ".gim", c.width(), c.height()};
    sf.image = read_image((dir / sf.ref.image_path).string()).cast<double>();
    sf.fwd = read_flow((dir / FileFlowProvider::file_name(id, sf.key_frame)).string());
    sf.bwd = read_flow((dir / FileFlowProvider::file_name(sf.key_frame, id)).string());
    sf.fwd.src_frame = sf.bwd.dst_frame = id;
    sf.fwd.dst_frame = sf.bwd.src_frame = sf.key_frame;
    s.sub_frames.push_back(std::move(sf));
  }
  return s;
}

std::string sample_dir_name(std::size_t i) {
  std::string n = std::to_string(i);
  return std::string(n.size() < 5 ? 5 - n.size() : 0, '0') + n;
}

}  // namespace

void write_dataset(const SynthDataset& data, const std::string& dir) {
  try {
    fs::create_directories(dir);
    nlohmann::json index = {{"format", "gazereg-synth-1"},
                            {"seed", data.seed},
                            {"config", data.config.to_json()},
                            {"splits", {{"train", data.train.size()}, {"val", data.val.size()}, {"test", data.test.size()}}}};
    io::write_file((fs::path(dir) / "index.json").string(), index.dump(2) + "\n");
    for (const char* name : {"train", "val", "test"}) {
      const auto& split = data.split(name);
      for (std::size_t i = 0; i < split.size(); ++i) write_sample(split[i], fs::path(dir) / name / sample_dir_name(i));
    }
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("write_dataset: ") + e.what());
  }
}

SynthDataset read_dataset(const std::string& dir) {
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(io::read_file((fs::path(dir) / "index.json").string()));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("dataset index: ") + e.what());
  }
  SynthDataset d;
  try {
    d.config = SynthConfig::from_json(index.at("config"));
    d.seed = index.at("seed");
    for (const char* name : {"train", "val", "test"}) {
      const std::size_t n = index.at("splits").at(name);
      auto& split = std::string(name) == "train" ? d.train : std::string(name) == "val" ? d.val : d.test;
      for (std::size_t i = 0; i < n; ++i) split.push_back(read_sample(fs::path(dir) / name / sample_dir_name(i), d.config));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset index: ") + e.what());
  }
  return d;
}

}  // namespace gazereg
