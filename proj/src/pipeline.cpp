#include "gazereg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "gazereg/containers.hpp"

namespace gazereg {
namespace fs = std::filesystem;

// ----------------------------------------------------------------- enum text

const char* to_string(Task t) { return t == Task::future_prediction ? "future_prediction" : "activity_understanding"; }

const char* to_string(ModelKind m) {
  switch (m) {
    case ModelKind::base: return "base";
    case ModelKind::singular_gaze: return "singular_gaze";
    case ModelKind::aggregated_gaze: return "aggregated_gaze";
  }
  return "?";
}

const char* to_string(QueryMode q) {
  switch (q) {
    case QueryMode::overlay: return "overlay";
    case QueryMode::pseudo: return "pseudo";
    case QueryMode::rgb: return "rgb";
    case QueryMode::overlay_train_rgb_test: return "overlay-train-rgb-test";
    case QueryMode::gaze_text: return "gaze-text";
  }
  return "?";
}

QueryMode query_mode_from_string(const std::string& s) {
  for (QueryMode q : {QueryMode::overlay, QueryMode::pseudo, QueryMode::rgb, QueryMode::overlay_train_rgb_test,
                      QueryMode::gaze_text})
    if (s == to_string(q)) return q;
  throw ConfigError("unknown query_mode '" + s + "'");
}

namespace {

Task task_from_string(const std::string& s) {
  if (s == "future_prediction") return Task::future_prediction;
  if (s == "activity_understanding") return Task::activity_understanding;
  throw ConfigError("unknown task '" + s + "'");
}

ModelKind model_from_string(const std::string& s) {
  for (ModelKind m : {ModelKind::base, ModelKind::singular_gaze, ModelKind::aggregated_gaze})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown model '" + s + "'");
}

const char* to_string(ConsistencyVariant v) {
  return v == ConsistencyVariant::magnitude_difference ? "magnitude_difference" : "vector_sum";
}

ConsistencyVariant variant_from_string(const std::string& s) {
  if (s == "magnitude_difference") return ConsistencyVariant::magnitude_difference;
  if (s == "vector_sum") return ConsistencyVariant::vector_sum;
  throw ConfigError("unknown occlusion variant '" + s + "'");
}

const char* to_string(FlowSampling s) { return s == FlowSampling::nearest ? "nearest" : "bilinear"; }

FlowSampling sampling_from_string(const std::string& s) {
  if (s == "nearest") return FlowSampling::nearest;
  if (s == "bilinear") return FlowSampling::bilinear;
  throw ConfigError("unknown flow sampling '" + s + "'");
}

void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
    const auto& k = known.at(it.key());
    if (k.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + where + it.key() + "' must be an object");
      reject_unknown(it.value(), k, where + it.key() + ".");
    }
  }
}

}  // namespace

// -------------------------------------------------------------------- config

nlohmann::json RunConfig::defaults() {
  const RunConfig d;
  return d.to_json();
}

nlohmann::json RunConfig::to_json() const {
  return {{"task", to_string(task)},
          {"model", to_string(model)},
          {"query_mode", to_string(query_mode)},
          {"lambda", lambda},
          {"architecture",
           {{"n_blocks", n_blocks},
            {"heads", heads},
            {"dim", dim},
            {"context", context},
            {"token_dim", token_dim},
            {"hidden", hidden},
            {"pseudo_c1", pseudo_c1},
            {"pseudo_c2", pseudo_c2}}},
          {"gaze",
           {{"delta_ms", delta_ms},
            {"sigma_px", sigma_px},
            {"binarize_tau", binarize_tau},
            {"target", target},
            {"overlay_alpha", overlay_alpha}}},
          {"occlusion",
           {{"enabled", occlusion},
            {"flow", flow},
            {"epsilon", occlusion_params.epsilon_px},
            {"eta", occlusion_params.eta_threshold},
            {"variant", to_string(occlusion_params.variant)},
            {"sampling", to_string(occlusion_params.sampling)},
            {"block", block},
            {"search", search}}},
          {"train",
           {{"optimizer", train.optimizer},
            {"epochs", train.epochs},
            {"batch_size", train.batch_size},
            {"lr", train.lr},
            {"momentum", train.momentum},
            {"beta2", train.beta2},
            {"adam_eps", train.adam_eps},
            {"clip_norm", train.clip_norm},
            {"weight_decay", train.weight_decay},
            {"max_steps", train.max_steps},
            {"log_every", train.log_every}}},
          {"eval", {{"split", eval_split}, {"corruption_p", corruption_p}, {"rouge_beta", rouge_beta}}},
          {"seed", seed},
          {"seeds", seeds},
          {"data", {{"path", data_path}, {"seed", data_seed}, {"synth", synth.to_json()}}},
          {"output_dir", output_dir},
          {"sweep", {{"axis", sweep_axis}, {"values", sweep_values}, {"workers", workers}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& user) {
  nlohmann::json j = defaults();
  reject_unknown(user, j, "");
  j.merge_patch(user);
  RunConfig c;
  try {
    c.task = task_from_string(j.at("task"));
    c.model = model_from_string(j.at("model"));
    c.query_mode = query_mode_from_string(j.at("query_mode"));
    c.lambda = j.at("lambda");
    const auto& a = j.at("architecture");
    c.n_blocks = a.at("n_blocks");
    c.heads = a.at("heads");
    c.dim = a.at("dim");
    c.context = a.at("context");
    c.token_dim = a.at("token_dim");
    c.hidden = a.at("hidden");
    c.pseudo_c1 = a.at("pseudo_c1");
    c.pseudo_c2 = a.at("pseudo_c2");
    const auto& g = j.at("gaze");
    c.delta_ms = g.at("delta_ms");
    c.sigma_px = g.at("sigma_px");
    c.binarize_tau = g.at("binarize_tau");
    c.target = g.at("target");
    c.overlay_alpha = g.at("overlay_alpha");
    const auto& o = j.at("occlusion");
    c.occlusion = o.at("enabled");
    c.flow = o.at("flow");
    c.occlusion_params.epsilon_px = o.at("epsilon");
    c.occlusion_params.eta_threshold = o.at("eta");
    c.occlusion_params.variant = variant_from_string(o.at("variant"));
    c.occlusion_params.sampling = sampling_from_string(o.at("sampling"));
    c.block = o.at("block");
    c.search = o.at("search");
    const auto& t = j.at("train");
    c.train.optimizer = t.at("optimizer");
    c.train.epochs = t.at("epochs");
    c.train.batch_size = t.at("batch_size");
    c.train.lr = t.at("lr");
    c.train.momentum = t.at("momentum");
    c.train.beta2 = t.at("beta2");
    c.train.adam_eps = t.at("adam_eps");
    c.train.clip_norm = t.at("clip_norm");
    c.train.weight_decay = t.at("weight_decay");
    c.train.max_steps = t.at("max_steps");
    c.train.log_every = t.at("log_every");
    const auto& e = j.at("eval");
    c.eval_split = e.at("split");
    c.corruption_p = e.at("corruption_p");
    c.rouge_beta = e.at("rouge_beta");
    c.seed = j.at("seed");
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    const auto& d = j.at("data");
    c.data_path = d.at("path");
    c.data_seed = d.at("seed");
    c.synth = SynthConfig::from_json(d.at("synth"));
    c.output_dir = j.at("output_dir");
    const auto& s = j.at("sweep");
    c.sweep_axis = s.at("axis");
    c.sweep_values = s.at("values");
    c.workers = s.at("workers");
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  return c;
}

void RunConfig::validate() const {
  synth.validate();
  const bool gaze = model != ModelKind::base;
  if (!gaze) {
    if (lambda > 0.0) throw ConfigError("model=base forbids lambda > 0");
    if (query_mode != QueryMode::rgb) throw ConfigError("model=base takes no gaze inputs; set query_mode=rgb");
    if (occlusion) throw ConfigError("model=base takes no gaze inputs; disable occlusion");
  }
  if (model == ModelKind::aggregated_gaze && delta_ms <= 0) throw ConfigError("aggregated_gaze requires delta_ms > 0");
  if (delta_ms < 0) throw ConfigError("delta_ms must be >= 0");
  if (occlusion && model != ModelKind::aggregated_gaze) throw ConfigError("occlusion checking needs aggregated_gaze");
  if (lambda < 0.0 || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
  if (gaze && query_mode != QueryMode::gaze_text && n_blocks < 1)
    throw ConfigError("gaze models with attention queries need n_blocks >= 1");
  if (!(sigma_px >= 0.0)) throw ConfigError("gaze.sigma_px must be >= 0 (0 = default)");
  if (!(binarize_tau > 0.0 && binarize_tau <= 1.0)) throw ConfigError("gaze.binarize_tau must lie in (0, 1]");
  if (target != "binary" && target != "continuous") throw ConfigError("gaze.target must be binary or continuous");
  if (flow != "ground_truth" && flow != "blockmatch") throw ConfigError("occlusion.flow must be ground_truth or blockmatch");
  if (!(occlusion_params.epsilon_px >= 0.0)) throw ConfigError("occlusion.epsilon must be >= 0");
  if (!(occlusion_params.eta_threshold >= 0.0 && occlusion_params.eta_threshold <= 1.0))
    throw ConfigError("occlusion.eta must lie in [0, 1]");
  if (block <= 0 || search <= 0) throw ConfigError("occlusion.block and occlusion.search must be > 0");
  if (train.epochs < 0 || train.batch_size <= 0 || !(train.lr > 0.0) || train.momentum < 0.0 ||
      train.momentum >= 1.0 || train.beta2 < 0.0 || train.beta2 >= 1.0 || !(train.adam_eps > 0.0) ||
      train.clip_norm < 0.0 || train.weight_decay < 0.0 || train.max_steps < 0 || train.log_every <= 0)
    throw ConfigError("train: invalid hyperparameters");
  if (train.optimizer != "adam" && train.optimizer != "sgd") throw ConfigError("train.optimizer must be adam or sgd");
  if (eval_split != "train" && eval_split != "val" && eval_split != "test")
    throw ConfigError("eval.split must be train, val or test");
  if (!(corruption_p >= 0.0 && corruption_p <= 1.0)) throw ConfigError("eval.corruption_p must lie in [0, 1]");
  if (!(rouge_beta > 0.0)) throw ConfigError("eval.rouge_beta must be > 0");
  if (seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (workers < 1) throw ConfigError("sweep.workers must be >= 1");
  model_config().validate();
}

double RunConfig::effective_lambda() const {
  return model == ModelKind::base || query_mode == QueryMode::gaze_text ? 0.0 : lambda;
}

double RunConfig::effective_sigma() const { return sigma_px > 0.0 ? sigma_px : synth.patch_px / 2.0; }

int RunConfig::out_len() const {
  return (task == Task::future_prediction ? synth.tau_a : synth.tau_o) * synth.tokens_per_frame;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.channels = synth.channels;
  m.grid = synth.grid();
  m.dim = dim;
  m.heads = heads;
  const bool attention = model != ModelKind::base && query_mode != QueryMode::gaze_text;
  m.n_blocks = attention ? n_blocks : 0;
  m.tau_o = synth.tau_o;
  m.out_len = out_len();
  m.vocab = synth.vocab_needed();
  m.context = context;
  m.token_dim = token_dim;
  m.hidden = hidden;
  m.gaze_text = query_mode == QueryMode::gaze_text;
  m.pseudo = attention && query_mode == QueryMode::pseudo;
  m.pseudo_c1 = pseudo_c1;
  m.pseudo_c2 = pseudo_c2;
  m.overlay_alpha = overlay_alpha;
  return m;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  std::string pointer;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) pointer += "/" + part;
  try {
    config[nlohmann::json::json_pointer(pointer)] = value;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("override '" + assignment + "': " + e.what());
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    const std::string text = io::read_file(path);
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + path + " must be a JSON object");
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = RunConfig::from_json(j);
  c.validate();
  return c;
}

std::string sweep_axis_key(const std::string& axis) {
  static const std::map<std::string, std::string> keys = {
      {"lambda", "/lambda"},
      {"n_blocks", "/architecture/n_blocks"},
      {"delta_ms", "/gaze/delta_ms"},
      {"query_mode", "/query_mode"},
      {"tau_o", "/data/synth/tau_o"},
      {"tau_a", "/data/synth/tau_a"},
      {"overlay_size", "/gaze/sigma_px"},
      {"corruption_p", "/eval/corruption_p"},
      {"model", "/model"}};
  if (auto it = keys.find(axis); it != keys.end()) return it->second;
  if (axis.empty()) throw ConfigError("sweep axis is empty");
  std::string pointer;
  std::stringstream ss(axis);
  for (std::string part; std::getline(ss, part, '.');) pointer += "/" + part;
  return pointer;
}

SynthDataset load_or_generate(const RunConfig& config) {
  if (!config.data_path.empty()) {
    SynthDataset d = read_dataset(config.data_path);
    // The model shape follows data.synth, so the stored dataset must agree on it.
    const SynthConfig& a = d.config;
    const SynthConfig& b = config.synth;
    if (a.tau_o != b.tau_o || a.tau_a != b.tau_a || a.tokens_per_frame != b.tokens_per_frame ||
        a.n_classes != b.n_classes || a.channels != b.channels || !(a.grid() == b.grid()))
      throw ConfigError("dataset at " + config.data_path + " does not match data.synth");
    return d;
  }
  return generate(config.synth, config.data_seed);
}

// --------------------------------------------------------------- preparation

namespace {

int gaze_cell(const AlignmentWindow& w, const PatchGrid& grid) {
  double sx = 0, sy = 0;
  int n = 0;
  for (const auto& s : w.selected)
    if (s.in_bounds(grid.width(), grid.height())) {
      sx += s.x;
      sy += s.y;
      ++n;
    }
  if (n == 0) return grid.count();
  return grid.index_of(sx / n, sy / n);
}

AlignmentWindow window_for(const RunConfig& c, const SynthSample& s, int k, std::size_t* dropped) {
  const FrameRef& ref = s.frame_refs[static_cast<std::size_t>(k)];
  if (c.model == ModelKind::singular_gaze) return align_window(s.gaze, ref, WindowMode::singular, c.delta_ms);
  if (!c.occlusion) return align_window(s.gaze, ref, WindowMode::aggregated, c.delta_ms);
  const auto frames = frames_for_key(s, k);
  OcclusionAggregation agg;
  if (c.flow == "ground_truth") {
    TableFlowProvider provider = ground_truth_flows(s);
    agg = aggregate_with_occlusion(s.gaze, frames, frames.size() - 1, c.delta_ms, provider, c.occlusion_params);
  } else {
    BlockMatchFlowProvider provider(
        [&](const FrameRef& f) {
          if (f.frame_id == ref.frame_id) return s.frames[static_cast<std::size_t>(k)].gray();
          for (const auto& sf : s.sub_frames)
            if (sf.ref.frame_id == f.frame_id) return sf.image.gray();
          throw IoError("no image for frame " + std::to_string(f.frame_id));
        },
        c.block, c.search);
    agg = aggregate_with_occlusion(s.gaze, frames, frames.size() - 1, c.delta_ms, provider, c.occlusion_params);
  }
  if (dropped) *dropped += agg.dropped;
  return agg.window;
}

}  // namespace

std::vector<PreparedSample> prepare_split(const RunConfig& config, const SynthDataset& data, const std::string& split) {
  const auto& samples = data.split(split);
  const PatchGrid grid = data.config.grid();
  const double sigma = config.effective_sigma();
  std::vector<PreparedSample> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SynthSample& s = samples[i];
    PreparedSample& p = out[i];
    p.source = &s;
    p.targets = config.task == Task::future_prediction ? s.future_tokens : s.current_tokens;
    if (config.model == ModelKind::base) continue;
    for (int k = 0; k < data.config.tau_o; ++k) {
      const AlignmentWindow w = window_for(config, s, k, &p.dropped_points);
      const Image& rgb = s.frames[static_cast<std::size_t>(k)];
      const Heatmap heat = gaussian_splat(w, rgb.width(), rgb.height(), sigma);
      p.dists.push_back(config.target == "binary" ? gaze_distribution(binarize(heat, config.binarize_tau), grid).probs
                                                  : distribution_from_continuous(heat, grid).probs);
      p.overlays.push_back(overlay(rgb, heat, config.overlay_alpha));
      p.cells.push_back(gaze_cell(w, grid));
    }
  }
  return out;
}

std::vector<SampleInputs> build_inputs(const RunConfig& config, const std::vector<PreparedSample>& prepared,
                                       const ModelState& state, Phase phase, double corruption_p) {
  std::vector<SampleInputs> out(prepared.size());
  const int none_cell = state.config.gaze_cells() - 1;
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    const PreparedSample& p = prepared[i];
    SampleInputs& in = out[i];
    in.targets = p.targets;
    in.rgb = p.source->frames;
    if (config.model == ModelKind::base) {
      in.cache_features(state, false);
      continue;
    }
    in.gaze = p.dists;
    const std::size_t frames = in.rgb.size();
    std::vector<bool> corrupted(frames, false);
    if (phase == Phase::eval && corruption_p > 0.0)
      for (std::size_t k = 0; k < frames; ++k) {
        // One fixed draw per (sample, frame): raising p only adds frames.
        std::mt19937_64 rng(mix_seed(0xC022u ^ (std::uint64_t(i) << 16) ^ std::uint64_t(k)));
        corrupted[k] = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < corruption_p;
      }
    switch (config.query_mode) {
      case QueryMode::overlay:
        for (std::size_t k = 0; k < frames; ++k) in.query.push_back(corrupted[k] ? in.rgb[k] : p.overlays[k]);
        break;
      case QueryMode::overlay_train_rgb_test:
        in.query = phase == Phase::train ? p.overlays : in.rgb;
        break;
      case QueryMode::rgb:
        in.query = in.rgb;
        break;
      case QueryMode::pseudo:
        in.true_overlay = p.overlays;
        break;
      case QueryMode::gaze_text:
        for (std::size_t k = 0; k < frames; ++k) in.gaze_cells.push_back(corrupted[k] ? none_cell : p.cells[k]);
        break;
    }
    in.cache_features(state, false);
  }
  return out;
}

// ------------------------------------------------------------------ training

ModelState init_model(const RunConfig& config, std::uint64_t seed) {
  ModelState s = ModelState::init(config.model_config(), seed);
  s.lambda = config.effective_lambda();
  return s;
}

namespace {

ForwardOptions options_for(const RunConfig& c, bool greedy) {
  ForwardOptions o;
  o.greedy = greedy;
  o.pseudo_queries = c.model_config().pseudo;
  return o;
}

}  // namespace

TrainResult train_model(const RunConfig& config, const std::vector<SampleInputs>& inputs, std::uint64_t seed,
                        const std::function<void(const TrainLogEntry&)>& on_log) {
  TrainResult r;
  r.state = init_model(config, seed);
  ModelState& st = r.state;
  const ForwardOptions opts = options_for(config, false);
  ModelParams velocity = st.params.zeros_like();
  ModelParams second = st.params.zeros_like();  // adam only
  const bool adam = config.train.optimizer == "adam";
  const double b1 = config.train.momentum, b2 = config.train.beta2;

  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed ^ 0x7a11u));
  const auto bs = static_cast<std::size_t>(config.train.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < config.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      if (config.train.max_steps > 0 && step >= config.train.max_steps) break;
      std::vector<const SampleInputs*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(&inputs[order[i]]);
      ModelParams grads = st.params.zeros_like();
      LossBreakdown loss;
      try {
        loss = forward_backward(st, batch, opts, &grads);
      } catch (const NumericError& e) {
        throw NumericError("training step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(loss.total)) throw NumericError("non-finite loss at training step " + std::to_string(step));

      std::vector<std::pair<std::string, Eigen::MatrixXd*>> g;
      grads.visit([&](const std::string& n, Eigen::MatrixXd& m) { g.emplace_back(n, &m); });
      double sq = 0.0;
      for (const auto& [name, m] : g)
        if (st.is_trainable(name)) sq += m->squaredNorm();
      if (!std::isfinite(sq)) {
        for (const auto& [name, m] : g)
          if (!m->allFinite()) throw NumericError("non-finite gradient for " + name + " at step " + std::to_string(step));
      }
      const double norm = std::sqrt(sq);
      const double scale = config.train.clip_norm > 0.0 && norm > config.train.clip_norm ? config.train.clip_norm / norm : 1.0;

      std::vector<Eigen::MatrixXd*> p, v, s;
      st.params.visit([&](const std::string&, Eigen::MatrixXd& m) { p.push_back(&m); });
      velocity.visit([&](const std::string&, Eigen::MatrixXd& m) { v.push_back(&m); });
      second.visit([&](const std::string&, Eigen::MatrixXd& m) { s.push_back(&m); });
      const double c1 = 1.0 - std::pow(b1, step + 1), c2 = 1.0 - std::pow(b2, step + 1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!st.is_trainable(g[i].first)) continue;
        const Eigen::MatrixXd gi = scale * *g[i].second + config.train.weight_decay * *p[i];
        if (adam) {
          *v[i] = b1 * *v[i] + (1.0 - b1) * gi;
          *s[i] = b2 * *s[i] + (1.0 - b2) * gi.cwiseProduct(gi);
          p[i]->array() -= config.train.lr * (v[i]->array() / c1) /
                           ((s[i]->array() / c2).sqrt() + config.train.adam_eps);
        } else {
          *v[i] = b1 * *v[i] - config.train.lr * gi;
          *p[i] += *v[i];
        }
      }
      const TrainLogEntry entry{step, loss};
      r.log.push_back(entry);
      if (on_log && (step % config.train.log_every == 0)) on_log(entry);
      ++step;
    }
  }
  r.steps = step;
  return r;
}

EvalMetrics evaluate_model(const ModelState& state, const RunConfig& config, const std::vector<SampleInputs>& inputs) {
  EvalMetrics m;
  const ForwardOptions opts = options_for(config, true);
  double correct = 0, tokens = 0, exact = 0, p = 0, rc = 0, f = 0, ce = 0, kl = 0, cos = 0, total = 0;
  for (const auto& in : inputs) {
    const SampleResult r = forward(state, in, opts);
    std::size_t hit = 0;
    for (std::size_t t = 0; t < in.targets.size(); ++t) hit += r.predicted[t] == in.targets[t] ? 1 : 0;
    correct += static_cast<double>(hit);
    tokens += static_cast<double>(in.targets.size());
    exact += hit == in.targets.size() ? 1.0 : 0.0;
    const RougeScore rs = rouge_l(render_tokens(r.predicted), render_tokens(in.targets), config.rouge_beta);
    p += rs.precision;
    rc += rs.recall;
    f += rs.f;
    ce += r.loss.ce;
    kl += r.loss.kl;
    cos += r.loss.cosine;
    total += r.loss.total;
  }
  const double n = static_cast<double>(inputs.size());
  m.samples = inputs.size();
  if (inputs.empty()) return m;
  m.token_accuracy = correct / tokens;
  m.sequence_exact_match = exact / n;
  m.rouge = {p / n, rc / n, f / n};
  m.loss = {ce / n, kl / n, cos / n, total / n};
  m.mean_kl = kl / n;
  return m;
}

// ------------------------------------------------------------------- reports

namespace {

nlohmann::json metrics_json(const EvalMetrics& m) {
  return {{"token_accuracy", m.token_accuracy},
          {"sequence_exact_match", m.sequence_exact_match},
          {"rouge_l", {{"precision", m.rouge.precision}, {"recall", m.rouge.recall}, {"f", m.rouge.f}}},
          {"loss", {{"ce", m.loss.ce}, {"kl", m.loss.kl}, {"cosine", m.loss.cosine}, {"total", m.loss.total}}},
          {"mean_kl", m.mean_kl},
          {"samples", m.samples}};
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = metrics_json(mean);
  j["config_hash"] = config_hash;
  j["token_table"] = kTokenTableVersion;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : per_seed) {
    nlohmann::json e = metrics_json(s.metrics);
    e["seed"] = s.seed;
    e["initial_kl"] = s.initial_kl;
    e["train_steps"] = s.train_steps;
    e["first_ce"] = s.first_ce;
    e["last_ce"] = s.last_ce;
    seeds.push_back(std::move(e));
  }
  j["per_seed"] = std::move(seeds);
  return j;
}

EvalMetrics average(const std::vector<SeedReport>& seeds) {
  EvalMetrics m;
  if (seeds.empty()) return m;
  const double n = static_cast<double>(seeds.size());
  for (const auto& s : seeds) {
    m.token_accuracy += s.metrics.token_accuracy / n;
    m.sequence_exact_match += s.metrics.sequence_exact_match / n;
    m.rouge.precision += s.metrics.rouge.precision / n;
    m.rouge.recall += s.metrics.rouge.recall / n;
    m.rouge.f += s.metrics.rouge.f / n;
    m.loss.ce += s.metrics.loss.ce / n;
    m.loss.kl += s.metrics.loss.kl / n;
    m.loss.cosine += s.metrics.loss.cosine / n;
    m.loss.total += s.metrics.loss.total / n;
    m.mean_kl += s.metrics.mean_kl / n;
    m.samples = s.metrics.samples;
  }
  return m;
}

std::string config_hash(const ModelConfig& config) {
  const std::string text = config.to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

EvalReport run_experiment(const RunConfig& config, const SynthDataset& data, std::vector<ModelState>* states) {
  config.validate();
  const auto train_prep = prepare_split(config, data, "train");
  const auto eval_prep = prepare_split(config, data, config.eval_split);
  EvalReport report;
  report.config_hash = config_hash(config.model_config());
  for (std::uint64_t seed : config.seeds) {
    SeedReport sr;
    sr.seed = seed;
    const ModelState init = init_model(config, seed);
    const auto eval_inputs = build_inputs(config, eval_prep, init, Phase::eval, config.corruption_p);
    sr.initial_kl = evaluate_model(init, config, eval_inputs).mean_kl;
    TrainResult tr;
    {
      const auto train_inputs = build_inputs(config, train_prep, init, Phase::train);
      tr = train_model(config, train_inputs, seed);
    }
    sr.train_steps = tr.steps;
    if (!tr.log.empty()) {
      sr.first_ce = tr.log.front().loss.ce;
      sr.last_ce = tr.log.back().loss.ce;
    }
    sr.metrics = evaluate_model(tr.state, config, eval_inputs);
    report.per_seed.push_back(sr);
    if (states) states->push_back(std::move(tr.state));
  }
  report.mean = average(report.per_seed);
  return report;
}

EvalReport evaluate_states(const RunConfig& config, const SynthDataset& data, const std::vector<ModelState>& states) {
  config.validate();
  const auto eval_prep = prepare_split(config, data, config.eval_split);
  EvalReport report;
  report.config_hash = config_hash(config.model_config());
  for (const auto& st : states) {
    require_matching_hash(st, config.model_config());
    SeedReport sr;
    sr.seed = st.seed;
    ModelState probe = st;
    probe.lambda = config.effective_lambda();
    const auto inputs = build_inputs(config, eval_prep, probe, Phase::eval, config.corruption_p);
    sr.metrics = evaluate_model(probe, config, inputs);
    report.per_seed.push_back(sr);
  }
  report.mean = average(report.per_seed);
  return report;
}

// --------------------------------------------------------------------- sweep

std::vector<SweepRow> run_sweep(const RunConfig& config, const std::string& axis, const nlohmann::json& values,
                                int workers) {
  if (!values.is_array()) throw ConfigError("sweep values must be a JSON array");
  std::vector<SweepRow> rows(values.size());
  if (values.empty()) return rows;
  const std::string key = sweep_axis_key(axis);
  const nlohmann::json base = config.to_json();
  const bool eval_only = key.rfind("/eval/", 0) == 0;

  std::mutex data_mutex;
  std::map<std::string, std::shared_ptr<const SynthDataset>> data_cache;
  auto dataset_for = [&](const RunConfig& c) {
    const std::string k = c.to_json().at("data").dump();
    std::lock_guard<std::mutex> lock(data_mutex);
    auto& slot = data_cache[k];
    if (!slot) slot = std::make_shared<const SynthDataset>(load_or_generate(c));
    return slot;
  };

  std::vector<ModelState> shared_states;
  if (eval_only) {
    const auto data = dataset_for(config);
    run_experiment(config, *data, &shared_states);
  }

  std::mutex table_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      SweepRow row;
      row.value = values[i];
      try {
        nlohmann::json j = base;
        j[nlohmann::json::json_pointer(key)] = values[i];
        if (key == "/model" && values[i] == "base") {
          // the base row of a model sweep drops every gaze input
          j["lambda"] = 0.0;
          j["query_mode"] = "rgb";
          j["occlusion"]["enabled"] = false;
        }
        RunConfig c = RunConfig::from_json(j);
        c.validate();
        const auto data = dataset_for(c);
        if (eval_only) {
          row.report = evaluate_states(c, *data, shared_states);
        } else {
          row.report = run_experiment(c, *data);
        }
        row.ok = true;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
      std::lock_guard<std::mutex> lock(table_mutex);
      rows[i] = std::move(row);
    }
  };
  const int n_threads = std::max(1, std::min<int>(workers, static_cast<int>(rows.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return rows;
}

std::string sweep_to_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "axis,value,ok,token_accuracy,sequence_exact_match,rouge_l_f,mean_kl,initial_kl,seeds,error\n";
  for (const auto& r : rows) {
    double init_kl = 0.0;
    for (const auto& s : r.report.per_seed) init_kl += s.initial_kl / static_cast<double>(r.report.per_seed.size());
    std::string value = r.value.is_string() ? r.value.get<std::string>() : r.value.dump();
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << axis << ',' << value << ',' << (r.ok ? 1 : 0) << ',' << r.report.mean.token_accuracy << ','
       << r.report.mean.sequence_exact_match << ',' << r.report.mean.rouge.f << ',' << r.report.mean.mean_kl << ','
       << init_kl << ',' << r.report.per_seed.size() << ',' << err << '\n';
  }
  return os.str();
}

nlohmann::json sweep_to_json(const std::string& axis, const std::vector<SweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json e = {{"axis", axis}, {"value", r.value}, {"ok", r.ok}};
    if (r.ok)
      e["report"] = r.report.to_json();
    else
      e["error"] = r.error;
    out.push_back(std::move(e));
  }
  return out;
}

// --------------------------------------------------------------- checkpoints

namespace {

template <typename F>
void visit_checkpoint_tensors(ModelState& s, F&& f) {
  s.params.visit(f);
  f("cosine.patch", s.cosine_embedder.patch);
  f("cosine.global", s.cosine_embedder.global);
  f("cosine.bias", s.cosine_embedder.bias);
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& dir) {
  try {
    fs::create_directories(dir);
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
  ModelState copy = state;
  nlohmann::json tensors = nlohmann::json::array();
  visit_checkpoint_tensors(copy, [&](const std::string& name, Eigen::MatrixXd& m) {
    std::string blob;
    blob.reserve(static_cast<std::size_t>(m.size()) * 4);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) io::put_f32(blob, static_cast<float>(m(r, c)));
    const std::string file = name + ".f32";
    io::write_file((fs::path(dir) / file).string(), blob);
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"file", file}});
  });
  const nlohmann::json manifest = {{"format", "gazereg-checkpoint-1"},
                                   {"config", state.config.to_json()},
                                   {"config_hash", config_hash(state.config)},
                                   {"seed", state.seed},
                                   {"lambda", state.lambda},
                                   {"tensors", tensors}};
  io::write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

ModelState load_checkpoint(const std::string& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file((fs::path(dir) / "manifest.json").string()));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("checkpoint manifest: " + std::string(e.what()));
  }
  try {
    const ModelConfig cfg = ModelConfig::from_json(manifest.at("config"));
    if (config_hash(cfg) != manifest.at("config_hash").get<std::string>())
      throw IoError("checkpoint manifest: config hash does not match its config");
    ModelState s = ModelState::init(cfg, manifest.at("seed").get<std::uint64_t>());
    s.lambda = manifest.at("lambda");
    std::map<std::string, nlohmann::json> entries;
    for (const auto& t : manifest.at("tensors")) entries[t.at("name")] = t;
    visit_checkpoint_tensors(s, [&](const std::string& name, Eigen::MatrixXd& m) {
      auto it = entries.find(name);
      if (it == entries.end()) throw IoError("checkpoint: missing tensor " + name);
      const auto& e = it->second;
      if (e.at("rows").get<Eigen::Index>() != m.rows() || e.at("cols").get<Eigen::Index>() != m.cols())
        throw IoError("checkpoint: shape mismatch for " + name);
      const std::string blob = io::read_file((fs::path(dir) / e.at("file").get<std::string>()).string());
      if (blob.size() != static_cast<std::size_t>(m.size()) * 4) throw IoError("checkpoint: bad blob size for " + name);
      std::size_t off = 0;
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c, off += 4) m(r, c) = io::get_f32(blob, off);
    });
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint manifest: " + std::string(e.what()));
  }
}

void require_matching_hash(const ModelState& state, const ModelConfig& config) {
  const std::string have = config_hash(state.config);
  const std::string want = config_hash(config);
  if (have != want) throw ConfigError("checkpoint config hash " + have + " does not match run config hash " + want);
}

// ---------------------------------------------------------------- grad check

GradCheckProblem make_gradcheck_problem(QueryMode mode, int n_blocks, std::uint64_t seed, int heads) {
  ModelConfig c;
  c.channels = 3;
  c.grid = {2, 2, 4, 4};
  c.dim = 4;
  c.heads = heads;
  c.n_blocks = mode == QueryMode::gaze_text ? 0 : n_blocks;
  c.tau_o = 2;
  c.out_len = 3;
  c.vocab = 6;
  c.context = 5;
  c.token_dim = 3;
  c.hidden = 5;
  c.gaze_text = mode == QueryMode::gaze_text;
  c.pseudo = mode == QueryMode::pseudo;
  c.pseudo_c1 = 2;
  c.pseudo_c2 = 3;
  c.train_embeddings = true;

  GradCheckProblem g;
  g.state = ModelState::init(c, seed);
  g.state.lambda = c.n_blocks > 0 ? 0.7 : 0.0;
  g.options.pseudo_queries = c.pseudo;

  std::mt19937_64 rng(mix_seed(seed ^ 0x9c4eu));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int w = c.grid.width(), h = c.grid.height(), n = c.grid.count();
  for (int b = 0; b < 2; ++b) {
    SampleInputs in;
    for (int k = 0; k < c.tau_o; ++k) {
      Image img(w, h, c.channels);
      for (auto& p : img.planes) p = p.unaryExpr([&](double) { return u(rng); });
      AlignmentWindow win;
      win.selected.push_back({0, u(rng) * w, u(rng) * h});
      win.selected.push_back({33, u(rng) * w, u(rng) * h});
      const Image ov = overlay(img, gaussian_splat(win, w, h, 1.5), 0.6);
      Eigen::VectorXd d(n);
      for (int i = 0; i < n; ++i) d(i) = u(rng);
      d(k % n) = 0.0;  // an empty patch exercises the smoothing path
      d /= d.sum();
      in.gaze.push_back(d);
      in.gaze_cells.push_back(static_cast<int>(u(rng) * (n + 1)) % (n + 1));
      in.query.push_back(mode == QueryMode::rgb ? img : ov);
      in.true_overlay.push_back(ov);
      in.rgb.push_back(std::move(img));
    }
    for (int t = 0; t < c.out_len; ++t) in.targets.push_back(static_cast<int>(u(rng) * c.vocab) % c.vocab);
    g.batch.push_back(std::move(in));
  }
  return g;
}

}  // namespace gazereg
