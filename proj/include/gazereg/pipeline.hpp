#ifndef GAZEREG_PIPELINE_HPP
#define GAZEREG_PIPELINE_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazereg/model.hpp"
#include "gazereg/rouge.hpp"
#include "gazereg/synth.hpp"

namespace gazereg {

enum class Task { future_prediction, activity_understanding };
enum class ModelKind { base, singular_gaze, aggregated_gaze };
enum class QueryMode { overlay, pseudo, rgb, overlay_train_rgb_test, gaze_text };

const char* to_string(Task t);
const char* to_string(ModelKind m);
const char* to_string(QueryMode q);
QueryMode query_mode_from_string(const std::string& s);

struct TrainParams {
  std::string optimizer = "adam";  // or "sgd" (heavy-ball momentum)
  int epochs = 30;
  int batch_size = 16;
  double lr = 0.001;
  double momentum = 0.9;  // beta1 for adam
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;  // global gradient norm; 0 disables
  double weight_decay = 0.0;  // L2 added to the gradient (coupled, as in classic adam)
  int max_steps = 0;       // 0 = run all epochs
  int log_every = 25;
};

struct RunConfig {
  Task task = Task::future_prediction;
  ModelKind model = ModelKind::aggregated_gaze;
  QueryMode query_mode = QueryMode::overlay;
  double lambda = 100.0;

  int n_blocks = 2;
  int heads = 1;
  int dim = 32;
  int context = 64;
  int token_dim = 16;
  int hidden = 64;
  int pseudo_c1 = 8;
  int pseudo_c2 = 16;

  std::int64_t delta_ms = 200;
  double sigma_px = 2.5;  // 0 = half the patch side
  double binarize_tau = 0.5;
  std::string target = "binary";  // or "continuous"
  double overlay_alpha = 0.6;

  bool occlusion = false;
  std::string flow = "ground_truth";  // or "blockmatch"
  OcclusionParams occlusion_params;
  int block = 8;
  int search = 4;

  TrainParams train;

  std::string eval_split = "test";
  double corruption_p = 0.0;
  double rouge_beta = 1.0;

  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  std::string data_path;  // empty: generate in memory from `synth`
  std::uint64_t data_seed = 1234;
  SynthConfig synth;

  std::string output_dir = "runs/default";

  std::string sweep_axis;
  nlohmann::json sweep_values = nlohmann::json::array();
  int workers = 1;

  static nlohmann::json defaults();
  /// Fills unspecified keys from defaults(); unknown keys are a ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;

  double effective_lambda() const;
  double effective_sigma() const;
  ModelConfig model_config() const;
  int out_len() const;
};

/// Applies a `dotted.key=value` override. The value is parsed as JSON when it
/// is valid JSON, otherwise taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);
/// Reads a JSON config file (empty path: defaults) and applies overrides.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);
/// JSON key path for a sweep axis name; dotted keys pass through.
std::string sweep_axis_key(const std::string& axis);

SynthDataset load_or_generate(const RunConfig& config);

/// Gaze products for one sample, independent of the model seed.
struct PreparedSample {
  const SynthSample* source = nullptr;
  std::vector<Image> overlays;
  std::vector<Eigen::VectorXd> dists;
  std::vector<int> cells;
  std::vector<int> targets;
  std::size_t dropped_points = 0;
};

std::vector<PreparedSample> prepare_split(const RunConfig& config, const SynthDataset& data, const std::string& split);

enum class Phase { train, eval };

/// Model inputs for the given phase with frozen features cached. At eval
/// time each frame's gaze query is replaced by plain RGB with probability
/// corruption_p; the corrupted sets are nested as p grows.
std::vector<SampleInputs> build_inputs(const RunConfig& config, const std::vector<PreparedSample>& prepared,
                                       const ModelState& state, Phase phase, double corruption_p = 0.0);

struct TrainLogEntry {
  int step = 0;
  LossBreakdown loss;
};

struct TrainResult {
  ModelState state;
  std::vector<TrainLogEntry> log;
  int steps = 0;
};

ModelState init_model(const RunConfig& config, std::uint64_t seed);
TrainResult train_model(const RunConfig& config, const std::vector<SampleInputs>& train_inputs, std::uint64_t seed,
                        const std::function<void(const TrainLogEntry&)>& on_log = {});

struct EvalMetrics {
  double token_accuracy = 0.0;
  double sequence_exact_match = 0.0;
  RougeScore rouge;
  LossBreakdown loss;
  double mean_kl = 0.0;
  std::size_t samples = 0;
};

EvalMetrics evaluate_model(const ModelState& state, const RunConfig& config, const std::vector<SampleInputs>& inputs);

struct SeedReport {
  std::uint64_t seed = 0;
  EvalMetrics metrics;
  double initial_kl = 0.0;
  int train_steps = 0;
  double first_ce = 0.0;
  double last_ce = 0.0;
};

struct EvalReport {
  EvalMetrics mean;
  std::vector<SeedReport> per_seed;
  std::string config_hash;
  nlohmann::json to_json() const;
};

EvalMetrics average(const std::vector<SeedReport>& seeds);

/// FNV-1a over the canonical model configuration, as 16 hex digits.
std::string config_hash(const ModelConfig& config);

/// Train and evaluate every seed in config.seeds on the given dataset.
/// Optionally keeps the trained states.
EvalReport run_experiment(const RunConfig& config, const SynthDataset& data, std::vector<ModelState>* states = nullptr);
/// Evaluate already-trained states (one per seed) under `config`.
EvalReport evaluate_states(const RunConfig& config, const SynthDataset& data, const std::vector<ModelState>& states);

struct SweepRow {
  nlohmann::json value;
  bool ok = false;
  std::string error;
  EvalReport report;
};

/// One train+evaluate per value. Eval-only axes reuse one set of trained
/// models. Rows keep the order of `values`; failures are recorded per row.
std::vector<SweepRow> run_sweep(const RunConfig& config, const std::string& axis, const nlohmann::json& values,
                                int workers = 1);
std::string sweep_to_csv(const std::string& axis, const std::vector<SweepRow>& rows);
nlohmann::json sweep_to_json(const std::string& axis, const std::vector<SweepRow>& rows);

// Checkpoints: <dir>/manifest.json plus one little-endian f32 blob per tensor.
void save_checkpoint(const ModelState& state, const std::string& dir);
ModelState load_checkpoint(const std::string& dir);
/// Refuses with both hashes when the checkpoint does not match `config`.
void require_matching_hash(const ModelState& state, const ModelConfig& config);

/// Small fixed problem for gradient checking: every tensor trainable,
/// two samples, seed-derived inputs.
struct GradCheckProblem {
  ModelState state;
  std::vector<SampleInputs> batch;
  ForwardOptions options;
};
GradCheckProblem make_gradcheck_problem(QueryMode mode, int n_blocks, std::uint64_t seed = 0, int heads = 1);

}  // namespace gazereg

#endif  // GAZEREG_PIPELINE_HPP
