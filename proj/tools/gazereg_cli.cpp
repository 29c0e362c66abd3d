// gazereg command-line front end.
//
// Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "gazereg/containers.hpp"
#include "gazereg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gazereg;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const ProviderError*>(&e) || dynamic_cast<const OrderingError*>(&e))
    return kExitIo;
  return kExitConfig;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON run config (defaults when omitted)");
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set train.lr=0.02")->take_all();
}

std::string seed_dir(const RunConfig& c, std::uint64_t seed) {
  return (fs::path(c.output_dir) / ("seed_" + std::to_string(seed))).string();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

// ---------------------------------------------------------------------- verbs

int cmd_gen_data(const Common& common, const std::string& out_dir) {
  const RunConfig c = load_run_config(common.config_path, common.overrides);
  const std::string dir = !out_dir.empty() ? out_dir : !c.data_path.empty() ? c.data_path : c.output_dir + "/data";
  const SynthDataset d = generate(c.synth, c.data_seed);
  write_dataset(d, dir);
  std::cout << "wrote " << d.train.size() << "/" << d.val.size() << "/" << d.test.size()
            << " train/val/test samples to " << dir << "\n"
            << "bayes_ceiling " << bayes_ceiling(c.synth) << "\n";
  return 0;
}

struct HeatmapArgs {
  std::string gaze, frames, out, dist_json, mode = "aggregated";
  int frame_id = 0;
  std::int64_t delta_ms = 200;
  double sigma = 4.0, tau = 0.5;
  bool binary = false;
  int n_h = 4, n_v = 4;
};

int cmd_heatmap(const HeatmapArgs& a) {
  const GazeTrack track = parse_gaze_csv(io::read_file(a.gaze));
  const auto frames = parse_frame_manifest(io::read_file(a.frames));
  const FrameRef* frame = nullptr;
  for (const auto& f : frames)
    if (f.frame_id == a.frame_id) frame = &f;
  if (!frame) throw ConfigError("frame " + std::to_string(a.frame_id) + " not in manifest");
  const AlignmentWindow w = align_window(track, *frame, window_mode_from_string(a.mode), a.delta_ms);
  Heatmap h = gaussian_splat(w, frame->width, frame->height, a.sigma);
  if (a.binary) h = binarize(h, a.tau);
  if (!a.out.empty()) write_heatmap(a.out, h);
  const PatchGrid grid = PatchGrid::for_image(frame->width, frame->height, a.n_h, a.n_v);
  const GazeDistribution d = gaze_distribution(a.binary ? h : binarize(h, a.tau), grid);
  if (!a.dist_json.empty()) io::write_file(a.dist_json, distributions_to_json({{a.frame_id, d}}));
  std::cout << nlohmann::json{{"frame_id", a.frame_id},
                              {"samples", w.selected.size()},
                              {"excluded", h.excluded},
                              {"peak", h.values.maxCoeff()},
                              {"fallback", d.fallback == DistributionFallback::uniform},
                              {"distribution", std::vector<double>(d.probs.data(), d.probs.data() + d.probs.size())}}
                   .dump()
            << "\n";
  return 0;
}

struct OcclusionArgs {
  std::string gaze, frames, flow_dir;
  std::int64_t delta_ms = 200;
  double epsilon = 20.0, eta = 0.60;
  int block = 8, search = 4;
  std::string variant = "magnitude_difference";
};

int cmd_occlusion(const OcclusionArgs& a) {
  const GazeTrack track = parse_gaze_csv(io::read_file(a.gaze));
  const auto frames = parse_frame_manifest(io::read_file(a.frames));
  const fs::path base = fs::path(a.frames).parent_path();
  OcclusionParams params;
  params.epsilon_px = a.epsilon;
  params.eta_threshold = a.eta;
  params.variant = a.variant == "vector_sum" ? ConsistencyVariant::vector_sum : ConsistencyVariant::magnitude_difference;
  BlockMatchFlowProvider blockmatch(
      [&](const FrameRef& f) { return read_image((base / f.image_path).string()).cast<double>().gray(); }, a.block,
      a.search);
  FileFlowProvider files(a.flow_dir);
  FlowProvider& provider = a.flow_dir.empty() ? static_cast<FlowProvider&>(blockmatch) : files;
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto agg = aggregate_with_occlusion(track, frames, i, a.delta_ms, provider, params);
    nlohmann::json checked = nlohmann::json::array();
    for (const auto& c : agg.checked)
      checked.push_back({{"frame_id", c.frame_id},
                         {"eta_observed", c.report.eta_observed},
                         {"verdict", to_string(c.report.verdict)},
                         {"points", c.points}});
    out.push_back({{"anchor", frames[i].frame_id},
                   {"kept", agg.window.selected.size()},
                   {"dropped", agg.dropped},
                   {"translated", agg.translated},
                   {"checked", checked}});
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_train(const Common& common) {
  const RunConfig c = load_run_config(common.config_path, common.overrides);
  const SynthDataset data = load_or_generate(c);
  const auto prep = prepare_split(c, data, "train");
  ensure_dir(c.output_dir);
  io::write_file((fs::path(c.output_dir) / "config.json").string(), c.to_json().dump(2) + "\n");
  for (std::uint64_t seed : c.seeds) {
    const ModelState init = init_model(c, seed);
    const auto inputs = build_inputs(c, prep, init, Phase::train);
    std::string log = "step,ce,kl,cosine,total\n";
    const TrainResult r = train_model(c, inputs, seed, [&](const TrainLogEntry& e) {
      std::fprintf(stderr, "seed %llu step %d ce %.5f kl %.5f cos %.5f total %.5f\n",
                   static_cast<unsigned long long>(seed), e.step, e.loss.ce, e.loss.kl, e.loss.cosine, e.loss.total);
    });
    char buf[160];
    for (const auto& e : r.log) {
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", e.step, e.loss.ce, e.loss.kl, e.loss.cosine,
                    e.loss.total);
      log += buf;
    }
    const std::string dir = seed_dir(c, seed);
    save_checkpoint(r.state, dir);
    io::write_file((fs::path(dir) / "train_log.csv").string(), log);
    std::cout << "seed " << seed << ": " << r.steps << " steps, checkpoint " << dir << "\n";
  }
  return 0;
}

int cmd_eval(const Common& common, const std::string& checkpoint) {
  const RunConfig c = load_run_config(common.config_path, common.overrides);
  const SynthDataset data = load_or_generate(c);
  std::vector<ModelState> states;
  if (!checkpoint.empty()) {
    states.push_back(load_checkpoint(checkpoint));
  } else {
    for (std::uint64_t seed : c.seeds) states.push_back(load_checkpoint(seed_dir(c, seed)));
  }
  const EvalReport report = evaluate_states(c, data, states);
  const std::string text = report.to_json().dump(2) + "\n";
  ensure_dir(c.output_dir);
  io::write_file((fs::path(c.output_dir) / "eval_report.json").string(), text);
  std::cout << text;
  return 0;
}

int cmd_grad_check(const Common& common, double step, double tolerance) {
  const RunConfig c = load_run_config(common.config_path, common.overrides);
  const QueryMode mode = c.model == ModelKind::base ? QueryMode::rgb : c.query_mode;
  const int blocks = c.model == ModelKind::base ? 0 : std::max(1, std::min(c.n_blocks, 2));
  const GradCheckProblem p = make_gradcheck_problem(mode, blocks, c.seed, 1);
  const auto entries = gradient_check(p.state, p.batch, p.options, step);
  double worst = 0.0;
  for (const auto& e : entries) {
    std::printf("%-20s size %5zu  rel_err %.3e  max_abs %.3e\n", e.name.c_str(), e.size, e.rel_error,
                e.max_abs_error);
    worst = std::max(worst, e.rel_error);
  }
  std::printf("max relative error %.3e (tolerance %.1e)\n", worst, tolerance);
  return worst < tolerance ? 0 : kExitNumeric;
}

int cmd_sweep(const Common& common, std::string axis, std::string values_text, int workers) {
  const RunConfig c = load_run_config(common.config_path, common.overrides);
  if (axis.empty()) axis = c.sweep_axis;
  nlohmann::json values = c.sweep_values;
  if (!values_text.empty()) {
    values = nlohmann::json::array();
    std::stringstream ss(values_text);
    for (std::string v; std::getline(ss, v, ',');) {
      try {
        values.push_back(nlohmann::json::parse(v));
      } catch (const nlohmann::json::parse_error&) {
        values.push_back(v);
      }
    }
  }
  if (workers <= 0) workers = c.workers;
  const auto rows = run_sweep(c, axis, values, workers);
  ensure_dir(c.output_dir);
  const std::string csv = sweep_to_csv(axis, rows);
  io::write_file((fs::path(c.output_dir) / ("sweep_" + axis + ".csv")).string(), csv);
  io::write_file((fs::path(c.output_dir) / ("sweep_" + axis + ".json")).string(),
                 sweep_to_json(axis, rows).dump(2) + "\n");
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gazereg: gaze-regularized attention toolkit"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, grad_c, sweep_c;
  std::string gen_out, eval_ckpt, sweep_axis, sweep_values;
  int sweep_workers = 0;
  double grad_step = 1e-4, grad_tol = 1e-4;
  HeatmapArgs hm;
  OcclusionArgs oc;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic planted-signal dataset");
  add_common(gen, gen_c);
  gen->add_option("-o,--out", gen_out, "Output directory");

  auto* heat = app.add_subcommand("heatmap", "Build a heatmap and patch distribution for one frame");
  heat->add_option("--gaze", hm.gaze, "Gaze CSV")->required();
  heat->add_option("--frames", hm.frames, "Frame manifest JSON")->required();
  heat->add_option("--frame-id", hm.frame_id, "Frame to render")->required();
  heat->add_option("--mode", hm.mode, "singular or aggregated");
  heat->add_option("--delta-ms", hm.delta_ms, "Aggregation window");
  heat->add_option("--sigma", hm.sigma, "Gaussian sigma in pixels");
  heat->add_option("--tau", hm.tau, "Relative binarization threshold");
  heat->add_flag("--binary", hm.binary, "Write the binarized heatmap");
  heat->add_option("--grid", hm.n_h, "Patches per side (square grid)")->each([&](const std::string&) { hm.n_v = hm.n_h; });
  heat->add_option("-o,--out", hm.out, "GHM1 output file");
  heat->add_option("--dist-json", hm.dist_json, "Write the patch distribution as JSON");

  auto* occ = app.add_subcommand("occlusion-check", "Occlusion-aware aggregation report per frame");
  occ->add_option("--frames", oc.frames, "Frame manifest JSON")->required();
  occ->add_option("--gaze", oc.gaze, "Gaze CSV")->required();
  occ->add_option("--delta-ms", oc.delta_ms, "Aggregation window");
  occ->add_option("--epsilon", oc.epsilon, "Distance threshold in pixels");
  occ->add_option("--eta", oc.eta, "Proportion threshold");
  occ->add_option("--flow-dir", oc.flow_dir, "Directory of GFL1 flows (block matching when omitted)");
  occ->add_option("--block", oc.block, "Block size for block matching");
  occ->add_option("--search", oc.search, "Search radius for block matching");
  occ->add_option("--variant", oc.variant, "magnitude_difference or vector_sum");

  auto* train = app.add_subcommand("train", "Train every configured seed and write checkpoints");
  add_common(train, train_c);

  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints and write an EvalReport");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", eval_ckpt, "Single checkpoint directory (default: every seed under output_dir)");

  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient check on a micro problem");
  add_common(grad, grad_c);
  grad->add_option("--step", grad_step, "Central-difference step");
  grad->add_option("--tolerance", grad_tol, "Maximum accepted relative error");

  auto* sweep = app.add_subcommand("sweep", "Train and evaluate along one config axis");
  add_common(sweep, sweep_c);
  sweep->add_option("--axis", sweep_axis, "lambda, n_blocks, delta_ms, query_mode, tau_o, tau_a, overlay_size, corruption_p");
  sweep->add_option("--values", sweep_values, "Comma-separated values");
  sweep->add_option("--workers", sweep_workers, "Concurrent runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(gen_c, gen_out);
    if (*heat) return cmd_heatmap(hm);
    if (*occ) return cmd_occlusion(oc);
    if (*train) return cmd_train(train_c);
    if (*eval) return cmd_eval(eval_c, eval_ckpt);
    if (*grad) return cmd_grad_check(grad_c, grad_step, grad_tol);
    if (*sweep) return cmd_sweep(sweep_c, sweep_axis, sweep_values, sweep_workers);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
