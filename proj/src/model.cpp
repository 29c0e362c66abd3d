#include "gazereg/model.hpp"

#include <algorithm>
#include <cmath>

namespace gazereg {
namespace {

Eigen::MatrixXd randn(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

int patch_dim(int channels, const PatchGrid& g) { return channels * g.patch_h * g.patch_w; }

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

constexpr double kNormEps = 1e-5;

// Parameter-free layer norm of a pooled frame vector; returns the inverse std.
Eigen::VectorXd layer_norm(const Eigen::VectorXd& v, double* inv_std = nullptr) {
  const Eigen::VectorXd c = v.array() - v.mean();
  const double r = 1.0 / std::sqrt(c.squaredNorm() / double(v.size()) + kNormEps);
  if (inv_std) *inv_std = r;
  return c * r;
}

Eigen::VectorXd layer_norm_backward(const Eigen::VectorXd& y, double inv_std, const Eigen::VectorXd& g) {
  return inv_std * (g.array() - g.mean() - y.array() * g.dot(y) / double(g.size())).matrix();
}

int argmax(const Eigen::VectorXd& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

Eigen::VectorXd decoder_input(const ModelState& s, const Eigen::VectorXd& ctx, int prev, int t) {
  const auto& p = s.params;
  Eigen::VectorXd in(ctx.size() + s.config.token_dim);
  in << ctx, (p.tok_embed.row(prev) + p.out_pos.row(t)).transpose();
  return in;
}

Eigen::VectorXd decoder_hidden(const ModelState& s, const Eigen::VectorXd& in) {
  return (s.params.dec_w * in + s.params.dec_b.col(0)).array().tanh().matrix();
}

Eigen::VectorXd decoder_logits(const ModelState& s, const Eigen::VectorXd& h) {
  return s.params.out_w * h + s.params.out_b.col(0);
}

}  // namespace

// ----------------------------------------------------------------- embedding

PatchEmbedder PatchEmbedder::zeros(int dim, int channels, const PatchGrid& grid) {
  return {Eigen::MatrixXd::Zero(dim, patch_dim(channels, grid)), Eigen::MatrixXd::Zero(dim, grid.count() * channels),
          Eigen::MatrixXd::Zero(dim, 1)};
}

PatchEmbedder PatchEmbedder::random(int dim, int channels, const PatchGrid& grid, std::mt19937_64& rng) {
  const int pd = patch_dim(channels, grid);
  const int gd = grid.count() * channels;
  const int dl = local_dim(dim);
  PatchEmbedder w = zeros(dim, channels, grid);
  w.patch.topRows(dl) = randn(dl, pd, 1.0 / std::sqrt(double(pd)), rng);
  w.global.bottomRows(dim - dl) = randn(dim - dl, gd, 4.0 / std::sqrt(double(gd)), rng);
  return w;
}

Eigen::MatrixXd positional_encoding(const PatchGrid& grid, int d) {
  // 2d sin-cos: row code in the first half, column code in the second
  const int half = d / 2;
  auto axis = [](int pos, int i, int width) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
    return (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
  };
  Eigen::MatrixXd pe(grid.count(), d);
  for (int j = 0; j < grid.n_v; ++j)
    for (int i = 0; i < grid.n_h; ++i) {
      const int n = j * grid.n_h + i;
      for (int c = 0; c < half; ++c) pe(n, c) = axis(j, c, half);
      for (int c = half; c < d; ++c) pe(n, c) = axis(i, c - half, d - half);
    }
  return pe;
}

Eigen::MatrixXd patch_matrix(const Image& image, const PatchGrid& grid) {
  grid.require_fits(image.width(), image.height(), "patch_matrix");
  const int ph = grid.patch_h, pw = grid.patch_w, c = image.channels();
  Eigen::MatrixXd p(grid.count(), c * ph * pw);
  for (int j = 0; j < grid.n_v; ++j)
    for (int i = 0; i < grid.n_h; ++i) {
      const int n = j * grid.n_h + i;
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x) p(n, ch * ph * pw + y * pw + x) = image(ch, j * ph + y, i * pw + x);
    }
  return p;
}

Eigen::VectorXd patch_thumbnail(const Image& image, const PatchGrid& grid) {
  grid.require_fits(image.width(), image.height(), "patch_thumbnail");
  const int c = image.channels();
  Eigen::VectorXd t(grid.count() * c);
  for (int j = 0; j < grid.n_v; ++j)
    for (int i = 0; i < grid.n_h; ++i)
      for (int ch = 0; ch < c; ++ch)
        t((j * grid.n_h + i) * c + ch) =
            image.planes[static_cast<std::size_t>(ch)]
                .block(j * grid.patch_h, i * grid.patch_w, grid.patch_h, grid.patch_w)
                .mean();
  // contrast-normalise: subtract each channel's mean over patches
  Eigen::Map<Eigen::MatrixXd> per_patch(t.data(), c, grid.count());
  per_patch.colwise() -= per_patch.rowwise().mean();
  return t;
}

Eigen::MatrixXd embed_patches(const Image& image, const PatchGrid& grid, const PatchEmbedder& w) {
  if (image.channels() * grid.patch_h * grid.patch_w != w.patch.cols())
    throw ShapeError("embed_patches: image does not match embedder shape");
  const Eigen::MatrixXd p = patch_matrix(image, grid);
  const Eigen::VectorXd shared = w.global * patch_thumbnail(image, grid) + w.bias.col(0);
  Eigen::MatrixXd tokens = p * w.patch.transpose();
  tokens.rowwise() += shared.transpose();
  const int dl = local_dim(static_cast<int>(w.patch.rows()));
  tokens.leftCols(dl) += positional_encoding(grid, dl);
  return tokens;
}

void embed_patches_backward(const Image& image, const PatchGrid& grid, const Eigen::MatrixXd& grad_tokens,
                            PatchEmbedder& grads) {
  const Eigen::MatrixXd p = patch_matrix(image, grid);
  const Eigen::VectorXd col_sum = grad_tokens.colwise().sum().transpose();
  grads.patch.noalias() += grad_tokens.transpose() * p;
  grads.global.noalias() += col_sum * patch_thumbnail(image, grid).transpose();
  grads.bias += col_sum;
}

Eigen::VectorXd mean_embedding(const Image& image, const PatchGrid& grid, const PatchEmbedder& w) {
  return embed_patches(image, grid, w).colwise().mean().transpose();
}

Image mean_embedding_input_grad(const PatchGrid& grid, int channels, const PatchEmbedder& w,
                                const Eigen::VectorXd& grad_embedding) {
  const Eigen::VectorXd gp = w.patch.transpose() * grad_embedding / double(grid.count());
  Eigen::VectorXd gg = w.global.transpose() * grad_embedding / double(grid.patch_h * grid.patch_w);
  Eigen::Map<Eigen::MatrixXd> gg_patch(gg.data(), channels, grid.count());
  gg_patch.colwise() -= gg_patch.rowwise().mean();
  Image g(grid.width(), grid.height(), channels);
  const int ph = grid.patch_h, pw = grid.patch_w;
  for (int j = 0; j < grid.n_v; ++j)
    for (int i = 0; i < grid.n_h; ++i) {
      const int n = j * grid.n_h + i;
      for (int ch = 0; ch < channels; ++ch)
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x)
            g(ch, j * ph + y, i * pw + x) = gp(ch * ph * pw + y * pw + x) + gg(n * channels + ch);
    }
  return g;
}

// -------------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (channels <= 0 || dim <= 0 || heads <= 0 || tau_o <= 0 || out_len <= 0 || vocab <= 0 || context <= 0 ||
      token_dim <= 0 || hidden <= 0 || n_blocks < 0)
    throw ConfigError("model config: sizes must be positive");
  if (dim % heads != 0) throw ConfigError("model config: dim must be divisible by heads");
  grid.require_fits(grid.width(), grid.height(), "model config");
  if (pseudo) {
    if (n_blocks == 0) throw ConfigError("model config: pseudo queries need an attention block");
    if (grid.width() % 4 != 0 || grid.height() % 4 != 0)
      throw ConfigError("model config: pseudo-gaze net needs image sides divisible by 4");
  }
  if (!(overlay_alpha >= 0.0 && overlay_alpha <= 1.0)) throw ConfigError("model config: overlay_alpha in [0,1]");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"channels", channels},
          {"grid", {{"n_h", grid.n_h}, {"n_v", grid.n_v}, {"patch_w", grid.patch_w}, {"patch_h", grid.patch_h}}},
          {"dim", dim},
          {"heads", heads},
          {"n_blocks", n_blocks},
          {"tau_o", tau_o},
          {"out_len", out_len},
          {"vocab", vocab},
          {"context", context},
          {"token_dim", token_dim},
          {"hidden", hidden},
          {"gaze_text", gaze_text},
          {"pseudo", pseudo},
          {"pseudo_c1", pseudo_c1},
          {"pseudo_c2", pseudo_c2},
          {"overlay_alpha", overlay_alpha},
          {"train_embeddings", train_embeddings},
          {"kl_eps", kl_eps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.channels = j.at("channels");
  const auto& g = j.at("grid");
  c.grid = PatchGrid{g.at("n_h"), g.at("n_v"), g.at("patch_w"), g.at("patch_h")};
  c.dim = j.at("dim");
  c.heads = j.at("heads");
  c.n_blocks = j.at("n_blocks");
  c.tau_o = j.at("tau_o");
  c.out_len = j.at("out_len");
  c.vocab = j.at("vocab");
  c.context = j.at("context");
  c.token_dim = j.at("token_dim");
  c.hidden = j.at("hidden");
  c.gaze_text = j.at("gaze_text");
  c.pseudo = j.at("pseudo");
  c.pseudo_c1 = j.at("pseudo_c1");
  c.pseudo_c2 = j.at("pseudo_c2");
  c.overlay_alpha = j.at("overlay_alpha");
  c.train_embeddings = j.at("train_embeddings");
  c.kl_eps = j.at("kl_eps");
  return c;
}

// --------------------------------------------------------------------- state

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  z.visit([](const std::string&, Eigen::MatrixXd& m) { m.setZero(); });
  return z;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Eigen::MatrixXd& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

ModelState ModelState::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelState s;
  s.config = config;
  s.seed = seed;
  std::mt19937_64 rng(seed);
  const int d = config.dim;
  auto& p = s.params;
  p.embed_rgb = PatchEmbedder::random(d, config.channels, config.grid, rng);
  p.embed_gaze = PatchEmbedder::random(d, config.channels, config.grid, rng);
  s.cosine_embedder = p.embed_gaze;
  const double sd = 1.0 / std::sqrt(double(d));
  for (int b = 0; b < config.n_blocks; ++b)
    p.blocks.push_back({randn(d, d, sd, rng), randn(d, d, sd, rng), randn(d, d, sd, rng), randn(d, d, sd, rng)});
  p.time_embed = randn(config.tau_o, d, 0.1, rng);
  int ctx_in = config.tau_o * d;
  if (config.gaze_text) {
    p.gaze_text_embed = randn(config.gaze_cells(), d, 1.0, rng);
    ctx_in += config.tau_o * d;
  }
  p.ctx_w = randn(config.context, ctx_in, 1.0 / std::sqrt(double(ctx_in)), rng);
  p.ctx_b = Eigen::MatrixXd::Zero(config.context, 1);
  p.tok_embed = randn(config.vocab + 1, config.token_dim, 1.0, rng);
  p.out_pos = randn(config.out_len, config.token_dim, 1.0, rng);
  const int dec_in = config.context + config.token_dim;
  p.dec_w = randn(config.hidden, dec_in, 1.0 / std::sqrt(double(dec_in)), rng);
  p.dec_b = Eigen::MatrixXd::Zero(config.hidden, 1);
  p.out_w = randn(config.vocab, config.hidden, 1.0 / std::sqrt(double(config.hidden)), rng);
  p.out_b = Eigen::MatrixXd::Zero(config.vocab, 1);
  if (config.pseudo) {
    p.has_pseudo = true;
    p.pseudo = PseudoGazeNet::random(config.channels, config.pseudo_c1, config.pseudo_c2, rng);
  }
  return s;
}

bool ModelState::is_trainable(const std::string& name) const {
  if (name.rfind("embed_", 0) == 0) return config.train_embeddings;
  return true;
}

LossBreakdown LossBreakdown::combine(double ce, double kl, double cosine, double lambda) {
  LossBreakdown l;
  l.ce = ce;
  l.kl = kl;
  l.cosine = cosine;
  l.total = ce + lambda * kl;
  l.total = l.total + cosine;
  return l;
}

void SampleInputs::cache_features(const ModelState& state, bool keep_images) {
  const auto& cfg = state.config;
  rgb_tokens.clear();
  query_tokens.clear();
  cosine_targets.clear();
  for (const auto& img : rgb) rgb_tokens.push_back(embed_patches(img, cfg.grid, state.params.embed_rgb));
  if (cfg.n_blocks > 0)
    for (const auto& img : query) query_tokens.push_back(embed_patches(img, cfg.grid, state.params.embed_gaze));
  for (const auto& img : true_overlay) cosine_targets.push_back(mean_embedding(img, cfg.grid, state.cosine_embedder));
  if (!keep_images) {
    query.clear();
    true_overlay.clear();
    if (!cfg.pseudo) rgb.clear();
  }
}

// ------------------------------------------------------------------- forward

AttentionOutput gaze_attention_block(const Eigen::MatrixXd& q_feat, const Eigen::MatrixXd& kv_feat,
                                     const AttentionBlockParams& p, int heads, Eigen::MatrixXd* block_out) {
  if (q_feat.cols() != kv_feat.cols()) throw ShapeError("gaze_attention_block: feature width mismatch");
  require_finite(q_feat, "gaze_attention_block.q_feat");
  require_finite(kv_feat, "gaze_attention_block.kv_feat");
  AttentionOutput out = scaled_dot_attention<double>(q_feat * p.wq, kv_feat * p.wk, kv_feat * p.wv, heads);
  if (block_out) *block_out = kv_feat + out.values_out * p.wo;
  return out;
}

namespace {

struct Encoded {
  Eigen::VectorXd ctx;
  double kl_sum = 0.0;
  int kl_terms = 0;
  double cos_sum = 0.0;
  int cos_terms = 0;
  std::vector<std::vector<Eigen::VectorXd>> dists;
};

Encoded encode(const ModelState& s, const SampleInputs& in, const ForwardOptions& opts, SampleTape* tape) {
  const auto& cfg = s.config;
  const auto& p = s.params;
  const bool cached = !cfg.train_embeddings;
  const int frames = cfg.tau_o;
  if (static_cast<int>(std::max(in.rgb.size(), in.rgb_tokens.size())) != frames)
    throw ShapeError("forward: expected " + std::to_string(frames) + " frames");
  if (tape) tape->frames.assign(static_cast<std::size_t>(frames), FrameTape{});

  Encoded e;
  e.dists.resize(static_cast<std::size_t>(frames));
  const int d = cfg.dim;
  int ctx_in_size = frames * d + (cfg.gaze_text ? frames * d : 0);
  Eigen::VectorXd ctx_in(ctx_in_size);

  for (int k = 0; k < frames; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    Eigen::MatrixXd x = (cached && ku < in.rgb_tokens.size()) ? in.rgb_tokens[ku]
                                                                : embed_patches(in.rgb[ku], cfg.grid, p.embed_rgb);
    FrameTape* ft = tape ? &tape->frames[ku] : nullptr;
    if (ft) ft->x0 = x;

    if (cfg.n_blocks > 0) {
      Eigen::MatrixXd qsrc;
      if (opts.pseudo_queries) {
        if (!p.has_pseudo) throw ConfigError("forward: pseudo queries requested but the model has no pseudo-gaze net");
        PseudoGazeTape local_pt;
        PseudoGazeTape& pt = ft ? ft->pseudo : local_pt;
        Heatmap heat = predict_heatmap(p.pseudo, in.rgb[ku], &pt);
        Image qimg = overlay(in.rgb[ku], heat, cfg.overlay_alpha);
        qsrc = embed_patches(qimg, cfg.grid, p.embed_gaze);
        const bool have_target = ku < in.cosine_targets.size() || ku < in.true_overlay.size();
        if (have_target) {
          const Eigen::VectorXd target = ku < in.cosine_targets.size()
                                             ? in.cosine_targets[ku]
                                             : mean_embedding(in.true_overlay[ku], cfg.grid, s.cosine_embedder);
          const Eigen::VectorXd emb = mean_embedding(qimg, cfg.grid, s.cosine_embedder);
          e.cos_sum += cosine_loss(emb, target);
          ++e.cos_terms;
          if (ft) ft->pseudo_embedding = emb;
        }
        if (ft) {
          ft->pseudo_heat = std::move(heat);
          ft->query_image = std::move(qimg);
        }
      } else {
        qsrc = (cached && ku < in.query_tokens.size()) ? in.query_tokens[ku]
                                                       : embed_patches(in.query.at(ku), cfg.grid, p.embed_gaze);
      }
      for (int b = 0; b < cfg.n_blocks; ++b) {
        const auto& bp = p.blocks[static_cast<std::size_t>(b)];
        Eigen::MatrixXd next;
        AttentionOutput att = gaze_attention_block(qsrc, x, bp, cfg.heads, &next);
        if (ku < in.gaze.size()) {
          e.kl_sum += kl_regularizer(att.attn_distribution, in.gaze[ku], cfg.kl_eps);
          ++e.kl_terms;
        }
        e.dists[ku].push_back(att.attn_distribution);
        if (ft) {
          BlockTape bt;
          bt.x_in = x;
          bt.q = qsrc * bp.wq;
          bt.k = x * bp.wk;
          bt.v = x * bp.wv;
          bt.att = std::move(att);
          ft->blocks.push_back(std::move(bt));
        }
        x = std::move(next);
      }
      if (ft) ft->qsrc = std::move(qsrc);
    }
    double inv_std = 0.0;
    const Eigen::VectorXd pooled = layer_norm(x.colwise().mean().transpose(), &inv_std);
    ctx_in.segment(k * d, d) = pooled + p.time_embed.row(k).transpose();
    if (ft) {
      ft->pooled = pooled;
      ft->pool_inv_std = inv_std;
    }
    if (cfg.gaze_text) {
      const int cell = ku < in.gaze_cells.size() ? in.gaze_cells[ku] : cfg.gaze_cells() - 1;
      if (cell < 0 || cell >= cfg.gaze_cells()) throw ShapeError("forward: gaze cell out of range");
      ctx_in.segment(frames * d + k * d, d) = p.gaze_text_embed.row(cell).transpose();
    }
    if (ft) ft->x_out = std::move(x);
  }
  e.ctx = (p.ctx_w * ctx_in + p.ctx_b.col(0)).array().tanh().matrix();
  require_finite(e.ctx, "context");
  if (tape) {
    tape->ctx_in = std::move(ctx_in);
    tape->ctx = e.ctx;
  }
  return e;
}

}  // namespace

SampleResult forward(const ModelState& state, const SampleInputs& in, const ForwardOptions& opts, SampleTape* tape) {
  const auto& cfg = state.config;
  Encoded enc = encode(state, in, opts, tape);
  if (static_cast<int>(in.targets.size()) != cfg.out_len)
    throw ShapeError("forward: expected " + std::to_string(cfg.out_len) + " target tokens");

  double ce = 0.0;
  if (tape) {
    tape->dec_in.clear();
    tape->dec_h.clear();
    tape->probs.clear();
  }
  for (int t = 0; t < cfg.out_len; ++t) {
    const int prev = t == 0 ? cfg.bos() : in.targets[static_cast<std::size_t>(t - 1)];
    Eigen::VectorXd di = decoder_input(state, enc.ctx, prev, t);
    Eigen::VectorXd h = decoder_hidden(state, di);
    Eigen::VectorXd pr = softmax(decoder_logits(state, h));
    const int y = in.targets[static_cast<std::size_t>(t)];
    if (y < 0 || y >= cfg.vocab) throw ShapeError("forward: target token out of range");
    ce -= std::log(std::max(pr(y), 1e-300));
    if (tape) {
      tape->dec_in.push_back(std::move(di));
      tape->dec_h.push_back(std::move(h));
      tape->probs.push_back(std::move(pr));
    }
  }
  ce /= cfg.out_len;

  SampleResult r;
  const double kl = enc.kl_terms ? enc.kl_sum / enc.kl_terms : 0.0;
  const double cos = enc.cos_terms ? enc.cos_sum / enc.cos_terms : 0.0;
  r.loss = LossBreakdown::combine(ce, kl, cos, state.lambda);
  if (!std::isfinite(r.loss.total)) throw NumericError("forward: non-finite loss");
  r.attn_distributions = std::move(enc.dists);

  if (opts.greedy) {
    int prev = cfg.bos();
    for (int t = 0; t < cfg.out_len; ++t) {
      const int y = argmax(decoder_logits(state, decoder_hidden(state, decoder_input(state, enc.ctx, prev, t))));
      r.predicted.push_back(y);
      prev = y;
    }
  }
  return r;
}

Eigen::MatrixXd pool_and_decode(const ModelState& state, const std::vector<Eigen::MatrixXd>& tokens_per_frame,
                                const std::vector<int>& previous_tokens) {
  const auto& cfg = state.config;
  if (static_cast<int>(tokens_per_frame.size()) != cfg.tau_o)
    throw ShapeError("pool_and_decode: expected " + std::to_string(cfg.tau_o) + " frames, got " +
                     std::to_string(tokens_per_frame.size()));
  const int d = cfg.dim;
  Eigen::VectorXd ctx_in = Eigen::VectorXd::Zero(cfg.tau_o * d + (cfg.gaze_text ? cfg.tau_o * d : 0));
  for (int k = 0; k < cfg.tau_o; ++k) {
    const auto& tok = tokens_per_frame[static_cast<std::size_t>(k)];
    if (tok.cols() != d) throw ShapeError("pool_and_decode: token width mismatch");
    ctx_in.segment(k * d, d) = layer_norm(tok.colwise().mean().transpose()) + state.params.time_embed.row(k).transpose();
    if (cfg.gaze_text)
      ctx_in.segment(cfg.tau_o * d + k * d, d) = state.params.gaze_text_embed.row(cfg.gaze_cells() - 1).transpose();
  }
  const Eigen::VectorXd ctx = (state.params.ctx_w * ctx_in + state.params.ctx_b.col(0)).array().tanh().matrix();
  Eigen::MatrixXd logits(cfg.out_len, cfg.vocab);
  for (int t = 0; t < cfg.out_len; ++t) {
    const int prev = t == 0 ? cfg.bos() : previous_tokens.at(static_cast<std::size_t>(t - 1));
    logits.row(t) = decoder_logits(state, decoder_hidden(state, decoder_input(state, ctx, prev, t))).transpose();
  }
  return logits;
}

// ------------------------------------------------------------------ backward

void backward(const ModelState& state, const SampleInputs& in, const SampleTape& tape, double loss_scale,
              ModelParams& g) {
  const auto& cfg = state.config;
  const auto& p = state.params;
  const int frames = cfg.tau_o;
  const int d = cfg.dim;

  // Decoder.
  Eigen::VectorXd dctx = Eigen::VectorXd::Zero(cfg.context);
  const double ce_scale = loss_scale / cfg.out_len;
  for (int t = 0; t < cfg.out_len; ++t) {
    const auto tu = static_cast<std::size_t>(t);
    Eigen::VectorXd dlogits = tape.probs[tu] * ce_scale;
    dlogits(in.targets[tu]) -= ce_scale;
    const Eigen::VectorXd& h = tape.dec_h[tu];
    g.out_w.noalias() += dlogits * h.transpose();
    g.out_b.col(0) += dlogits;
    const Eigen::VectorXd dpre = ((p.out_w.transpose() * dlogits).array() * (1.0 - h.array().square())).matrix();
    g.dec_w.noalias() += dpre * tape.dec_in[tu].transpose();
    g.dec_b.col(0) += dpre;
    const Eigen::VectorXd din = p.dec_w.transpose() * dpre;
    dctx += din.head(cfg.context);
    const int prev = t == 0 ? cfg.bos() : in.targets[tu - 1];
    g.tok_embed.row(prev) += din.tail(cfg.token_dim).transpose();
    g.out_pos.row(t) += din.tail(cfg.token_dim).transpose();
  }

  // Context projection.
  const Eigen::VectorXd dctx_pre = (dctx.array() * (1.0 - tape.ctx.array().square())).matrix();
  g.ctx_w.noalias() += dctx_pre * tape.ctx_in.transpose();
  g.ctx_b.col(0) += dctx_pre;
  const Eigen::VectorXd dctx_in = p.ctx_w.transpose() * dctx_pre;

  int kl_terms = 0;
  for (int k = 0; k < frames; ++k)
    if (static_cast<std::size_t>(k) < in.gaze.size()) kl_terms += cfg.n_blocks;
  const double kl_scale = kl_terms ? loss_scale * state.lambda / kl_terms : 0.0;
  int cos_terms = 0;
  for (const auto& ft : tape.frames)
    if (ft.pseudo_embedding.size()) ++cos_terms;

  for (int k = 0; k < frames; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const FrameTape& ft = tape.frames[ku];
    const Eigen::VectorXd dnormed = dctx_in.segment(k * d, d);
    g.time_embed.row(k) += dnormed.transpose();
    const Eigen::VectorXd dpooled = layer_norm_backward(ft.pooled, ft.pool_inv_std, dnormed);
    if (cfg.gaze_text) {
      const int cell = ku < in.gaze_cells.size() ? in.gaze_cells[ku] : cfg.gaze_cells() - 1;
      g.gaze_text_embed.row(cell) += dctx_in.segment(frames * d + k * d, d).transpose();
    }
    const Eigen::Index n_tokens = ft.x_out.rows();
    Eigen::MatrixXd dx = Eigen::MatrixXd::Ones(n_tokens, 1) * (dpooled.transpose() / double(n_tokens));
    Eigen::MatrixXd dqsrc = Eigen::MatrixXd::Zero(ft.qsrc.rows(), ft.qsrc.cols());

    for (int b = cfg.n_blocks - 1; b >= 0; --b) {
      const auto bu = static_cast<std::size_t>(b);
      const BlockTape& bt = ft.blocks[bu];
      const AttentionBlockParams& bp = p.blocks[bu];
      AttentionBlockParams& gb = g.blocks[bu];
      const Eigen::MatrixXd& o = bt.att.values_out;
      gb.wo.noalias() += o.transpose() * dx;
      const Eigen::MatrixXd d_o = dx * bp.wo.transpose();
      Eigen::VectorXd ddist;
      if (ku < in.gaze.size() && kl_scale != 0.0)
        ddist = kl_scale * kl_regularizer_grad(bt.att.attn_distribution, in.gaze[ku], cfg.kl_eps);
      const auto ag = scaled_dot_attention_backward<double>(bt.q, bt.k, bt.v, bt.att, d_o, ddist);
      gb.wq.noalias() += ft.qsrc.transpose() * ag.dq;
      dqsrc.noalias() += ag.dq * bp.wq.transpose();
      gb.wk.noalias() += bt.x_in.transpose() * ag.dk;
      gb.wv.noalias() += bt.x_in.transpose() * ag.dv;
      dx += ag.dk * bp.wk.transpose() + ag.dv * bp.wv.transpose();
    }

    if (cfg.train_embeddings) {
      embed_patches_backward(in.rgb.at(ku), cfg.grid, dx, g.embed_rgb);
      if (cfg.n_blocks > 0) {
        const Image& qimg = ft.query_image.planes.empty() ? in.query.at(ku) : ft.query_image;
        embed_patches_backward(qimg, cfg.grid, dqsrc, g.embed_gaze);
      }
    }

    if (ft.pseudo_embedding.size()) {
      const Eigen::VectorXd target = ku < in.cosine_targets.size()
                                         ? in.cosine_targets[ku]
                                         : mean_embedding(in.true_overlay[ku], cfg.grid, state.cosine_embedder);
      const Eigen::VectorXd de = (loss_scale / cos_terms) * cosine_loss_grad(ft.pseudo_embedding, target);
      const Image dimg = mean_embedding_input_grad(cfg.grid, cfg.channels, state.cosine_embedder, de);
      const Plane<double> dheat =
          overlay_backward_to_heatmap(in.rgb[ku], ft.pseudo_heat.values, cfg.overlay_alpha, dimg);
      predict_heatmap_backward(p.pseudo, ft.pseudo, dheat, g.pseudo);
    }
  }
}

LossBreakdown forward_backward(const ModelState& state, const std::vector<const SampleInputs*>& batch,
                               const ForwardOptions& opts, ModelParams* grads) {
  LossBreakdown mean;
  if (batch.empty()) return mean;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double ce = 0.0, kl = 0.0, cos = 0.0;
  for (const SampleInputs* s : batch) {
    SampleTape tape;
    const SampleResult r = forward(state, *s, opts, grads ? &tape : nullptr);
    ce += r.loss.ce;
    kl += r.loss.kl;
    cos += r.loss.cosine;
    if (grads) backward(state, *s, tape, scale, *grads);
  }
  return LossBreakdown::combine(ce * scale, kl * scale, cos * scale, state.lambda);
}

// ---------------------------------------------------------------- grad check

std::vector<GradCheckEntry> gradient_check(const ModelState& state, const std::vector<SampleInputs>& batch,
                                           const ForwardOptions& opts, double step) {
  std::vector<const SampleInputs*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);

  ModelParams analytic = state.params.zeros_like();
  forward_backward(state, ptrs, opts, &analytic);

  ModelState probe = state;
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> slots;
  probe.params.visit([&](const std::string& name, Eigen::MatrixXd& m) { slots.emplace_back(name, &m); });
  std::vector<const Eigen::MatrixXd*> grads;
  analytic.visit([&](const std::string&, const Eigen::MatrixXd& m) { grads.push_back(&m); });

  std::vector<GradCheckEntry> out;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& [name, param] = slots[i];
    if (!state.is_trainable(name)) continue;
    const bool cosine_only = name.rfind("pseudo.", 0) == 0;
    auto objective = [&]() {
      const LossBreakdown l = forward_backward(probe, ptrs, opts, nullptr);
      return cosine_only ? l.cosine : l.total;
    };
    Eigen::MatrixXd numeric(param->rows(), param->cols());
    for (Eigen::Index j = 0; j < param->size(); ++j) {
      const double orig = param->data()[j];
      param->data()[j] = orig + step;
      const double up = objective();
      param->data()[j] = orig - step;
      const double down = objective();
      param->data()[j] = orig;
      numeric.data()[j] = (up - down) / (2.0 * step);
    }
    const Eigen::MatrixXd& a = *grads[i];
    GradCheckEntry e;
    e.name = name;
    e.size = static_cast<std::size_t>(param->size());
    e.analytic_norm = a.norm();
    e.max_abs_error = (a - numeric).cwiseAbs().maxCoeff();
    const double denom = std::max({a.norm(), numeric.norm(), 1e-6});
    e.rel_error = (a - numeric).norm() / denom;
    if (!std::isfinite(e.analytic_norm)) throw NumericError("non-finite gradient for parameter " + name);
    out.push_back(e);
  }
  return out;
}

}  // namespace gazereg
