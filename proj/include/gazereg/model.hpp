#ifndef GAZEREG_MODEL_HPP
#define GAZEREG_MODEL_HPP

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazereg/attention.hpp"
#include "gazereg/patch_distribution.hpp"
#include "gazereg/pseudo_gaze.hpp"

namespace gazereg {

// ---------------------------------------------------------------------------
// Patch embedding (stand-in for a frozen vision encoder)
// ---------------------------------------------------------------------------

/// Linear patch embedder. Token n of an image is
///   patch * vec(patch_n) + global * thumbnail + bias + pos_n
/// where vec() flattens a patch channel-major and the thumbnail holds the
/// per-patch channel means of the whole image (N*C values) minus each
/// channel's mean over patches, so every token sees a coarse view of the
/// full frame. Random embedders split the token: the first local_dim(D)
/// features carry patch content and position, the rest the shared thumbnail.
struct PatchEmbedder {
  Eigen::MatrixXd patch;   // D x (C * patch_h * patch_w)
  Eigen::MatrixXd global;  // D x (N * C)
  Eigen::MatrixXd bias;    // D x 1

  static PatchEmbedder zeros(int dim, int channels, const PatchGrid& grid);
  static PatchEmbedder random(int dim, int channels, const PatchGrid& grid, std::mt19937_64& rng);
};

inline int local_dim(int dim) { return dim - dim / 2; }

/// Fixed 2d sinusoidal table, one row per patch.
Eigen::MatrixXd positional_encoding(const PatchGrid& grid, int d);

/// N x (C * patch_h * patch_w), row n the flattened patch n.
Eigen::MatrixXd patch_matrix(const Image& image, const PatchGrid& grid);
/// Length N * C: mean of channel c over patch n at index n * C + c, centred
/// per channel across patches.
Eigen::VectorXd patch_thumbnail(const Image& image, const PatchGrid& grid);

/// N x D token matrix.
Eigen::MatrixXd embed_patches(const Image& image, const PatchGrid& grid, const PatchEmbedder& w);
/// Accumulates weight gradients for an upstream gradient on the tokens.
void embed_patches_backward(const Image& image, const PatchGrid& grid, const Eigen::MatrixXd& grad_tokens,
                            PatchEmbedder& grads);
/// Mean of embed_patches over tokens (the cosine-supervision space).
Eigen::VectorXd mean_embedding(const Image& image, const PatchGrid& grid, const PatchEmbedder& w);
/// Gradient of mean_embedding with respect to the image pixels.
Image mean_embedding_input_grad(const PatchGrid& grid, int channels, const PatchEmbedder& w,
                                const Eigen::VectorXd& grad_embedding);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelConfig {
  int channels = 3;
  PatchGrid grid{4, 4, 8, 8};
  int dim = 16;
  int heads = 1;
  int n_blocks = 2;  // 0 disables the gaze attention block
  int tau_o = 5;
  int out_len = 4;  // tau_a * tokens per step (or tau_o * L for understanding)
  int vocab = 32;
  int context = 64;
  int token_dim = 16;
  int hidden = 64;
  bool gaze_text = false;
  bool pseudo = false;
  int pseudo_c1 = 8;
  int pseudo_c2 = 16;
  double overlay_alpha = 0.6;
  bool train_embeddings = false;
  double kl_eps = 1e-8;

  int bos() const { return vocab; }
  int gaze_cells() const { return grid.count() + 1; }  // last cell: no gaze
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct AttentionBlockParams {
  Eigen::MatrixXd wq, wk, wv, wo;  // D x D, applied as X * W
};

struct ModelParams {
  PatchEmbedder embed_rgb;
  PatchEmbedder embed_gaze;
  std::vector<AttentionBlockParams> blocks;
  Eigen::MatrixXd time_embed;       // tau_o x D
  Eigen::MatrixXd gaze_text_embed;  // gaze_cells x D, empty unless gaze_text
  Eigen::MatrixXd ctx_w, ctx_b;     // context x in, context x 1
  Eigen::MatrixXd tok_embed;        // (vocab + 1) x token_dim, last row BOS
  Eigen::MatrixXd out_pos;          // out_len x token_dim
  Eigen::MatrixXd dec_w, dec_b;     // hidden x (context + token_dim), hidden x 1
  Eigen::MatrixXd out_w, out_b;     // vocab x hidden, vocab x 1
  bool has_pseudo = false;
  PseudoGazeNet pseudo;

  /// Visits every tensor with its stable name.
  template <typename Self, typename F>
  static void visit_all(Self& self, F&& f) {
    f("embed_rgb.patch", self.embed_rgb.patch);
    f("embed_rgb.global", self.embed_rgb.global);
    f("embed_rgb.bias", self.embed_rgb.bias);
    f("embed_gaze.patch", self.embed_gaze.patch);
    f("embed_gaze.global", self.embed_gaze.global);
    f("embed_gaze.bias", self.embed_gaze.bias);
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      f(p + "wq", self.blocks[b].wq);
      f(p + "wk", self.blocks[b].wk);
      f(p + "wv", self.blocks[b].wv);
      f(p + "wo", self.blocks[b].wo);
    }
    f("time_embed", self.time_embed);
    if (self.gaze_text_embed.size()) f("gaze_text_embed", self.gaze_text_embed);
    f("ctx.w", self.ctx_w);
    f("ctx.b", self.ctx_b);
    f("tok_embed", self.tok_embed);
    f("out_pos", self.out_pos);
    f("dec.w", self.dec_w);
    f("dec.b", self.dec_b);
    f("out.w", self.out_w);
    f("out.b", self.out_b);
    if (self.has_pseudo) {
      f("pseudo.conv1.w", self.pseudo.conv1_w);
      f("pseudo.conv1.b", self.pseudo.conv1_b);
      f("pseudo.conv2.w", self.pseudo.conv2_w);
      f("pseudo.conv2.b", self.pseudo.conv2_b);
      f("pseudo.deconv1.w", self.pseudo.deconv1_w);
      f("pseudo.deconv1.b", self.pseudo.deconv1_b);
      f("pseudo.deconv2.w", self.pseudo.deconv2_w);
      f("pseudo.deconv2.b", self.pseudo.deconv2_b);
    }
  }

  template <typename F>
  void visit(F&& f) { visit_all(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_all(*this, f); }

  ModelParams zeros_like() const;
  std::size_t parameter_count() const;
};

/// Everything needed to run and resume the model.
struct ModelState {
  ModelConfig config;
  ModelParams params;
  PatchEmbedder cosine_embedder;  // frozen snapshot of embed_gaze at init
  double lambda = 100.0;
  std::uint64_t seed = 0;

  static ModelState init(const ModelConfig& config, std::uint64_t seed);
  bool is_trainable(const std::string& name) const;
};

struct LossBreakdown {
  double ce = 0.0;
  double kl = 0.0;
  double cosine = 0.0;
  double total = 0.0;

  /// total = ce + lambda * kl + cosine, always in this order.
  static LossBreakdown combine(double ce, double kl, double cosine, double lambda);
};

/// Per-sample model inputs. Frozen embeddings may be cached ahead of time.
struct SampleInputs {
  std::vector<Image> rgb;                  // tau_o frames
  std::vector<Image> query;                // per-frame query images (overlay, or rgb)
  std::vector<Eigen::VectorXd> gaze;       // per-frame gaze distributions
  std::vector<int> gaze_cells;             // per-frame gaze-text tokens
  std::vector<Image> true_overlay;         // cosine targets for the pseudo path
  std::vector<int> targets;                // out_len token ids

  std::vector<Eigen::MatrixXd> rgb_tokens;    // cache of embed_rgb(rgb)
  std::vector<Eigen::MatrixXd> query_tokens;  // cache of embed_gaze(query)
  std::vector<Eigen::VectorXd> cosine_targets;

  /// Fills the caches from the current (frozen) embedders.
  void cache_features(const ModelState& state, bool keep_images);
};

struct ForwardOptions {
  bool greedy = false;          // also decode greedily into `predicted`
  bool pseudo_queries = false;  // build queries from the pseudo-gaze net
};

struct BlockTape {
  Eigen::MatrixXd x_in, q, k, v;
  AttentionOutput att;
};

struct FrameTape {
  Eigen::MatrixXd x0;    // rgb tokens
  Eigen::MatrixXd qsrc;  // query tokens
  std::vector<BlockTape> blocks;
  Eigen::MatrixXd x_out;
  Eigen::VectorXd pooled;  // layer-normed mean token
  double pool_inv_std = 0.0;
  Image query_image;  // pseudo path only
  PseudoGazeTape pseudo;
  Heatmap pseudo_heat;
  Eigen::VectorXd pseudo_embedding;
};

struct SampleTape {
  std::vector<FrameTape> frames;
  Eigen::VectorXd ctx_in, ctx;
  std::vector<Eigen::VectorXd> dec_in, dec_h, probs;
};

struct SampleResult {
  LossBreakdown loss;  // per-sample, lambda applied
  std::vector<int> predicted;
  std::vector<std::vector<Eigen::VectorXd>> attn_distributions;  // [frame][block]
};

SampleResult forward(const ModelState& state, const SampleInputs& in, const ForwardOptions& opts,
                     SampleTape* tape = nullptr);

/// Accumulates d(loss_scale * total) into grads. The cosine term updates only
/// the pseudo-gaze net; cross-entropy and the regularizer stop at the query
/// image.
void backward(const ModelState& state, const SampleInputs& in, const SampleTape& tape, double loss_scale,
              ModelParams& grads);

/// Mean loss over the batch and, when grads is non-null, its gradient.
LossBreakdown forward_backward(const ModelState& state, const std::vector<const SampleInputs*>& batch,
                               const ForwardOptions& opts, ModelParams* grads);

/// Output of one full attention block: projections, attention, residual.
AttentionOutput gaze_attention_block(const Eigen::MatrixXd& q_feat, const Eigen::MatrixXd& kv_feat,
                                     const AttentionBlockParams& p, int heads, Eigen::MatrixXd* block_out = nullptr);

/// Logits for every output position given per-frame token matrices. Used
/// directly by shape and permutation tests.
Eigen::MatrixXd pool_and_decode(const ModelState& state, const std::vector<Eigen::MatrixXd>& tokens_per_frame,
                                const std::vector<int>& previous_tokens);

struct GradCheckEntry {
  std::string name;
  std::size_t size = 0;
  double rel_error = 0.0;      // ||a - n|| / max(||a||, ||n||, floor)
  double max_abs_error = 0.0;
  double analytic_norm = 0.0;
};

/// Central finite differences over every trainable tensor. The pseudo-gaze
/// net is checked against the cosine term only, matching the stop-gradient.
std::vector<GradCheckEntry> gradient_check(const ModelState& state, const std::vector<SampleInputs>& batch,
                                           const ForwardOptions& opts, double step = 1e-4);

}  // namespace gazereg

#endif  // GAZEREG_MODEL_HPP
