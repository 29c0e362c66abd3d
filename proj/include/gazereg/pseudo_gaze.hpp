#ifndef GAZEREG_PSEUDO_GAZE_HPP
#define GAZEREG_PSEUDO_GAZE_HPP

#include <random>

#include "gazereg/attention.hpp"
#include "gazereg/heatmap.hpp"

namespace gazereg {

/// Encoder-decoder heatmap predictor. Two stride-2 4x4 convolutions halve the
/// resolution twice; two stride-2 4x4 transposed convolutions restore it.
/// Hidden activations are tanh, the output is a logistic map in [0, 1].
struct PseudoGazeNet {
  Eigen::MatrixXd conv1_w, conv1_b;      // c1 x (channels*16), c1 x 1
  Eigen::MatrixXd conv2_w, conv2_b;      // c2 x (c1*16),       c2 x 1
  Eigen::MatrixXd deconv1_w, deconv1_b;  // c2 x (c1*16),       c1 x 1
  Eigen::MatrixXd deconv2_w, deconv2_b;  // c1 x 16,            1 x 1

  static PseudoGazeNet zeros(int channels, int c1, int c2);
  static PseudoGazeNet random(int channels, int c1, int c2, std::mt19937_64& rng);

  template <typename F>
  void visit(F&& f) {
    f("conv1.w", conv1_w);
    f("conv1.b", conv1_b);
    f("conv2.w", conv2_w);
    f("conv2.b", conv2_b);
    f("deconv1.w", deconv1_w);
    f("deconv1.b", deconv1_b);
    f("deconv2.w", deconv2_w);
    f("deconv2.b", deconv2_b);
  }
};

/// Activations kept for the reverse pass.
struct PseudoGazeTape {
  int width = 0, height = 0, channels = 0;
  Eigen::MatrixXd cols1, a1, cols2, a2, a3, out;
};

/// Feature maps are stored as (channels x height*width), index y*width + x.
Eigen::MatrixXd im2col_s2k4(const Eigen::MatrixXd& map, int channels, int height, int width);
Eigen::MatrixXd col2im_s2k4(const Eigen::MatrixXd& cols, int channels, int height, int width);
Eigen::MatrixXd image_to_map(const Image& image);

Heatmap predict_heatmap(const PseudoGazeNet& net, const Image& rgb, PseudoGazeTape* tape = nullptr);

/// Accumulates parameter gradients for an upstream gradient on the output
/// heatmap values (height x width).
void predict_heatmap_backward(const PseudoGazeNet& net, const PseudoGazeTape& tape, const Plane<double>& grad_out,
                              PseudoGazeNet& grads);

/// overlay() applied to the predicted heatmap.
Image compose_pseudo_overlay(const PseudoGazeNet& net, const Image& rgb, double alpha);

/// 1 - cos(pred, target). Throws NumericError on a zero-norm embedding.
double cosine_loss(const Eigen::VectorXd& pred, const Eigen::VectorXd& target);
/// Gradient of cosine_loss with respect to `pred`.
Eigen::VectorXd cosine_loss_grad(const Eigen::VectorXd& pred, const Eigen::VectorXd& target);

/// Gradient of overlay_weights(base, normalized_weights(h), alpha) with
/// respect to h, given the gradient on the overlaid image.
Plane<double> overlay_backward_to_heatmap(const Image& base, const Plane<double>& heat, double alpha,
                                          const Image& grad_overlay);

struct HeatmapFitResult {
  double initial_mae = 0.0;
  double final_mae = 0.0;
};

/// Directly regresses the net onto one target heatmap (values in [0, 1]) with
/// per-pixel binary cross-entropy, using adam.
HeatmapFitResult fit_heatmap(PseudoGazeNet& net, const Image& rgb, const Plane<double>& target, int steps,
                             double lr, double beta1 = 0.9);

}  // namespace gazereg

#endif  // GAZEREG_PSEUDO_GAZE_HPP
