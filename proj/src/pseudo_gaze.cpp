#include "gazereg/pseudo_gaze.hpp"

#include <cmath>

namespace gazereg {
namespace {

constexpr int kKernel = 4;
constexpr int kTaps = kKernel * kKernel;

Eigen::MatrixXd randn(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

Eigen::MatrixXd tanh_of(const Eigen::MatrixXd& z) { return z.array().tanh().matrix(); }

}  // namespace

PseudoGazeNet PseudoGazeNet::zeros(int channels, int c1, int c2) {
  PseudoGazeNet n;
  n.conv1_w = Eigen::MatrixXd::Zero(c1, channels * kTaps);
  n.conv1_b = Eigen::MatrixXd::Zero(c1, 1);
  n.conv2_w = Eigen::MatrixXd::Zero(c2, c1 * kTaps);
  n.conv2_b = Eigen::MatrixXd::Zero(c2, 1);
  n.deconv1_w = Eigen::MatrixXd::Zero(c2, c1 * kTaps);
  n.deconv1_b = Eigen::MatrixXd::Zero(c1, 1);
  n.deconv2_w = Eigen::MatrixXd::Zero(c1, kTaps);
  n.deconv2_b = Eigen::MatrixXd::Zero(1, 1);
  return n;
}

PseudoGazeNet PseudoGazeNet::random(int channels, int c1, int c2, std::mt19937_64& rng) {
  PseudoGazeNet n = zeros(channels, c1, c2);
  n.conv1_w = randn(c1, channels * kTaps, 1.0 / std::sqrt(channels * kTaps), rng);
  n.conv2_w = randn(c2, c1 * kTaps, 1.0 / std::sqrt(c1 * kTaps), rng);
  // A transposed conv spreads each input over 16 taps at stride 2, so every
  // output receives about 4 taps per input channel.
  n.deconv1_w = randn(c2, c1 * kTaps, 1.0 / std::sqrt(c2 * 4.0), rng);
  n.deconv2_w = randn(c1, kTaps, 1.0 / std::sqrt(c1 * 4.0), rng);
  // Gaze maps are mostly background; start the output near a 5% prior.
  n.deconv2_b(0, 0) = std::log(0.05 / 0.95);
  return n;
}

Eigen::MatrixXd im2col_s2k4(const Eigen::MatrixXd& map, int channels, int height, int width) {
  const int oh = height / 2;
  const int ow = width / 2;
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(channels * kTaps, oh * ow);
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < kKernel; ++ky)
      for (int kx = 0; kx < kKernel; ++kx) {
        const int row = c * kTaps + ky * kKernel + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = 2 * oy - 1 + ky;
          if (y < 0 || y >= height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int x = 2 * ox - 1 + kx;
            if (x < 0 || x >= width) continue;
            cols(row, oy * ow + ox) = map(c, y * width + x);
          }
        }
      }
  return cols;
}

Eigen::MatrixXd col2im_s2k4(const Eigen::MatrixXd& cols, int channels, int height, int width) {
  const int oh = height / 2;
  const int ow = width / 2;
  Eigen::MatrixXd map = Eigen::MatrixXd::Zero(channels, height * width);
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < kKernel; ++ky)
      for (int kx = 0; kx < kKernel; ++kx) {
        const int row = c * kTaps + ky * kKernel + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = 2 * oy - 1 + ky;
          if (y < 0 || y >= height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int x = 2 * ox - 1 + kx;
            if (x < 0 || x >= width) continue;
            map(c, y * width + x) += cols(row, oy * ow + ox);
          }
        }
      }
  return map;
}

Eigen::MatrixXd image_to_map(const Image& image) {
  const int h = image.height();
  const int w = image.width();
  Eigen::MatrixXd map(image.channels(), h * w);
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) map(c, y * w + x) = image(c, y, x);
  return map;
}

Heatmap predict_heatmap(const PseudoGazeNet& net, const Image& rgb, PseudoGazeTape* tape) {
  const int h = rgb.height();
  const int w = rgb.width();
  const int c = rgb.channels();
  if (h % 4 != 0 || w % 4 != 0) throw ShapeError("predict_heatmap: image sides must be divisible by 4");
  if (net.conv1_w.cols() != c * kTaps) throw ShapeError("predict_heatmap: channel count does not match the net");
  const int c1 = static_cast<int>(net.conv1_w.rows());

  PseudoGazeTape local;
  PseudoGazeTape& t = tape ? *tape : local;
  t.width = w;
  t.height = h;
  t.channels = c;
  t.cols1 = im2col_s2k4(image_to_map(rgb), c, h, w);
  t.a1 = tanh_of((net.conv1_w * t.cols1).colwise() + net.conv1_b.col(0));
  t.cols2 = im2col_s2k4(t.a1, c1, h / 2, w / 2);
  t.a2 = tanh_of((net.conv2_w * t.cols2).colwise() + net.conv2_b.col(0));
  t.a3 = tanh_of(col2im_s2k4(net.deconv1_w.transpose() * t.a2, c1, h / 2, w / 2).colwise() + net.deconv1_b.col(0));
  const Eigen::MatrixXd y4 = col2im_s2k4(net.deconv2_w.transpose() * t.a3, 1, h, w).array() + net.deconv2_b(0, 0);
  t.out = (1.0 / (1.0 + (-y4.array()).exp())).matrix();

  Heatmap hm;
  hm.kind = HeatmapKind::continuous;
  hm.values.resize(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) hm.values(y, x) = t.out(0, y * w + x);
  return hm;
}

void predict_heatmap_backward(const PseudoGazeNet& net, const PseudoGazeTape& t, const Plane<double>& grad_out,
                              PseudoGazeNet& g) {
  const int h = t.height;
  const int w = t.width;
  const int c1 = static_cast<int>(net.conv1_w.rows());
  Eigen::MatrixXd dy4(1, h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) dy4(0, y * w + x) = grad_out(y, x);
  dy4.array() *= t.out.array() * (1.0 - t.out.array());
  g.deconv2_b(0, 0) += dy4.sum();
  const Eigen::MatrixXd dcols4 = im2col_s2k4(dy4, 1, h, w);
  g.deconv2_w.noalias() += t.a3 * dcols4.transpose();
  Eigen::MatrixXd da3 = net.deconv2_w * dcols4;

  const Eigen::MatrixXd dy3 = (da3.array() * (1.0 - t.a3.array().square())).matrix();
  g.deconv1_b += dy3.rowwise().sum();
  const Eigen::MatrixXd dcols3 = im2col_s2k4(dy3, c1, h / 2, w / 2);
  g.deconv1_w.noalias() += t.a2 * dcols3.transpose();
  const Eigen::MatrixXd da2 = net.deconv1_w * dcols3;

  const Eigen::MatrixXd dz2 = (da2.array() * (1.0 - t.a2.array().square())).matrix();
  g.conv2_b += dz2.rowwise().sum();
  g.conv2_w.noalias() += dz2 * t.cols2.transpose();
  const Eigen::MatrixXd da1 = col2im_s2k4(net.conv2_w.transpose() * dz2, c1, h / 2, w / 2);

  const Eigen::MatrixXd dz1 = (da1.array() * (1.0 - t.a1.array().square())).matrix();
  g.conv1_b += dz1.rowwise().sum();
  g.conv1_w.noalias() += dz1 * t.cols1.transpose();
}

Image compose_pseudo_overlay(const PseudoGazeNet& net, const Image& rgb, double alpha) {
  return overlay(rgb, predict_heatmap(net, rgb), alpha);
}

double cosine_loss(const Eigen::VectorXd& pred, const Eigen::VectorXd& target) {
  if (pred.size() != target.size()) throw ShapeError("cosine_loss: length mismatch");
  const double np = pred.norm();
  const double nt = target.norm();
  if (!(np > 0.0) || !(nt > 0.0)) throw NumericError("cosine_loss: zero-norm embedding");
  return 1.0 - pred.dot(target) / (np * nt);
}

Eigen::VectorXd cosine_loss_grad(const Eigen::VectorXd& pred, const Eigen::VectorXd& target) {
  const double np = pred.norm();
  const double nt = target.norm();
  if (!(np > 0.0) || !(nt > 0.0)) throw NumericError("cosine_loss: zero-norm embedding");
  const double cos = pred.dot(target) / (np * nt);
  return -(target / (np * nt) - cos * pred / (np * np));
}

Plane<double> overlay_backward_to_heatmap(const Image& base, const Plane<double>& heat, double alpha,
                                          const Image& grad_overlay) {
  const Eigen::Index rows = heat.rows();
  const Eigen::Index cols = heat.cols();
  // Gradient on the normalised weights w.
  Plane<double> gw = Plane<double>::Zero(rows, cols);
  for (int c = 0; c < base.channels(); ++c) {
    const double hl = highlight_value<double>(c, base.channels());
    gw += alpha * (hl - base.planes[static_cast<std::size_t>(c)]) * grad_overlay.planes[static_cast<std::size_t>(c)];
  }
  Eigen::Index my = 0, mx = 0;
  const double peak = heat.maxCoeff(&my, &mx);
  if (!(peak > 0.0)) return Plane<double>::Zero(rows, cols);
  // w = h / peak, peak = h(my, mx).
  Plane<double> gh = gw / peak;
  gh(my, mx) -= (gw * heat).sum() / (peak * peak);
  return gh;
}

HeatmapFitResult fit_heatmap(PseudoGazeNet& net, const Image& rgb, const Plane<double>& target, int steps,
                             double lr, double beta1) {
  HeatmapFitResult result;
  const int c1 = static_cast<int>(net.conv1_w.rows()), c2 = static_cast<int>(net.conv2_w.rows());
  PseudoGazeNet m1 = PseudoGazeNet::zeros(rgb.channels(), c1, c2);
  PseudoGazeNet m2 = PseudoGazeNet::zeros(rgb.channels(), c1, c2);
  constexpr double beta2 = 0.999, eps = 1e-8;
  const double n = static_cast<double>(target.size());
  for (int step = 0; step <= steps; ++step) {
    PseudoGazeTape tape;
    const Heatmap pred = predict_heatmap(net, rgb, &tape);
    const Plane<double> diff = pred.values - target;
    const double mae = diff.abs().mean();
    if (step == 0) result.initial_mae = mae;
    result.final_mae = mae;
    if (step == steps) break;
    PseudoGazeNet grads = PseudoGazeNet::zeros(rgb.channels(), c1, c2);
    // Per-pixel binary cross-entropy; its gradient at the logit is (p - t) / n,
    // which the logistic backward recovers from this output gradient.
    const Plane<double> pc = pred.values.cwiseMax(1e-12).cwiseMin(1.0 - 1e-12);
    predict_heatmap_backward(net, tape, diff / (pc * (1.0 - pc)) / n, grads);
    // Pair up parameters and optimizer slots by visit order.
    std::vector<Eigen::MatrixXd*> p, g, a, b;
    net.visit([&](const char*, Eigen::MatrixXd& m) { p.push_back(&m); });
    grads.visit([&](const char*, Eigen::MatrixXd& m) { g.push_back(&m); });
    m1.visit([&](const char*, Eigen::MatrixXd& m) { a.push_back(&m); });
    m2.visit([&](const char*, Eigen::MatrixXd& m) { b.push_back(&m); });
    const double c_1 = 1.0 - std::pow(beta1, step + 1), c_2 = 1.0 - std::pow(beta2, step + 1);
    for (std::size_t i = 0; i < p.size(); ++i) {
      *a[i] = beta1 * *a[i] + (1.0 - beta1) * *g[i];
      *b[i] = beta2 * *b[i] + (1.0 - beta2) * g[i]->cwiseAbs2();
      *p[i] -= (lr * (*a[i] / c_1).array() / ((*b[i] / c_2).array().sqrt() + eps)).matrix();
    }
  }
  return result;
}

}  // namespace gazereg
