#include <doctest.h>

#include <random>

#include "gazereg/model.hpp"
#include "gazereg/pipeline.hpp"
#include "gazereg/pseudo_gaze.hpp"

using namespace gazereg;

namespace {

Image random_image(std::mt19937_64& rng, int w, int h, int c) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(w, h, c);
  for (auto& p : img.planes) p = p.unaryExpr([&](double) { return u(rng); });
  return img;
}

}  // namespace

TEST_CASE("zero net predicts the constant logistic midpoint, same size as the input") {
  const PseudoGazeNet net = PseudoGazeNet::zeros(3, 8, 16);
  std::mt19937_64 rng(1);
  const Heatmap h = predict_heatmap(net, random_image(rng, 64, 64, 3));
  CHECK(h.width() == 64);
  CHECK(h.height() == 64);
  CHECK((h.values - 0.5).abs().maxCoeff() == 0.0);
}

TEST_CASE("random net output lies in [0, 1] and is deterministic; indivisible sizes are rejected") {
  std::mt19937_64 rng(2);
  const PseudoGazeNet net = PseudoGazeNet::random(3, 4, 6, rng);
  const Image img = random_image(rng, 32, 16, 3);
  const Heatmap a = predict_heatmap(net, img), b = predict_heatmap(net, img);
  CHECK(a.values.minCoeff() >= 0.0);
  CHECK(a.values.maxCoeff() <= 1.0);
  CHECK((a.values - b.values).abs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(predict_heatmap(net, random_image(rng, 30, 16, 3)), ShapeError);
}

TEST_CASE("im2col and col2im are adjoint") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(2, 8 * 12), y;
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = g(rng);
  const Eigen::MatrixXd cols = im2col_s2k4(x, 2, 8, 12);
  y = Eigen::MatrixXd(cols.rows(), cols.cols());
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = g(rng);
  const Eigen::MatrixXd back = col2im_s2k4(y, 2, 8, 12);
  CHECK((cols.array() * y.array()).sum() == doctest::Approx((x.array() * back.array()).sum()).epsilon(1e-12));
}

TEST_CASE("overfitting one image-heatmap pair for 50 steps reaches MAE below 0.05") {
  std::mt19937_64 rng(4);
  PseudoGazeNet net = PseudoGazeNet::random(3, 8, 16, rng);
  const Image img = random_image(rng, 32, 32, 3);
  AlignmentWindow w;
  w.selected.push_back({0, 20, 9});
  const Heatmap target = gaussian_splat(w, 32, 32, 3.0);
  const HeatmapFitResult r = fit_heatmap(net, img, target.values, 50, 0.01);
  MESSAGE("mae " << r.initial_mae << " -> " << r.final_mae);
  CHECK(r.final_mae < 0.05);
  CHECK(r.final_mae < r.initial_mae);
}

TEST_CASE("compose overlay: alpha 0 and an all-zero map are identities, a peak changes") {
  std::mt19937_64 rng(5);
  const Image img = random_image(rng, 16, 16, 3);
  PseudoGazeNet net = PseudoGazeNet::random(3, 4, 6, rng);
  const Image a0 = compose_pseudo_overlay(net, img, 0.0);
  for (int c = 0; c < 3; ++c) CHECK((a0.planes[c] - img.planes[c]).abs().maxCoeff() == 0.0);

  Heatmap zero;
  zero.values = Plane<double>::Zero(16, 16);
  const Image z = overlay(img, zero, 0.6);
  for (int c = 0; c < 3; ++c) CHECK((z.planes[c] - img.planes[c]).abs().maxCoeff() == 0.0);

  const Heatmap h = predict_heatmap(net, img);
  Eigen::Index r, c;
  h.values.maxCoeff(&r, &c);
  const Image o = compose_pseudo_overlay(net, img, 0.6);
  double diff = 0;
  for (int ch = 0; ch < 3; ++ch) diff += std::abs(o(ch, r, c) - img(ch, r, c));
  CHECK(diff > 0.0);
}

TEST_CASE("cosine loss: identity, scaling, orthogonality, range") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> scale(0.1, 10.0);
  const Eigen::VectorXd e = Eigen::VectorXd::NullaryExpr(12, [&]() { return g(rng); });
  CHECK(std::abs(cosine_loss(e, e)) < 1e-15);
  CHECK(std::abs(cosine_loss(e, 2.0 * e)) < 1e-15);
  CHECK(cosine_loss(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 3)) == doctest::Approx(1.0));
  CHECK(cosine_loss(e, -e) == doctest::Approx(2.0));
  for (int t = 0; t < 50; ++t) {
    const Eigen::VectorXd a = Eigen::VectorXd::NullaryExpr(12, [&]() { return g(rng); });
    const Eigen::VectorXd b = Eigen::VectorXd::NullaryExpr(12, [&]() { return g(rng); });
    const double l = cosine_loss(a, b);
    CHECK(l >= 0.0);
    CHECK(l <= 2.0);
    CHECK(cosine_loss(scale(rng) * a, scale(rng) * b) == doctest::Approx(l).epsilon(1e-12));
  }
  CHECK_THROWS_AS(cosine_loss(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3)), NumericError);
}

TEST_CASE("cosine loss gradient against central differences") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  const Eigen::VectorXd a = Eigen::VectorXd::NullaryExpr(6, [&]() { return g(rng); });
  const Eigen::VectorXd b = Eigen::VectorXd::NullaryExpr(6, [&]() { return g(rng); });
  const Eigen::VectorXd grad = cosine_loss_grad(a, b);
  for (int i = 0; i < 6; ++i) {
    Eigen::VectorXd ap = a, am = a;
    ap(i) += 1e-6;
    am(i) -= 1e-6;
    CHECK(grad(i) == doctest::Approx((cosine_loss(ap, b) - cosine_loss(am, b)) / 2e-6).epsilon(1e-6));
  }
}

TEST_CASE("pseudo path gradients pass the finite-difference check") {
  const GradCheckProblem p = make_gradcheck_problem(QueryMode::pseudo, 1);
  for (const auto& e : gradient_check(p.state, p.batch, p.options, 1e-4)) {
    INFO(e.name);
    CHECK(e.rel_error < 1e-4);
  }
}

TEST_CASE("with the pseudo net frozen out of the loss, enabling it adds only the cosine term") {
  // Same queries both ways: feed the pseudo overlay as a precomputed query.
  GradCheckProblem p = make_gradcheck_problem(QueryMode::pseudo, 1);
  const LossBreakdown with = forward_backward(p.state, {&p.batch[0]}, p.options, nullptr);
  SampleInputs fixed = p.batch[0];
  fixed.query.clear();
  for (const auto& img : fixed.rgb)
    fixed.query.push_back(compose_pseudo_overlay(p.state.params.pseudo, img, p.state.config.overlay_alpha));
  fixed.query_tokens.clear();
  ForwardOptions plain = p.options;
  plain.pseudo_queries = false;
  const LossBreakdown without = forward_backward(p.state, {&fixed}, plain, nullptr);
  CHECK(with.cosine > 0.0);
  CHECK(without.cosine == 0.0);
  CHECK(with.ce == doctest::Approx(without.ce).epsilon(1e-12));
  CHECK(with.kl == doctest::Approx(without.kl).epsilon(1e-12));
  CHECK(with.total - without.total == doctest::Approx(with.cosine).epsilon(1e-10));
}
