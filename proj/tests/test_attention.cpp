#include <doctest.h>

#include <random>

#include "gazereg/attention.hpp"
#include "gazereg/model.hpp"
#include "gazereg/pipeline.hpp"

using namespace gazereg;

namespace {

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

Eigen::VectorXd random_simplex(std::mt19937_64& rng, int n, double zero_prob = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng) < zero_prob ? 0.0 : -std::log(u(rng) + 1e-300);
  if (v.sum() == 0.0) v(0) = 1.0;
  return v / v.sum();
}

long double kl_oracle(const Eigen::VectorXd& a, const Eigen::VectorXd& h, long double eps) {
  long double total = 0;
  for (Eigen::Index i = 0; i < h.size(); ++i) total += h(i) + eps;
  long double d = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (a(i) > 0) d += a(i) * std::log(static_cast<long double>(a(i)) / ((h(i) + eps) / total));
  return d;
}

// attention by explicit loops over query, key and feature indices
Eigen::MatrixXd attention_oracle(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                                 Eigen::MatrixXd* weights) {
  const int nq = q.rows(), nk = k.rows();
  weights->resize(nq, nk);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(nq, v.cols());
  for (int i = 0; i < nq; ++i) {
    std::vector<long double> s(nk);
    long double mx = -1e300L, z = 0;
    for (int j = 0; j < nk; ++j) {
      long double dot = 0;
      for (int c = 0; c < q.cols(); ++c) dot += static_cast<long double>(q(i, c)) * k(j, c);
      s[j] = dot / std::sqrt(static_cast<long double>(q.cols()));
      mx = std::max(mx, s[j]);
    }
    for (int j = 0; j < nk; ++j) z += std::exp(s[j] - mx);
    for (int j = 0; j < nk; ++j) {
      (*weights)(i, j) = static_cast<double>(std::exp(s[j] - mx) / z);
      for (int c = 0; c < v.cols(); ++c) out(i, c) += (*weights)(i, j) * v(j, c);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("softmax rows sum to one and survive huge scores") {
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd s = random_matrix(rng, 7, 9, 300.0);
  const Eigen::MatrixXd a = row_softmax(s);
  CHECK(a.allFinite());
  CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(a.minCoeff() >= 0.0);
}

TEST_CASE("softmax backward against central differences") {
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd s = random_matrix(rng, 3, 5);
  const Eigen::MatrixXd up = random_matrix(rng, 3, 5);
  const Eigen::MatrixXd g = row_softmax_backward(row_softmax(s), up);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    Eigen::MatrixXd sp = s, sm = s;
    sp(i) += h;
    sm(i) -= h;
    const double num = ((row_softmax(sp).array() - row_softmax(sm).array()) * up.array()).sum() / (2 * h);
    CHECK(g(i) == doctest::Approx(num).epsilon(1e-7));
  }
}

TEST_CASE("attention: single key gives weight one and returns V") {
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd q = random_matrix(rng, 4, 6), k = random_matrix(rng, 1, 6), v = random_matrix(rng, 1, 6);
  const auto out = scaled_dot_attention<double>(q, k, v);
  CHECK((out.attn_weights.array() - 1.0).abs().maxCoeff() == 0.0);
  for (int r = 0; r < 4; ++r) CHECK((out.values_out.row(r) - v.row(0)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention: orthogonal queries give uniform rows") {
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(3, 4), k = Eigen::MatrixXd::Zero(5, 4);
  q.col(0).setOnes();
  k.col(1).setConstant(2.0);
  const auto out = scaled_dot_attention<double>(q, k, Eigen::MatrixXd::Random(5, 4));
  CHECK((out.attn_weights.array() - 0.2).abs().maxCoeff() < 1e-15);
  CHECK((out.attn_distribution.array() - 0.2).abs().maxCoeff() < 1e-15);
}

TEST_CASE("attention: scaled scores [[ln 3, 0], [0, 0]] give row one [0.75, 0.25]") {
  // d_k = 4, so scores are halved before the softmax
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(2, 4), k = Eigen::MatrixXd::Zero(2, 4);
  q(0, 0) = 2.0 * std::log(3.0);
  k(0, 0) = 1.0;
  const auto out = scaled_dot_attention<double>(q, k, Eigen::MatrixXd::Identity(2, 4));
  CHECK(out.attn_weights(0, 0) == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(out.attn_weights(0, 1) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(out.attn_weights(1, 0) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("attention matches the loop oracle; multi-head rows stay stochastic") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd q = random_matrix(rng, 6, 8), k = random_matrix(rng, 9, 8), v = random_matrix(rng, 9, 8);
    Eigen::MatrixXd w;
    const Eigen::MatrixXd ref = attention_oracle(q, k, v, &w);
    const auto out = scaled_dot_attention<double>(q, k, v);
    CHECK((out.values_out - ref).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out.attn_weights - w).cwiseAbs().maxCoeff() < 1e-12);
    const auto mh = scaled_dot_attention<double>(q, k, v, 4);
    CHECK((mh.attn_weights.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-7);
    CHECK(std::abs(mh.attn_distribution.sum() - 1.0) < 1e-7);
  }
}

TEST_CASE("attention rejects non-finite inputs and width mismatches") {
  Eigen::MatrixXd q = Eigen::MatrixXd::Ones(2, 4), k = Eigen::MatrixXd::Ones(3, 4);
  q(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(scaled_dot_attention<double>(q, k, k), NumericError);
  CHECK_THROWS_AS(scaled_dot_attention<double>(Eigen::MatrixXd::Ones(2, 3), k, k), ShapeError);
  CHECK_THROWS_AS(scaled_dot_attention<double>(k, k, k, 3), ShapeError);
}

TEST_CASE("attention backward against central differences, with a distribution gradient") {
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd q = random_matrix(rng, 3, 4), k = random_matrix(rng, 5, 4), v = random_matrix(rng, 5, 4);
  const Eigen::MatrixXd go = random_matrix(rng, 3, 4);
  const Eigen::VectorXd gd = random_matrix(rng, 5, 1);
  auto loss = [&](const Eigen::MatrixXd& qq, const Eigen::MatrixXd& kk, const Eigen::MatrixXd& vv) {
    const auto o = scaled_dot_attention<double>(qq, kk, vv, 2);
    return (o.values_out.array() * go.array()).sum() + o.attn_distribution.dot(gd);
  };
  const auto fwd = scaled_dot_attention<double>(q, k, v, 2);
  const auto g = scaled_dot_attention_backward<double>(q, k, v, fwd, go, gd);
  const double h = 1e-6;
  auto check = [&](const Eigen::MatrixXd& analytic, int which) {
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
      Eigen::MatrixXd qp = q, kp = k, vp = v, qm = q, km = k, vm = v;
      Eigen::MatrixXd* p[3] = {&qp, &kp, &vp};
      Eigen::MatrixXd* m[3] = {&qm, &km, &vm};
      (*p[which])(i) += h;
      (*m[which])(i) -= h;
      CHECK(analytic(i) == doctest::Approx((loss(qp, kp, vp) - loss(qm, km, vm)) / (2 * h)).epsilon(1e-6));
    }
  };
  check(g.dq, 0);
  check(g.dk, 1);
  check(g.dv, 2);
}

TEST_CASE("kl: worked examples") {
  Eigen::Vector2d a(0.5, 0.5), h(0.9, 0.1), one(1.0, 0.0);
  CHECK(kl_regularizer(a, h) == doctest::Approx(0.5108256).epsilon(1e-6));
  CHECK(kl_regularizer(one, h) == doctest::Approx(std::log(1.0 / 0.9)).epsilon(1e-7));
  CHECK(kl_regularizer(h, h) < 1e-6);
  CHECK_THROWS_AS(kl_regularizer(Eigen::Vector3d(1, 0, 0), h), ShapeError);
}

TEST_CASE("kl matches the long-double oracle on random pairs and is non-negative") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> len(1, 64);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = len(rng);
    const Eigen::VectorXd a = random_simplex(rng, n, 0.2), h = random_simplex(rng, n, 0.3);
    const double d = kl_regularizer(a, h);
    CHECK(std::abs(d - static_cast<double>(kl_oracle(a, h, 1e-8L))) < 1e-9);
    CHECK(d >= -1e-12);
    CHECK(std::abs(kl_regularizer(h, h)) < 1e-6);
  }
}

TEST_CASE("kl gradient: finite differences, and tangent-zero at the minimum") {
  std::mt19937_64 rng(7);
  const Eigen::VectorXd a = random_simplex(rng, 6), h = random_simplex(rng, 6);
  const Eigen::VectorXd g = kl_regularizer_grad(a, h);
  for (int i = 0; i < 6; ++i) {
    Eigen::VectorXd ap = a, am = a;
    ap(i) += 1e-6;
    am(i) -= 1e-6;
    CHECK(g(i) == doctest::Approx((kl_regularizer(ap, h) - kl_regularizer(am, h)) / 2e-6).epsilon(1e-6));
  }
  const Eigen::VectorXd hs = smoothed_target(h, 1e-8);
  const Eigen::VectorXd gm = kl_regularizer_grad(hs, h);
  CHECK((gm.array() - gm.mean()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("loss combination: exact arithmetic and monotone in lambda") {
  const LossBreakdown l = LossBreakdown::combine(2.0, 0.01, 0.0, 100.0);
  CHECK(l.total == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(LossBreakdown::combine(1.3, 0.4, 0.2, 0.0).total == 1.3 + 0.2);
  double prev = -1;
  for (double lambda : {0.0, 0.1, 1.0, 10.0, 100.0, 1000.0}) {
    const double t = LossBreakdown::combine(1.0, 0.25, 0.1, lambda).total;
    CHECK(t > prev);
    prev = t;
  }
}

TEST_CASE("patch embedding: zero image and bias leave only the positional code") {
  ModelConfig c;
  const ModelState s = ModelState::init(c, 0);
  PatchEmbedder w = s.params.embed_rgb;
  w.bias.setZero();
  const Eigen::MatrixXd t = embed_patches(Image(32, 32, 3), c.grid, w);
  const int dl = local_dim(c.dim);
  CHECK((t.leftCols(dl) - positional_encoding(c.grid, dl)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(t.rightCols(c.dim - dl).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("patch embedding: the patch-local part follows a patch swap") {
  ModelConfig c;
  const ModelState s = ModelState::init(c, 1);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(32, 32, 3);
  for (auto& p : img.planes) p = p.unaryExpr([&](double) { return u(rng); });
  Image swapped = img;
  for (auto& p : swapped.planes) p.block(0, 0, 8, 8).swap(p.block(16, 24, 8, 8));
  const int dl = local_dim(c.dim), a = 0, b = 2 * 4 + 3;
  const Eigen::MatrixXd pe = positional_encoding(c.grid, dl);
  const Eigen::MatrixXd t0 = embed_patches(img, c.grid, s.params.embed_rgb).leftCols(dl) - pe;
  const Eigen::MatrixXd t1 = embed_patches(swapped, c.grid, s.params.embed_rgb).leftCols(dl) - pe;
  CHECK((t1.row(a) - t0.row(b)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((t1.row(b) - t0.row(a)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((t1.row(5) - t0.row(5)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(t0.allFinite());
  CHECK(t0.rows() == 16);
}

TEST_CASE("positional codes are distinct per patch") {
  const Eigen::MatrixXd pe = positional_encoding(PatchGrid{4, 4, 8, 8}, 16);
  for (int i = 0; i < 16; ++i)
    for (int j = i + 1; j < 16; ++j) CHECK((pe.row(i) - pe.row(j)).norm() > 0.1);
}

TEST_CASE("pool and decode: shape, zero network, frame order") {
  ModelConfig c;
  c.tau_o = 5;
  c.out_len = 6;
  c.vocab = 32;
  ModelState s = ModelState::init(c, 2);
  std::mt19937_64 rng(9);
  std::vector<Eigen::MatrixXd> toks;
  for (int k = 0; k < 5; ++k) toks.push_back(random_matrix(rng, 16, c.dim));
  const std::vector<int> prev{1, 2, 3, 4, 5};
  const Eigen::MatrixXd logits = pool_and_decode(s, toks, prev);
  CHECK(logits.rows() == 6);
  CHECK(logits.cols() == 32);

  auto rev = toks;
  std::reverse(rev.begin(), rev.end());
  CHECK((pool_and_decode(s, rev, prev) - logits).cwiseAbs().maxCoeff() > 1e-9);

  ModelState z = s;
  z.params.out_w.setZero();
  z.params.out_b.setZero();
  std::vector<Eigen::MatrixXd> zeros(5, Eigen::MatrixXd::Zero(16, c.dim));
  const Eigen::MatrixXd zl = pool_and_decode(z, zeros, prev);
  CHECK((zl.array() - zl(0, 0)).abs().maxCoeff() == 0.0);

  toks.pop_back();
  CHECK_THROWS_AS(pool_and_decode(s, toks, prev), ShapeError);
}

TEST_CASE("forward is deterministic and lambda 0 removes the regularizer from the gradient") {
  GradCheckProblem p = make_gradcheck_problem(QueryMode::overlay, 2);
  std::vector<const SampleInputs*> batch;
  for (const auto& b : p.batch) batch.push_back(&b);
  ModelParams g1 = p.state.params.zeros_like(), g2 = p.state.params.zeros_like();
  const LossBreakdown l1 = forward_backward(p.state, batch, p.options, &g1);
  const LossBreakdown l2 = forward_backward(p.state, batch, p.options, &g2);
  CHECK(l1.total == l2.total);
  CHECK(l1.kl == l2.kl);
  CHECK(l1.kl > 0.0);

  ModelState s0 = p.state;
  s0.lambda = 0.0;
  ModelParams ga = s0.params.zeros_like();
  const LossBreakdown l0 = forward_backward(s0, batch, p.options, &ga);
  CHECK(l0.total == l0.ce + l0.cosine);
  // gradient of lambda * kl alone: difference of the two runs, scaled back up
  ModelState s1 = p.state;
  s1.lambda = 1.0;
  ModelParams gb = s1.params.zeros_like();
  forward_backward(s1, batch, p.options, &gb);
  ModelState s2 = p.state;
  s2.lambda = 2.0;
  ModelParams gc = s2.params.zeros_like();
  forward_backward(s2, batch, p.options, &gc);
  // linear in lambda: g(2) - g(1) == g(1) - g(0)
  std::vector<Eigen::MatrixXd> va, vb, vc;
  ga.visit([&](const std::string&, const Eigen::MatrixXd& m) { va.push_back(m); });
  gb.visit([&](const std::string&, const Eigen::MatrixXd& m) { vb.push_back(m); });
  gc.visit([&](const std::string&, const Eigen::MatrixXd& m) { vc.push_back(m); });
  for (std::size_t i = 0; i < va.size(); ++i)
    CHECK(((vc[i] - vb[i]) - (vb[i] - va[i])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("analytic gradients match finite differences on the micro-batch") {
  for (QueryMode mode : {QueryMode::overlay, QueryMode::rgb}) {
    const GradCheckProblem p = make_gradcheck_problem(mode, 1);
    for (const auto& e : gradient_check(p.state, p.batch, p.options, 1e-4)) {
      INFO(e.name);
      CHECK(e.rel_error < 1e-4);
    }
  }
}

TEST_CASE("n_blocks 1, 2 and 5 construct and take training steps") {
  for (int nb : {1, 2, 5}) {
    GradCheckProblem p = make_gradcheck_problem(QueryMode::overlay, nb);
    CHECK(p.state.params.blocks.size() == static_cast<std::size_t>(nb));
    std::vector<const SampleInputs*> batch;
    for (const auto& b : p.batch) batch.push_back(&b);
    ModelParams g = p.state.params.zeros_like();
    const LossBreakdown before = forward_backward(p.state, batch, p.options, &g);
    std::vector<Eigen::MatrixXd> grads;
    g.visit([&](const std::string&, const Eigen::MatrixXd& m) { grads.push_back(m); });
    std::size_t i = 0;
    p.state.params.visit([&](const std::string&, Eigen::MatrixXd& m) { m -= 1e-3 * grads[i++]; });
    const LossBreakdown after = forward_backward(p.state, batch, p.options, nullptr);
    CHECK(std::isfinite(after.total));
    CHECK(after.total < before.total);
  }
}
