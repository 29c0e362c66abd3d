#ifndef GAZEREG_ATTENTION_HPP
#define GAZEREG_ATTENTION_HPP

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "gazereg/errors.hpp"

namespace gazereg {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& x, const std::string& name) {
  if (!x.allFinite()) throw NumericError("non-finite value in " + name);
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
Mat<typename Derived::Scalar> row_softmax(const Eigen::MatrixBase<Derived>& scores) {
  using Scalar = typename Derived::Scalar;
  Mat<Scalar> out = scores;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return out;
}

/// Backward of a row-wise softmax: dS = A .* (dA - rowsum(dA .* A)).
template <typename DA, typename DG>
Mat<typename DA::Scalar> row_softmax_backward(const Eigen::MatrixBase<DA>& weights,
                                              const Eigen::MatrixBase<DG>& grad_weights) {
  using Scalar = typename DA::Scalar;
  const Vec<Scalar> inner = (weights.array() * grad_weights.array()).rowwise().sum();
  return (weights.array() * (grad_weights.array().colwise() - inner.array())).matrix();
}

template <typename Scalar>
struct AttentionOutputT {
  Mat<Scalar> values_out;         // N_q x d_v
  Mat<Scalar> attn_weights;       // N_q x N_k, head-averaged, row-stochastic
  Vec<Scalar> attn_distribution;  // length N_k, mean over query rows and heads
  std::vector<Mat<Scalar>> head_weights;
};

using AttentionOutput = AttentionOutputT<double>;

/// softmax(Q K^T / sqrt(d_k)) V with the model dimension split evenly into
/// `heads` column blocks.
template <typename Scalar>
AttentionOutputT<Scalar> scaled_dot_attention(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v,
                                              int heads = 1) {
  if (q.cols() != k.cols()) throw ShapeError("attention: query/key width mismatch");
  if (k.rows() != v.rows()) throw ShapeError("attention: key/value count mismatch");
  if (heads <= 0 || q.cols() % heads != 0 || v.cols() % heads != 0)
    throw ShapeError("attention: width not divisible by head count");
  require_finite(q, "attention.query");
  require_finite(k, "attention.key");
  require_finite(v, "attention.value");
  const Eigen::Index dk = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dk));

  AttentionOutputT<Scalar> out;
  out.values_out.resize(q.rows(), v.cols());
  out.attn_weights = Mat<Scalar>::Zero(q.rows(), k.rows());
  for (int hd = 0; hd < heads; ++hd) {
    Mat<Scalar> a = row_softmax(q.middleCols(hd * dk, dk) * k.middleCols(hd * dk, dk).transpose() * scale);
    out.values_out.middleCols(hd * dv, dv).noalias() = a * v.middleCols(hd * dv, dv);
    out.attn_weights += a;
    out.head_weights.push_back(std::move(a));
  }
  out.attn_weights /= Scalar(heads);
  out.attn_distribution = out.attn_weights.colwise().mean().transpose();
  return out;
}

template <typename Scalar>
struct AttentionGradsT {
  Mat<Scalar> dq;
  Mat<Scalar> dk;
  Mat<Scalar> dv;
};

/// Reverse pass of scaled_dot_attention. `grad_distribution` is the upstream
/// gradient on attn_distribution (may be empty).
template <typename Scalar>
AttentionGradsT<Scalar> scaled_dot_attention_backward(const Mat<Scalar>& q, const Mat<Scalar>& k,
                                                      const Mat<Scalar>& v, const AttentionOutputT<Scalar>& fwd,
                                                      const Mat<Scalar>& grad_out,
                                                      const Vec<Scalar>& grad_distribution) {
  const int heads = static_cast<int>(fwd.head_weights.size());
  const Eigen::Index dk = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dk));
  AttentionGradsT<Scalar> g{Mat<Scalar>::Zero(q.rows(), q.cols()), Mat<Scalar>::Zero(k.rows(), k.cols()),
                            Mat<Scalar>::Zero(v.rows(), v.cols())};
  for (int hd = 0; hd < heads; ++hd) {
    const Mat<Scalar>& a = fwd.head_weights[static_cast<std::size_t>(hd)];
    Mat<Scalar> da = grad_out.middleCols(hd * dv, dv) * v.middleCols(hd * dv, dv).transpose();
    if (grad_distribution.size()) {
      // distribution = (1 / (heads * N_q)) * sum over heads and rows
      da.rowwise() += grad_distribution.transpose() / Scalar(heads * q.rows());
    }
    g.dv.middleCols(hd * dv, dv).noalias() += a.transpose() * grad_out.middleCols(hd * dv, dv);
    const Mat<Scalar> ds = row_softmax_backward(a, da) * scale;
    g.dq.middleCols(hd * dk, dk).noalias() += ds * k.middleCols(hd * dk, dk);
    g.dk.middleCols(hd * dk, dk).noalias() += ds.transpose() * q.middleCols(hd * dk, dk);
  }
  return g;
}

/// (target + eps) renormalised; keeps the divergence finite on empty patches.
template <typename Derived>
Vec<typename Derived::Scalar> smoothed_target(const Eigen::MatrixBase<Derived>& target,
                                              typename Derived::Scalar eps) {
  Vec<typename Derived::Scalar> h = target.array() + eps;
  return h / h.sum();
}

/// D(A || H) = sum_i A_i ln(A_i / H'_i), H' the smoothed target. Zero-mass
/// entries of A contribute nothing.
template <typename DA, typename DH>
typename DA::Scalar kl_regularizer(const Eigen::MatrixBase<DA>& attn, const Eigen::MatrixBase<DH>& target,
                                   typename DA::Scalar eps = typename DA::Scalar(1e-8)) {
  using Scalar = typename DA::Scalar;
  if (attn.size() != target.size()) throw ShapeError("kl_regularizer: length mismatch");
  const Vec<Scalar> h = smoothed_target(target, eps);
  Scalar d = 0;
  for (Eigen::Index i = 0; i < attn.size(); ++i) {
    const Scalar a = attn(i);
    if (a > Scalar(0)) d += a * std::log(a / h(i));
  }
  return d;
}

/// dD/dA_i = ln(A_i / H'_i) + 1 (zero where A_i = 0).
template <typename DA, typename DH>
Vec<typename DA::Scalar> kl_regularizer_grad(const Eigen::MatrixBase<DA>& attn, const Eigen::MatrixBase<DH>& target,
                                             typename DA::Scalar eps = typename DA::Scalar(1e-8)) {
  using Scalar = typename DA::Scalar;
  if (attn.size() != target.size()) throw ShapeError("kl_regularizer_grad: length mismatch");
  const Vec<Scalar> h = smoothed_target(target, eps);
  Vec<Scalar> g(attn.size());
  for (Eigen::Index i = 0; i < attn.size(); ++i) {
    const Scalar a = attn(i);
    g(i) = a > Scalar(0) ? std::log(a / h(i)) + Scalar(1) : Scalar(0);
  }
  return g;
}

}  // namespace gazereg

#endif  // GAZEREG_ATTENTION_HPP
