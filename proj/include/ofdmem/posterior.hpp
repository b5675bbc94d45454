// SPDX-License-Identifier: Apache-2.0
//
// ofdmem -- joint sparse-channel / CFO estimation for OFDM receivers.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0

#ifndef OFDMEM_POSTERIOR_HPP
#define OFDMEM_POSTERIOR_HPP

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "ofdmem/signal.hpp"

namespace ofdmem {

/// Gaussian prior over the unknown real-composite symbols [xR^U; xI^U].
struct SymbolPrior {
  RVector mean;  // 2U
  RMatrix cov;   // 2U x 2U, symmetric PSD

  static SymbolPrior isotropic(int n_unknown, double var_per_component = 0.5) {
    SymbolPrior p;
    p.mean = RVector::Zero(2 * n_unknown);
    p.cov = var_per_component * RMatrix::Identity(2 * n_unknown, 2 * n_unknown);
    return p;
  }

  void validate() const {
    if (mean.size() != cov.rows() || cov.rows() != cov.cols())
      throw std::invalid_argument("SymbolPrior: inconsistent dimensions");
    if (cov.size() == 0) return;
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12)
      throw std::invalid_argument("SymbolPrior: covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<RMatrix> es(cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-10)
      throw std::invalid_argument("SymbolPrior: covariance not PSD");
  }
};

struct PosteriorMoments {
  RVector mean;  // 2U
  RMatrix cov;   // 2U x 2U

  RMatrix second_moment() const { return cov + mean * mean.transpose(); }
  int dim() const { return static_cast<int>(mean.size()); }
};

/// Expected regressor matrices driving the channel update.
struct RegressorMoments {
  RMatrix m_mean;    // 2N x 2L: E[script-M(eps)]
  RMatrix mtm_mean;  // 2L x 2L: E[script-M^T script-M] (CFO-independent)
};

namespace detail {

inline Eigen::LLT<RMatrix> llt_with_jitter(RMatrix m, const char* what) {
  Eigen::LLT<RMatrix> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  const double jitter = 1e-10 * m.trace() / static_cast<double>(m.rows());
  m.diagonal().array() += jitter;
  llt.compute(m);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(std::string(what) + ": singular system beyond jitter floor");
  return llt;
}

}  // namespace detail

/// Factorized symbol prior; built once per estimator run. Rank-deficient
/// covariances are handled by conditioning inside the active eigen-subspace.
class PriorModel {
 public:
  explicit PriorModel(SymbolPrior prior) : prior_(std::move(prior)) {
    prior_.validate();
    const int d = static_cast<int>(prior_.mean.size());
    if (d == 0) return;
    Eigen::SelfAdjointEigenSolver<RMatrix> es(prior_.cov);
    if (es.info() != Eigen::Success) throw std::runtime_error("PriorModel: eigensolver failed");
    const double tol = 1e-12 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    int rank = 0;
    for (int i = 0; i < d; ++i)
      if (es.eigenvalues()[i] > tol) ++rank;
    basis_ = es.eigenvectors().rightCols(rank);
    var_ = es.eigenvalues().tail(rank).cwiseMax(0.0);
  }

  const SymbolPrior& prior() const { return prior_; }
  int dim() const { return static_cast<int>(prior_.mean.size()); }
  int rank() const { return static_cast<int>(var_.size()); }
  const RMatrix& basis() const { return basis_; }
  const RVector& variances() const { return var_; }

  /// E[log p(chi) | posterior], using the pseudo-determinant on the active
  /// subspace; constant in the model parameters.
  double expected_log_prior(const PosteriorMoments& post) const {
    if (rank() == 0) return 0.0;
    const RVector dm = basis_.transpose() * (post.mean - prior_.mean);
    const RMatrix cw = basis_.transpose() * post.cov * basis_;
    double quad = 0.0, logdet = 0.0;
    for (int i = 0; i < rank(); ++i) {
      quad += (cw(i, i) + dm[i] * dm[i]) / var_[i];
      logdet += std::log(var_[i]);
    }
    return -0.5 * (rank() * std::log(kTwoPi) + logdet + quad);
  }

 private:
  SymbolPrior prior_;
  RMatrix basis_;  // 2U x rank
  RVector var_;    // rank
};

namespace detail {

/// Splits the stacked channel-linear model into y = offset + B chi.
struct SplitModel {
  RMatrix b;       // 2N x 2U
  RVector offset;  // 2N
};

inline SplitModel split_observation_model(const ChannelImpulseResponse& h, double eps,
                                          const ModelContext& ctx) {
  const RMatrix m = channel_observation_matrix(h, eps, ctx);
  const int n_train = ctx.layout.n_train;
  const int u = ctx.layout.n_unknown();
  const int n = ctx.n_sub;
  SplitModel out;
  out.b.resize(2 * n, 2 * u);
  out.b.leftCols(u) = m.middleCols(n_train, u);
  out.b.rightCols(u) = m.middleCols(n + n_train, u);
  out.offset = m * to_real_composite(ctx.x_known, ctx.layout);
  return out;
}

}  // namespace detail

/// Exact linear-Gaussian conditioning of the unknown symbols on the full
/// observation vector (interleaved layout), at the parameter iterate
/// (h = g/rho, eps, rho). Noise covariance is 0.5 sigma^2 I with sigma = 1/rho.
inline PosteriorMoments posterior_batch(const ModelContext& ctx, const RVector& y,
                                        const ChannelImpulseResponse& h, double eps, double rho,
                                        const PriorModel& prior) {
  ctx.validate();
  const int u = ctx.layout.n_unknown();
  if (prior.dim() != 2 * u) throw std::invalid_argument("posterior_batch: prior dimension");
  if (y.size() != 2 * ctx.n_sub) throw std::invalid_argument("posterior_batch: observation size");
  PosteriorMoments post;
  post.mean = prior.prior().mean;
  post.cov = prior.prior().cov;
  if (u == 0 || prior.rank() == 0) return post;

  const auto model = detail::split_observation_model(h, eps, ctx);
  const double w = 2.0 * rho * rho;  // Sigma_y^{-1} = 2 rho^2 I
  const RMatrix bv = model.b * prior.basis();
  RMatrix prec = w * (bv.transpose() * bv);
  prec.diagonal() += prior.variances().cwiseInverse();
  const auto llt = detail::llt_with_jitter(prec, "posterior_batch");
  const RVector resid = y - model.offset - model.b * prior.prior().mean;
  const RVector mean_w = llt.solve(w * (bv.transpose() * resid));
  const RMatrix cov_w = llt.solve(RMatrix::Identity(prior.rank(), prior.rank()));
  post.mean = prior.prior().mean + prior.basis() * mean_w;
  post.cov = prior.basis() * cov_w * prior.basis().transpose();
  return post;
}

/// Same posterior computed by a constant-state filter over the 2-row
/// observation blocks (measurement updates only, Joseph-stabilized).
/// `order` optionally selects the block processing order.
inline PosteriorMoments posterior_sequential(const ModelContext& ctx, const RVector& y,
                                             const ChannelImpulseResponse& h, double eps,
                                             double rho, const PriorModel& prior,
                                             std::vector<int> order = {}) {
  ctx.validate();
  const int u = ctx.layout.n_unknown();
  if (prior.dim() != 2 * u) throw std::invalid_argument("posterior_sequential: prior dimension");
  if (y.size() != 2 * ctx.n_sub)
    throw std::invalid_argument("posterior_sequential: observation size");
  PosteriorMoments post;
  post.mean = prior.prior().mean;
  post.cov = prior.prior().cov;
  if (u == 0 || prior.rank() == 0) return post;

  if (order.empty()) {
    order.resize(static_cast<size_t>(ctx.n_sub));
    for (int k = 0; k < ctx.n_sub; ++k) order[static_cast<size_t>(k)] = k;
  }
  const auto model = detail::split_observation_model(h, eps, ctx);
  const int r = prior.rank();
  const RMatrix bv = model.b * prior.basis();
  const RVector resid0 = y - model.offset - model.b * prior.prior().mean;

  // Constant-state filter: no time update, measurement updates only.
  RVector mean_w = RVector::Zero(r);
  RMatrix cov_w = prior.variances().asDiagonal();
  const double noise_var = 0.5 / (rho * rho);
  const RMatrix eye_r = RMatrix::Identity(r, r);
  for (int k : order) {
    if (k < 0 || k >= ctx.n_sub) throw std::out_of_range("posterior_sequential: bad block index");
    const RMatrix hk = bv.middleRows(2 * k, 2);  // 2 x r
    const Eigen::Vector2d zk(resid0[2 * k], resid0[2 * k + 1]);
    const RMatrix ph = cov_w * hk.transpose();   // r x 2
    Eigen::Matrix2d s = hk * ph;
    s.diagonal().array() += noise_var;
    const RMatrix gain = ph * s.inverse();       // r x 2
    mean_w += gain * (zk - hk * mean_w);
    const RMatrix ikh = eye_r - gain * hk;       // Joseph-stabilized update
    cov_w = ikh * cov_w * ikh.transpose() + noise_var * (gain * gain.transpose());
  }
  post.mean = prior.prior().mean + prior.basis() * mean_w;
  post.cov = prior.basis() * cov_w * prior.basis().transpose();
  return post;
}

// ---------------------------------------------------------------------------
// Expected regressors
// ---------------------------------------------------------------------------

/// CFO-free E-step products: complex mean rows m_k[l] = E[s_{(k-l) mod N}]
/// (s = P x) and the 2L x 2L matrix E[script-M^T script-M]. The per-sample
/// CFO rotation cancels inside script-M^T script-M, which is block-Toeplitz
/// in the circular autocorrelation lags of s.
struct RegressorBasis {
  CMatrix mean_rows;  // N x L
  RMatrix mtm;        // 2L x 2L
};

namespace detail {

/// Pairwise complex second moments E[x_{t1} conj(x_{t2})] under the symbol
/// posterior, with training entries deterministic.
class PairMoments {
 public:
  PairMoments(const ModelContext& ctx, const PosteriorMoments& post)
      : ctx_(ctx), post_(post), u_(ctx.layout.n_unknown()) {
    mean_x_ = ctx.x_known;
    for (int i = 0; i < u_; ++i) {
      const int t = ctx.layout.unknown_times[static_cast<size_t>(i)];
      mean_x_[t] = Complex(post.mean[i], post.mean[u_ + i]);
    }
  }

  const CVector& mean() const { return mean_x_; }

  Complex operator()(int t1, int t2) const {
    const int u1 = ctx_.layout.unknown_pos[static_cast<size_t>(t1)];
    const int u2 = ctx_.layout.unknown_pos[static_cast<size_t>(t2)];
    if (u1 < 0 && u2 < 0) return ctx_.x_known[t1] * std::conj(ctx_.x_known[t2]);
    if (u1 < 0) return ctx_.x_known[t1] * std::conj(mean_x_[t2]);
    if (u2 < 0) return mean_x_[t1] * std::conj(ctx_.x_known[t2]);
    const auto& c = post_.cov;
    const auto& m = post_.mean;
    const double rr = c(u1, u2) + m[u1] * m[u2];
    const double ii = c(u_ + u1, u_ + u2) + m[u_ + u1] * m[u_ + u2];
    const double ir = c(u_ + u1, u2) + m[u_ + u1] * m[u2];
    const double ri = c(u1, u_ + u2) + m[u1] * m[u_ + u2];
    return Complex(rr + ii, ir - ri);
  }

 private:
  const ModelContext& ctx_;
  const PosteriorMoments& post_;
  int u_;
  CVector mean_x_;
};

}  // namespace detail

inline RegressorBasis regressor_basis(const ModelContext& ctx, const PosteriorMoments& post) {
  const int n = ctx.n_sub;
  const int len = ctx.chan_len;
  const detail::PairMoments pm(ctx, post);

  CVector mean_s(n);
  for (int a = 0; a < n; ++a) mean_s[a] = pm.mean()[ctx.perm.order[static_cast<size_t>(a)]];

  RegressorBasis basis;
  basis.mean_rows.resize(n, len);
  for (int k = 0; k < n; ++k)
    for (int l = 0; l < len; ++l) basis.mean_rows(k, l) = mean_s[((k - l) % n + n) % n];

  // E[R_s[d]] = sum_a E[s_a conj(s_{(a-d) mod N})]
  CVector lags = CVector::Zero(len);
  for (int d = 0; d < len; ++d) {
    Complex acc(0, 0);
    for (int a = 0; a < n; ++a) {
      const int t1 = ctx.perm.order[static_cast<size_t>(a)];
      const int t2 = ctx.perm.order[static_cast<size_t>(((a - d) % n + n) % n)];
      acc += pm(t1, t2);
    }
    lags[d] = acc;
  }
  CMatrix c(len, len);
  for (int l = 0; l < len; ++l)
    for (int m = 0; m < len; ++m) c(l, m) = (m >= l) ? lags[m - l] : std::conj(lags[l - m]);

  basis.mtm.resize(2 * len, 2 * len);
  basis.mtm.topLeftCorner(len, len) = c.real();
  basis.mtm.topRightCorner(len, len) = c.imag();
  basis.mtm.bottomLeftCorner(len, len) = c.imag().transpose();
  basis.mtm.bottomRightCorner(len, len) = c.real();
  return basis;
}

/// E[script-M(eps)] as a 2N x 2L real matrix.
inline RMatrix regressor_mean(const RegressorBasis& basis, double eps) {
  const int n = static_cast<int>(basis.mean_rows.rows());
  const int len = static_cast<int>(basis.mean_rows.cols());
  RMatrix m(2 * n, 2 * len);
  for (int k = 0; k < n; ++k) {
    const double psi = kTwoPi * eps * k / n;
    const Complex rot(std::cos(psi), std::sin(psi));
    for (int l = 0; l < len; ++l) {
      const Complex cv = rot * basis.mean_rows(k, l);
      m(2 * k, l) = cv.real();
      m(2 * k, len + l) = -cv.imag();
      m(2 * k + 1, l) = cv.imag();
      m(2 * k + 1, len + l) = cv.real();
    }
  }
  return m;
}

/// v(eps) = E[script-M(eps)]^T y, evaluated in complex form:
/// v_c = sum_k conj(m_k) e^{-j psi_k} y_k.
inline RVector regressor_mean_adjoint_y(const RegressorBasis& basis, double eps,
                                        const RVector& y) {
  const int n = static_cast<int>(basis.mean_rows.rows());
  const int len = static_cast<int>(basis.mean_rows.cols());
  if (y.size() != 2 * n) throw std::invalid_argument("regressor_mean_adjoint_y: size mismatch");
  CVector w(n);
  const Complex step = std::polar(1.0, -kTwoPi * eps / n);
  Complex rot(1.0, 0.0);
  for (int k = 0; k < n; ++k) {
    w[k] = rot * Complex(y[2 * k], y[2 * k + 1]);
    rot *= step;
  }
  const CVector vc = basis.mean_rows.adjoint() * w;
  RVector v(2 * len);
  v.head(len) = vc.real();
  v.tail(len) = vc.imag();
  return v;
}

inline RegressorMoments expected_regressors(const ModelContext& ctx, const PosteriorMoments& post,
                                            double eps) {
  const RegressorBasis basis = regressor_basis(ctx, post);
  return RegressorMoments{regressor_mean(basis, eps), basis.mtm};
}

}  // namespace ofdmem

#endif  // OFDMEM_POSTERIOR_HPP
