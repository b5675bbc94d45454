// SPDX-License-Identifier: Apache-2.0
//
// ofdmem -- joint sparse-channel / CFO estimation for OFDM receivers.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0

#ifndef OFDMEM_ESTIMATOR_HPP
#define OFDMEM_ESTIMATOR_HPP

#include <functional>
#include <limits>
#include <optional>

#include <nlohmann/json.hpp>

#include "ofdmem/posterior.hpp"
#include "ofdmem/simulate.hpp"

namespace ofdmem {

inline constexpr double kRhoMin = 1e-6;
inline constexpr double kRhoMax = 1e6;
inline constexpr double kGClamp = 1e-8;   // |g_j| floor inside the penalty weights
inline constexpr double kTauFloor = 1e-12;

/// EM iterate in the convexifying parametrization g = h_bar / sigma,
/// rho = 1/sigma, plus the prior scale tau.
struct ReparamState {
  RVector g;  // 2L
  double epsilon = 0.0;
  double rho = 1.0;
  double tau = 1.0;

  RVector h_bar() const { return g / rho; }
  ChannelImpulseResponse channel() const {
    return ChannelImpulseResponse::from_real_composite(h_bar());
  }
};

/// Diagonal of E = diag(E[lambda_j^{-1} | g_hat_j]).
struct PenaltyMatrix {
  RVector diag;
};

/// E[lambda_j^{-1} | g_hat_j] = tau / |g_hat_j| for the l1 log-prior,
/// with |g_hat_j| clamped below to keep the concentrated system finite.
inline double e_lambda_inv(double g_hat_j, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("e_lambda_inv: tau must be > 0");
  return tau / std::max(std::abs(g_hat_j), kGClamp);
}

inline PenaltyMatrix penalty_matrix(const RVector& g_hat, double tau) {
  PenaltyMatrix e;
  e.diag.resize(g_hat.size());
  for (Eigen::Index j = 0; j < g_hat.size(); ++j) e.diag[j] = e_lambda_inv(g_hat[j], tau);
  return e;
}

/// dQ_prior/dg = -(1/tau^2) E g.
inline RVector penalty_gradient(const PenaltyMatrix& e, const RVector& g, double tau) {
  return -(e.diag.cwiseProduct(g)) / (tau * tau);
}

struct EmIterationRecord {
  double q_before = 0.0;       // Q(gamma_hat; gamma_hat)
  double q_after = 0.0;        // Q(gamma_new; gamma_hat)
  double map_objective = 0.0;  // marginal log-likelihood (+ log-prior in MAP mode)
  double delta_g = 0.0;        // ||g_new - g|| / ||g||
  double delta_eps = 0.0;
  double delta_rho = 0.0;      // |rho_new - rho| / rho
  double epsilon = 0.0;
  double rho = 0.0;
  bool rho_clamped = false;
};

struct EmTrace {
  std::vector<EmIterationRecord> iterations;
  bool converged = false;

  int count() const { return static_cast<int>(iterations.size()); }

  /// Within-iteration EM ascent: q_after >= q_before up to relative slack.
  bool ascent_ok(double rel_slack = 1e-8) const {
    for (const auto& it : iterations)
      if (it.q_after < it.q_before - rel_slack * std::abs(it.q_before)) return false;
    return true;
  }

  double worst_ascent_slack() const {
    double worst = 0.0;
    for (const auto& it : iterations) {
      const double rel = (it.q_before - it.q_after) / std::max(1.0, std::abs(it.q_before));
      worst = std::max(worst, rel);
    }
    return worst;
  }
};

struct EstimatorOptions {
  std::optional<double> tau;       // empty = empirical-Bayes from an unpenalized pilot run
  std::optional<int> max_iter;     // default 100 (full training) / 300 (partial)
  double tol_g = 1e-6;
  double tol_eps = 1e-7;
  double tol_rho = 1e-6;
  int cfo_grid_points = 256;
  double cfo_window = 0.02;        // bracket half-width after the first iteration
  double symbol_prior_var = 0.5;   // per real component
  std::optional<RMatrix> symbol_prior_cov;  // full 2U x 2U structure override
};

struct EstimateResult {
  ChannelImpulseResponse h_hat;
  double epsilon_hat = 0.0;
  double sigma_hat = 0.0;
  double tau_used = std::numeric_limits<double>::quiet_NaN();  // NaN in ML mode
  int iterations = 0;
  bool converged = false;
  EmTrace trace;
  PosteriorMoments symbol_posterior;

  json to_json() const {
    json j;
    json hre = json::array(), him = json::array(), qt = json::array();
    for (int l = 0; l < h_hat.length(); ++l) {
      hre.push_back(h_hat.taps[l].real());
      him.push_back(h_hat.taps[l].imag());
    }
    for (const auto& it : trace.iterations) qt.push_back(it.q_after);
    j["h_hat_re"] = hre;
    j["h_hat_im"] = him;
    j["epsilon_hat"] = epsilon_hat;
    j["sigma_hat"] = sigma_hat;
    if (std::isnan(tau_used))
      j["tau_used"] = nullptr;
    else
      j["tau_used"] = tau_used;
    j["iterations"] = iterations;
    j["converged"] = converged;
    j["q_trace"] = qt;
    return j;
  }
};

// ---------------------------------------------------------------------------
// One E-step and the concentrated auxiliary function built on it
// ---------------------------------------------------------------------------

/// Products of a single E-step at the iterate gamma_hat. The posterior
/// moments (and with them the expected regressors and the penalty weights)
/// stay fixed while the M-step searches over epsilon; only the cos/sin
/// factors inside E[script-M(eps)] vary.
struct EmStep {
  const ModelContext* ctx = nullptr;
  const RVector* y = nullptr;
  double yty = 0.0;
  double rho = 1.0;  // held fixed during the CFO search
  double tau = 0.0;
  bool penalized = false;
  PosteriorMoments post;
  RegressorBasis basis;
  RVector penalty_diag;            // empty in ML mode
  Eigen::LLT<RMatrix> system_llt;  // E[M^T M] + E/(2 tau^2)
  double expected_log_prior = 0.0;
  double marginal_loglik = 0.0;    // log p(y | gamma_hat), diagnostic
};

inline double k_y_constant(double rho, int n_sub) {
  return -n_sub * std::log(kTwoPi) - 0.5 * n_sub * std::log(0.5) +
         n_sub * std::log(rho * rho);
}

namespace detail {

struct PosteriorWithModel {
  PosteriorMoments post;
  RMatrix bv;       // B V (2N x rank)
  RVector resid0;   // y - offset - B mu0
};

inline PosteriorWithModel posterior_with_model(const ModelContext& ctx, const RVector& y,
                                               const ChannelImpulseResponse& h, double eps,
                                               double rho, const PriorModel& prior) {
  PosteriorWithModel out;
  out.post.mean = prior.prior().mean;
  out.post.cov = prior.prior().cov;
  const int u = ctx.layout.n_unknown();
  if (u == 0 || prior.rank() == 0) {
    const auto model = split_observation_model(h, eps, ctx);
    out.bv.resize(2 * ctx.n_sub, 0);
    out.resid0 = y - model.offset - (u ? RVector(model.b * prior.prior().mean) : RVector::Zero(2 * ctx.n_sub));
    return out;
  }
  const auto model = split_observation_model(h, eps, ctx);
  const double w = 2.0 * rho * rho;
  out.bv = model.b * prior.basis();
  out.resid0 = y - model.offset - model.b * prior.prior().mean;
  RMatrix prec = w * (out.bv.transpose() * out.bv);
  prec.diagonal() += prior.variances().cwiseInverse();
  const auto llt = llt_with_jitter(prec, "posterior");
  const RVector mean_w = llt.solve(w * (out.bv.transpose() * out.resid0));
  const RMatrix cov_w = llt.solve(RMatrix::Identity(prior.rank(), prior.rank()));
  out.post.mean = prior.prior().mean + prior.basis() * mean_w;
  out.post.cov = prior.basis() * cov_w * prior.basis().transpose();
  return out;
}

/// log N(y; offset + B mu0, B Sigma0 B^T + 0.5 sigma^2 I) via Woodbury on the
/// prior's active subspace.
inline double marginal_loglik(const PosteriorWithModel& pwm, const PriorModel& prior,
                              double rho) {
  const double c = 0.5 / (rho * rho);
  const auto n2 = static_cast<double>(pwm.resid0.size());
  const double zz = pwm.resid0.squaredNorm();
  if (prior.rank() == 0)
    return -0.5 * (n2 * std::log(kTwoPi) + n2 * std::log(c) + zz / c);
  const RMatrix a = pwm.bv * prior.variances().cwiseSqrt().asDiagonal();
  const RMatrix g = a.transpose() * a;
  const int r = prior.rank();
  RMatrix inner = g / c;
  inner.diagonal().array() += 1.0;
  const auto llt_inner = llt_with_jitter(inner, "marginal_loglik");
  double logdet = n2 * std::log(c);
  for (int i = 0; i < r; ++i) logdet += 2.0 * std::log(llt_inner.matrixL()(i, i));
  RMatrix cg = g;
  cg.diagonal().array() += c;
  const auto llt_cg = llt_with_jitter(cg, "marginal_loglik");
  const RVector az = a.transpose() * pwm.resid0;
  const double quad = (zz - az.dot(llt_cg.solve(az))) / c;
  return -0.5 * (n2 * std::log(kTwoPi) + logdet + quad);
}

}  // namespace detail

/// Runs the E-step at gamma_hat and assembles the concentrated M-step system.
inline EmStep make_em_step(const ModelContext& ctx, const RVector& y,
                           const ReparamState& gamma_hat, const PriorModel& prior,
                           bool penalized) {
  EmStep step;
  step.ctx = &ctx;
  step.y = &y;
  step.yty = y.squaredNorm();
  step.rho = gamma_hat.rho;
  step.tau = gamma_hat.tau;
  step.penalized = penalized;

  const ChannelImpulseResponse h = gamma_hat.channel();
  const auto pwm = detail::posterior_with_model(ctx, y, h, gamma_hat.epsilon, gamma_hat.rho, prior);
  step.post = pwm.post;
  step.expected_log_prior = prior.expected_log_prior(step.post);
  step.marginal_loglik = detail::marginal_loglik(pwm, prior, gamma_hat.rho);
  step.basis = regressor_basis(ctx, step.post);

  RMatrix system = step.basis.mtm;
  if (penalized) {
    step.penalty_diag = penalty_matrix(gamma_hat.g, gamma_hat.tau).diag;
    system.diagonal() += step.penalty_diag / (2.0 * gamma_hat.tau * gamma_hat.tau);
  }
  step.system_llt = detail::llt_with_jitter(std::move(system), "concentrated system");
  return step;
}

/// Q(gamma; gamma_hat) of the auxiliary function, at arbitrary (g, eps, rho).
inline double q_value(const EmStep& step, const RVector& g, double eps, double rho) {
  const RVector v = regressor_mean_adjoint_y(step.basis, eps, *step.y);
  double q = step.expected_log_prior + k_y_constant(rho, step.ctx->n_sub) -
             rho * rho * step.yty + 2.0 * rho * v.dot(g) - g.dot(step.basis.mtm * g);
  if (step.penalized)
    q -= g.dot(step.penalty_diag.cwiseProduct(g)) / (2.0 * step.tau * step.tau);
  return q;
}

/// Closed-form maximizer of Q over g at fixed eps (and the step's rho):
/// g = [E[M^T M] + E/(2 tau^2)]^{-1} E[M(eps)]^T rho y.
inline RVector concentrated_g(const EmStep& step, double eps) {
  const RVector v = regressor_mean_adjoint_y(step.basis, eps, *step.y);
  return step.system_llt.solve(step.rho * v);
}

/// Q with g concentrated out: the 1-D cost in the CFO.
inline double q_concentrated(const EmStep& step, double eps) {
  return q_value(step, concentrated_g(step, eps), eps, step.rho);
}

/// dQ_ML/dg = 2 (rho E[M(eps)]^T y - E[M^T M] g).
inline RVector q_ml_grad_g(const EmStep& step, const RVector& g, double eps, double rho) {
  const RVector v = regressor_mean_adjoint_y(step.basis, eps, *step.y);
  return 2.0 * (rho * v - step.basis.mtm * g);
}

/// dQ_ML/drho = 2 N / rho - 2 (rho y^T y - y^T E[M(eps)] g).
inline double q_ml_grad_rho(const EmStep& step, const RVector& g, double eps, double rho) {
  const RVector v = regressor_mean_adjoint_y(step.basis, eps, *step.y);
  return 2.0 * step.ctx->n_sub / rho - 2.0 * (rho * step.yty - v.dot(g));
}

// ---------------------------------------------------------------------------
// 1-D CFO search
// ---------------------------------------------------------------------------

struct Bracket {
  double lo = -0.5;
  double hi = 0.5;
};

/// Coarse grid over the bracket followed by golden-section refinement around
/// the best grid point. Near-ties resolve toward the smaller epsilon.
inline double cfo_search(const std::function<double(double)>& q, Bracket bracket,
                         int grid_points = 256) {
  if (!(bracket.lo >= -0.5 && bracket.hi <= 0.5 && bracket.lo < bracket.hi))
    throw std::invalid_argument("cfo_search: bracket must be within [-1/2, 1/2]");
  if (grid_points < 2) throw std::invalid_argument("cfo_search: need at least 2 grid points");

  double best_x = bracket.lo;
  double best_v = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid_points; ++i) {
    const double x = bracket.lo + (bracket.hi - bracket.lo) * i / (grid_points - 1);
    const double v = q(x);
    if (v > best_v + 1e-12 * std::max(1.0, std::abs(best_v))) {
      best_v = v;
      best_x = x;
    }
  }

  const double step = (bracket.hi - bracket.lo) / (grid_points - 1);
  double a = std::max(bracket.lo, best_x - step);
  double b = std::min(bracket.hi, best_x + step);
  constexpr double kInvPhi = 0.6180339887498949;
  double c = b - kInvPhi * (b - a);
  double d = a + kInvPhi * (b - a);
  double fc = q(c), fd = q(d);
  auto consider = [&](double x, double v) {
    if (v > best_v) {
      best_v = v;
      best_x = x;
    }
  };
  consider(c, fc);
  consider(d, fd);
  while (b - a > 1e-7) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - kInvPhi * (b - a);
      fc = q(c);
      consider(c, fc);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + kInvPhi * (b - a);
      fd = q(d);
      consider(d, fd);
    }
  }
  return best_x;
}

// ---------------------------------------------------------------------------
// Scalar updates
// ---------------------------------------------------------------------------

/// Positive root of N_C = rho^2 y^T y - rho b with b = y^T E[M] g.
inline double rho_update_root(double b, double yty, int n_sub) {
  if (!(yty > 0)) throw std::invalid_argument("rho_update: y must be nonzero");
  return (b + std::sqrt(b * b + 4.0 * n_sub * yty)) / (2.0 * yty);
}

inline double rho_update(const RVector& y, const RMatrix& m_mean, const RVector& g) {
  const double b = y.dot(m_mean * g);
  return rho_update_root(b, y.squaredNorm(), static_cast<int>(y.size()) / 2);
}

/// Empirical-Bayes prior scale from unregularized estimates:
/// tau = sum_j |h_ml_j| / (2 L sigma_ml).
inline double tau_empirical_bayes(const RVector& h_ml_composite, double sigma_ml) {
  if (!(sigma_ml > 0)) throw std::invalid_argument("tau_empirical_bayes: sigma_ml must be > 0");
  const double t =
      h_ml_composite.lpNorm<1>() / (static_cast<double>(h_ml_composite.size()) * sigma_ml);
  return std::max(t, kTauFloor);
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

struct LsInit {
  RVector h_bar;
  double sigma = 1.0;
  bool training_only = false;
};

/// Unpenalized LS at eps = 0 on the observation rows whose regressor touches
/// training samples only; falls back to all rows with prior-mean imputation
/// when those rows cannot determine the channel.
inline LsInit training_rows_ls(const ModelContext& ctx, const RVector& y) {
  const int n = ctx.n_sub;
  const int len = ctx.chan_len;
  std::vector<int> rows;
  for (int k = 0; k < n; ++k) {
    bool all_training = true;
    for (int l = 0; l < len && all_training; ++l) {
      const int a = ((k - l) % n + n) % n;
      const int t = ctx.perm.order[static_cast<size_t>(a)];
      all_training = ctx.layout.mask[static_cast<size_t>(t)] != 0;
    }
    if (all_training) rows.push_back(k);
  }
  LsInit init;
  init.training_only = static_cast<int>(rows.size()) >= len;
  if (!init.training_only) {
    rows.resize(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) rows[static_cast<size_t>(k)] = k;
  }
  const RMatrix full = symbol_observation_matrix(ctx.x_known, 0.0, ctx.perm, len);
  RMatrix a(2 * rows.size(), 2 * len);
  RVector b(2 * rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    a.middleRows(2 * static_cast<Eigen::Index>(i), 2) = full.middleRows(2 * rows[i], 2);
    b[2 * static_cast<Eigen::Index>(i)] = y[2 * rows[i]];
    b[2 * static_cast<Eigen::Index>(i) + 1] = y[2 * rows[i] + 1];
  }
  Eigen::ColPivHouseholderQR<RMatrix> qr(a);
  init.h_bar = qr.solve(b);
  const double rss = (b - a * init.h_bar).squaredNorm();
  // per real component the noise variance is sigma^2 / 2
  init.sigma = std::sqrt(std::max(rss / static_cast<double>(rows.size()), 1e-12));
  return init;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EM driver
// ---------------------------------------------------------------------------

namespace detail {

inline EstimateResult run_em(const ModelContext& ctx, const RVector& y,
                             const EstimatorOptions& opts, bool penalized, double tau) {
  ctx.validate();
  const int n_unknown = ctx.layout.n_unknown();
  SymbolPrior sp;
  if (opts.symbol_prior_cov) {
    sp.mean = RVector::Zero(2 * n_unknown);
    sp.cov = *opts.symbol_prior_cov;
  } else {
    sp = SymbolPrior::isotropic(n_unknown, opts.symbol_prior_var);
  }
  const PriorModel prior(std::move(sp));

  const int max_iter = opts.max_iter.value_or(n_unknown == 0 ? 100 : 300);

  const LsInit init = training_rows_ls(ctx, y);
  ReparamState state;
  state.epsilon = 0.0;
  state.rho = std::clamp(1.0 / init.sigma, kRhoMin, kRhoMax);
  state.g = init.h_bar * state.rho;
  state.tau = penalized ? tau : 1.0;

  EmTrace trace;
  for (int it = 0; it < max_iter; ++it) {
    const EmStep step = make_em_step(ctx, y, state, prior, penalized);
    const double q_before = q_value(step, state.g, state.epsilon, state.rho);

    auto qc = [&](double e) { return q_concentrated(step, e); };
    Bracket bracket;
    if (it > 0) {
      bracket.lo = std::max(-0.5, state.epsilon - opts.cfo_window);
      bracket.hi = std::min(0.5, state.epsilon + opts.cfo_window);
    }
    double eps_new = cfo_search(qc, bracket, opts.cfo_grid_points);
    const bool narrowed = bracket.hi - bracket.lo < 1.0 - 1e-12;
    if (narrowed && (eps_new - bracket.lo < 1e-9 || bracket.hi - eps_new < 1e-9))
      eps_new = cfo_search(qc, Bracket{}, opts.cfo_grid_points);
    if (qc(state.epsilon) > qc(eps_new)) eps_new = state.epsilon;  // keep the incumbent

    const RVector g_new = concentrated_g(step, eps_new);
    const RVector v_new = regressor_mean_adjoint_y(step.basis, eps_new, y);
    const double rho_raw = rho_update_root(g_new.dot(v_new), step.yty, ctx.n_sub);
    const double rho_new = std::clamp(rho_raw, kRhoMin, kRhoMax);

    EmIterationRecord rec;
    rec.q_before = q_before;
    rec.q_after = q_value(step, g_new, eps_new, rho_new);
    rec.map_objective = step.marginal_loglik;
    if (penalized) {
      const double lp = -2.0 * ctx.chan_len * std::log(2.0 * state.tau / state.rho) -
                        state.g.lpNorm<1>() / state.tau;
      rec.map_objective += lp;
    }
    rec.delta_g = (g_new - state.g).norm() / std::max(state.g.norm(), 1e-300);
    rec.delta_eps = std::abs(eps_new - state.epsilon);
    rec.delta_rho = std::abs(rho_new - state.rho) / state.rho;
    rec.epsilon = eps_new;
    rec.rho = rho_new;
    rec.rho_clamped = rho_raw != rho_new;
    trace.iterations.push_back(rec);

    state.g = g_new;
    state.epsilon = eps_new;
    state.rho = rho_new;

    if (rec.delta_g < opts.tol_g && rec.delta_eps < opts.tol_eps && rec.delta_rho < opts.tol_rho) {
      trace.converged = true;
      break;
    }
  }

  EstimateResult result;
  result.h_hat = state.channel();
  result.epsilon_hat = state.epsilon;
  result.sigma_hat = 1.0 / state.rho;
  result.tau_used = penalized ? tau : std::numeric_limits<double>::quiet_NaN();
  result.iterations = trace.count();
  result.converged = trace.converged;
  result.symbol_posterior = posterior_batch(ctx, y, result.h_hat, state.epsilon, state.rho, prior);
  result.trace = std::move(trace);
  return result;
}

}  // namespace detail

/// Unregularized ML-EM baseline: the same loop with the penalty matrix E = 0.
inline EstimateResult ml_em(const ModelContext& ctx, const RVector& y,
                            const EstimatorOptions& opts = {}) {
  return detail::run_em(ctx, y, opts, false, 0.0);
}

/// MAP-EM with the l1 (Laplace) channel prior. When opts.tau is unset, tau is
/// estimated empirical-Bayes style from an unpenalized pilot run on the same
/// observations.
inline EstimateResult map_em(const ModelContext& ctx, const RVector& y,
                             const EstimatorOptions& opts = {}) {
  double tau;
  if (opts.tau) {
    tau = *opts.tau;
    if (!(tau > 0)) throw std::invalid_argument("map_em: tau must be > 0");
  } else {
    const EstimateResult pilot = ml_em(ctx, y, opts);
    tau = tau_empirical_bayes(pilot.h_hat.real_composite(), std::max(pilot.sigma_hat, kRhoMin));
  }
  return detail::run_em(ctx, y, opts, true, tau);
}

inline EstimateResult ml_em(const FrameInstance& frame, const EstimatorOptions& opts = {}) {
  return ml_em(frame.context(), frame.observation(), opts);
}

inline EstimateResult map_em(const FrameInstance& frame, const EstimatorOptions& opts = {}) {
  return map_em(frame.context(), frame.observation(), opts);
}

}  // namespace ofdmem

#endif  // OFDMEM_ESTIMATOR_HPP
