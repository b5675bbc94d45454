// SPDX-License-Identifier: Apache-2.0
//
// ofdmem -- joint sparse-channel / CFO estimation for OFDM receivers.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0

#ifndef OFDMEM_SIGNAL_HPP
#define OFDMEM_SIGNAL_HPP

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <complex>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace ofdmem {

using Complex = std::complex<double>;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;
using RVector = Eigen::VectorXd;
using RMatrix = Eigen::MatrixXd;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Forward DFT, unnormalized: X[f] = sum_k x[k] exp(-j 2 pi f k / N).
inline CVector dft(const CVector& x) {
  if (x.size() == 0) throw std::invalid_argument("dft: empty input");
  thread_local Eigen::FFT<double> engine;
  std::vector<Complex> in(x.data(), x.data() + x.size()), out;
  engine.fwd(out, in);
  return Eigen::Map<const CVector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

/// Inverse DFT with 1/N normalization, so idft(dft(x)) == x.
inline CVector idft(const CVector& x) {
  if (x.size() == 0) throw std::invalid_argument("idft: empty input");
  thread_local Eigen::FFT<double> engine;
  std::vector<Complex> in(x.data(), x.data() + x.size()), out;
  engine.inv(out, in);
  return Eigen::Map<const CVector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

/// Normalized carrier frequency offset, cycles per full symbol of N_C samples.
struct CfoParam {
  double epsilon = 0.0;

  CfoParam() = default;
  explicit CfoParam(double eps) : epsilon(eps) {
    if (!(std::abs(eps) <= 0.5))
      throw std::invalid_argument("CfoParam: |epsilon| must be <= 1/2");
  }
};

/// Sample shuffling map: apply(x)[k] = x[order[k]].
struct Permutation {
  std::vector<int> order;

  static Permutation identity(int n) {
    Permutation p;
    p.order.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p.order[static_cast<size_t>(i)] = i;
    return p;
  }

  static Permutation random(int n, std::uint64_t seed) {
    Permutation p = identity(n);
    std::mt19937_64 rng(seed);
    std::shuffle(p.order.begin(), p.order.end(), rng);
    return p;
  }

  int size() const { return static_cast<int>(order.size()); }

  bool is_valid() const {
    std::vector<int> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < size(); ++i)
      if (sorted[static_cast<size_t>(i)] != i) return false;
    return true;
  }

  CVector apply(const CVector& x) const {
    if (x.size() != size()) throw std::invalid_argument("Permutation: size mismatch");
    CVector y(x.size());
    for (int k = 0; k < size(); ++k) y[k] = x[order[static_cast<size_t>(k)]];
    return y;
  }

  CVector apply_inverse(const CVector& y) const {
    if (y.size() != size()) throw std::invalid_argument("Permutation: size mismatch");
    CVector x(y.size());
    for (int k = 0; k < size(); ++k) x[order[static_cast<size_t>(k)]] = y[k];
    return x;
  }
};

/// L-tap FIR channel.
struct ChannelImpulseResponse {
  CVector taps;

  ChannelImpulseResponse() = default;
  explicit ChannelImpulseResponse(CVector t) : taps(std::move(t)) {
    if (taps.size() == 0) throw std::invalid_argument("ChannelImpulseResponse: empty taps");
  }

  int length() const { return static_cast<int>(taps.size()); }

  std::vector<int> support(double tol = 0.0) const {
    std::vector<int> s;
    for (int j = 0; j < length(); ++j)
      if (std::abs(taps[j]) > tol) s.push_back(j);
    return s;
  }

  /// Real-composite form [Re h; Im h] of length 2L.
  RVector real_composite() const {
    RVector hb(2 * length());
    hb.head(length()) = taps.real();
    hb.tail(length()) = taps.imag();
    return hb;
  }

  static ChannelImpulseResponse from_real_composite(const RVector& hb) {
    if (hb.size() == 0 || hb.size() % 2 != 0)
      throw std::invalid_argument("from_real_composite: length must be even and positive");
    const int L = static_cast<int>(hb.size()) / 2;
    CVector t(L);
    t.real() = hb.head(L);
    t.imag() = hb.tail(L);
    return ChannelImpulseResponse(std::move(t));
  }
};

/// Dense circulant matrix whose column j is first_col cyclically shifted down by j.
inline CMatrix build_circulant(const CVector& first_col) {
  const int n = static_cast<int>(first_col.size());
  if (n == 0) throw std::invalid_argument("build_circulant: empty first column");
  CMatrix m(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) m(i, j) = first_col[((i - j) % n + n) % n];
  return m;
}

/// Circulant-times-vector, i.e. circular convolution of first_col with x.
/// FFT path for n > 32, direct accumulation otherwise.
inline CVector circulant_multiply(const CVector& first_col, const CVector& x) {
  const int n = static_cast<int>(first_col.size());
  if (n == 0) throw std::invalid_argument("circulant_multiply: empty first column");
  if (x.size() != n) throw std::invalid_argument("circulant_multiply: size mismatch");
  if (n > 32) {
    return idft(dft(first_col).cwiseProduct(dft(x)));
  }
  CVector y = CVector::Zero(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) y[i] += first_col[((i - j) % n + n) % n] * x[j];
  return y;
}

/// Zero-pad channel taps to the first column [h; 0] of the N x N channel matrix.
inline CVector padded_taps(const ChannelImpulseResponse& h, int n) {
  if (h.length() > n)
    throw std::invalid_argument("padded_taps: channel longer than symbol");
  CVector c = CVector::Zero(n);
  c.head(h.length()) = h.taps;
  return c;
}

/// Per-sample phase ramp: out[k] = exp(j 2 pi eps k / N) s[k].
inline CVector apply_cfo(const CfoParam& eps, const CVector& s) {
  const int n = static_cast<int>(s.size());
  if (n == 0) throw std::invalid_argument("apply_cfo: empty input");
  CVector out(n);
  for (int k = 0; k < n; ++k) {
    const double psi = kTwoPi * eps.epsilon * k / n;
    out[k] = Complex(std::cos(psi), std::sin(psi)) * s[k];
  }
  return out;
}

/// r = C_eps * Htilde * P * x + eta, with eta proper complex Gaussian of
/// per-component complex variance sigma^2 (real/imag parts each N(0, sigma^2/2)).
inline CVector simulate_received(const ChannelImpulseResponse& h, const CfoParam& eps,
                                 const Permutation& perm, const CVector& x, double sigma,
                                 std::mt19937_64& rng) {
  const int n = static_cast<int>(x.size());
  if (perm.size() != n) throw std::invalid_argument("simulate_received: permutation size mismatch");
  if (sigma < 0) throw std::invalid_argument("simulate_received: sigma must be >= 0");
  CVector r = apply_cfo(eps, circulant_multiply(padded_taps(h, n), perm.apply(x)));
  if (sigma > 0) {
    std::normal_distribution<double> gauss(0.0, sigma / std::numbers::sqrt2);
    for (int k = 0; k < n; ++k) r[k] += Complex(gauss(rng), gauss(rng));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Real-composite representation
//
// Signal vector layout (global block stacking):  [xR^T ; xR^U ; xI^T ; xI^U].
// Observation layout (per-sample interleaving):  [Re r_0, Im r_0, Re r_1, ...].
// The index maps below bridge the two.
// ---------------------------------------------------------------------------

struct CompositeLayout {
  int n = 0;        // complex samples
  int n_train = 0;  // known samples
  std::vector<uint8_t> mask;       // 1 = training
  std::vector<int> re_col;         // time t -> column of Re x_t in the 2n layout
  std::vector<int> im_col;         // time t -> column of Im x_t
  std::vector<int> unknown_pos;    // time t -> position in the unknown sub-vector, or -1
  std::vector<int> unknown_times;  // inverse of unknown_pos

  int n_unknown() const { return n - n_train; }

  static CompositeLayout build(const std::vector<uint8_t>& mask) {
    CompositeLayout lay;
    lay.n = static_cast<int>(mask.size());
    if (lay.n == 0) throw std::invalid_argument("CompositeLayout: empty mask");
    lay.mask = mask;
    lay.re_col.assign(static_cast<size_t>(lay.n), -1);
    lay.im_col.assign(static_cast<size_t>(lay.n), -1);
    lay.unknown_pos.assign(static_cast<size_t>(lay.n), -1);
    int t_rank = 0, u_rank = 0;
    for (int t = 0; t < lay.n; ++t) {
      if (mask[static_cast<size_t>(t)]) {
        lay.re_col[static_cast<size_t>(t)] = t_rank++;
      } else {
        lay.unknown_pos[static_cast<size_t>(t)] = u_rank;
        lay.unknown_times.push_back(t);
        ++u_rank;
      }
    }
    lay.n_train = t_rank;
    for (int t = 0; t < lay.n; ++t) {
      if (mask[static_cast<size_t>(t)]) {
        lay.im_col[static_cast<size_t>(t)] = lay.n + lay.re_col[static_cast<size_t>(t)];
      } else {
        lay.re_col[static_cast<size_t>(t)] = lay.n_train + lay.unknown_pos[static_cast<size_t>(t)];
        lay.im_col[static_cast<size_t>(t)] =
            lay.n + lay.n_train + lay.unknown_pos[static_cast<size_t>(t)];
      }
    }
    return lay;
  }
};

/// x -> [xR^T; xR^U; xI^T; xI^U].
inline RVector to_real_composite(const CVector& x, const CompositeLayout& lay) {
  if (static_cast<int>(x.size()) != lay.n)
    throw std::invalid_argument("to_real_composite: size mismatch");
  RVector xb(2 * lay.n);
  for (int t = 0; t < lay.n; ++t) {
    xb[lay.re_col[static_cast<size_t>(t)]] = x[t].real();
    xb[lay.im_col[static_cast<size_t>(t)]] = x[t].imag();
  }
  return xb;
}

inline CVector from_real_composite(const RVector& xb, const CompositeLayout& lay) {
  if (static_cast<int>(xb.size()) != 2 * lay.n)
    throw std::invalid_argument("from_real_composite: size mismatch");
  CVector x(lay.n);
  for (int t = 0; t < lay.n; ++t)
    x[t] = Complex(xb[lay.re_col[static_cast<size_t>(t)]], xb[lay.im_col[static_cast<size_t>(t)]]);
  return x;
}

/// Interleave a received vector as [Re r_0, Im r_0, Re r_1, Im r_1, ...].
inline RVector interleave_observation(const CVector& r) {
  RVector y(2 * r.size());
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    y[2 * k] = r[k].real();
    y[2 * k + 1] = r[k].imag();
  }
  return y;
}

inline CVector deinterleave_observation(const RVector& y) {
  if (y.size() % 2 != 0) throw std::invalid_argument("deinterleave_observation: odd length");
  CVector r(y.size() / 2);
  for (Eigen::Index k = 0; k < r.size(); ++k) r[k] = Complex(y[2 * k], y[2 * k + 1]);
  return r;
}

// ---------------------------------------------------------------------------
// Observation-model builders
// ---------------------------------------------------------------------------

/// Everything the receiver knows about one frame: dimensions, permutation,
/// training partition and the training sample values (unknown entries zero).
struct ModelContext {
  int n_sub = 0;
  int chan_len = 0;
  Permutation perm;
  CompositeLayout layout;
  CVector x_known;  // unknown entries zero

  void validate() const {
    if (n_sub <= 0 || chan_len <= 0 || chan_len > n_sub)
      throw std::invalid_argument("ModelContext: need 0 < chan_len <= n_sub");
    if (perm.size() != n_sub || layout.n != n_sub ||
        static_cast<int>(x_known.size()) != n_sub)
      throw std::invalid_argument("ModelContext: inconsistent sizes");
  }
};

/// Channel-linear rows: the 2 x 2N block [a_k, -b_k; b_k, a_k] of sample k,
/// columns in the global composite layout. M xbar stacks to the interleaved
/// noiseless observation.
inline RMatrix channel_observation_rows(int k, const ChannelImpulseResponse& h, double eps,
                                        const ModelContext& ctx) {
  const int n = ctx.n_sub;
  if (k < 0 || k >= n) throw std::out_of_range("channel_observation_rows: k out of range");
  const CVector hp = padded_taps(h, n);
  const double psi = kTwoPi * eps * k / n;
  const double c = std::cos(psi), s = std::sin(psi);
  RMatrix mk = RMatrix::Zero(2, 2 * n);
  // (Htilde P)[k, t] = hp[(k - c) mod n] where perm.order[c] = t.
  for (int col = 0; col < n; ++col) {
    const int t = ctx.perm.order[static_cast<size_t>(col)];
    const Complex hv = hp[((k - col) % n + n) % n];
    const double a = c * hv.real() - s * hv.imag();
    const double b = s * hv.real() + c * hv.imag();
    const int rc = ctx.layout.re_col[static_cast<size_t>(t)];
    const int ic = ctx.layout.im_col[static_cast<size_t>(t)];
    mk(0, rc) += a;
    mk(0, ic) += -b;
    mk(1, rc) += b;
    mk(1, ic) += a;
  }
  return mk;
}

/// Full stacked M (2N x 2N): rows 2k, 2k+1 are channel_observation_rows(k).
inline RMatrix channel_observation_matrix(const ChannelImpulseResponse& h, double eps,
                                          const ModelContext& ctx) {
  const int n = ctx.n_sub;
  const CVector hp = padded_taps(h, n);
  RMatrix m = RMatrix::Zero(2 * n, 2 * n);
  for (int k = 0; k < n; ++k) {
    const double psi = kTwoPi * eps * k / n;
    const double c = std::cos(psi), s = std::sin(psi);
    for (int col = 0; col < n; ++col) {
      const int t = ctx.perm.order[static_cast<size_t>(col)];
      const Complex hv = hp[((k - col) % n + n) % n];
      const double a = c * hv.real() - s * hv.imag();
      const double b = s * hv.real() + c * hv.imag();
      const int rc = ctx.layout.re_col[static_cast<size_t>(t)];
      const int ic = ctx.layout.im_col[static_cast<size_t>(t)];
      m(2 * k, rc) = a;
      m(2 * k, ic) = -b;
      m(2 * k + 1, rc) = b;
      m(2 * k + 1, ic) = a;
    }
  }
  return m;
}

/// Symbol-linear rows: the 2 x 2L block of sample k acting on [Re h; Im h],
/// built from the circulant of P x restricted to the first L columns.
inline RMatrix symbol_observation_rows(int k, const CVector& x, double eps,
                                       const Permutation& perm, int chan_len) {
  const int n = static_cast<int>(x.size());
  if (k < 0 || k >= n) throw std::out_of_range("symbol_observation_rows: k out of range");
  const CVector s_vec = perm.apply(x);
  const double psi = kTwoPi * eps * k / n;
  const double c = std::cos(psi), s = std::sin(psi);
  RMatrix mk(2, 2 * chan_len);
  for (int l = 0; l < chan_len; ++l) {
    const Complex sv = s_vec[((k - l) % n + n) % n];
    const double a = c * sv.real() - s * sv.imag();
    const double b = s * sv.real() + c * sv.imag();
    mk(0, l) = a;
    mk(0, chan_len + l) = -b;
    mk(1, l) = b;
    mk(1, chan_len + l) = a;
  }
  return mk;
}

/// Full stacked script-M (2N x 2L).
inline RMatrix symbol_observation_matrix(const CVector& x, double eps, const Permutation& perm,
                                         int chan_len) {
  const int n = static_cast<int>(x.size());
  const CVector s_vec = perm.apply(x);
  RMatrix m(2 * n, 2 * chan_len);
  for (int k = 0; k < n; ++k) {
    const double psi = kTwoPi * eps * k / n;
    const double c = std::cos(psi), s = std::sin(psi);
    for (int l = 0; l < chan_len; ++l) {
      const Complex sv = s_vec[((k - l) % n + n) % n];
      const double a = c * sv.real() - s * sv.imag();
      const double b = s * sv.real() + c * sv.imag();
      m(2 * k, l) = a;
      m(2 * k, chan_len + l) = -b;
      m(2 * k + 1, l) = b;
      m(2 * k + 1, chan_len + l) = a;
    }
  }
  return m;
}

}  // namespace ofdmem

#endif  // OFDMEM_SIGNAL_HPP
