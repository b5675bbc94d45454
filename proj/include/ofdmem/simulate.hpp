// SPDX-License-Identifier: Apache-2.0
//
// ofdmem -- joint sparse-channel / CFO estimation for OFDM receivers.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0

#ifndef OFDMEM_SIMULATE_HPP
#define OFDMEM_SIMULATE_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "ofdmem/signal.hpp"

namespace ofdmem {

using json = nlohmann::json;

inline constexpr int kFrameSchemaVersion = 1;

class FrameIoError : public std::runtime_error {
 public:
  explicit FrameIoError(const std::string& what) : std::runtime_error(what) {}
};

enum class Modulation { gaussian, qpsk };

inline std::string to_string(Modulation m) {
  return m == Modulation::gaussian ? "gaussian" : "qpsk";
}

inline Modulation modulation_from_string(const std::string& s) {
  if (s == "gaussian") return Modulation::gaussian;
  if (s == "qpsk") return Modulation::qpsk;
  throw FrameIoError("unknown modulation: " + s);
}

struct ExperimentConfig {
  int n_subcarriers = 64;
  int channel_len = 20;
  int n_nonzero_taps = 6;
  double snr_db = 10.0;
  double epsilon = 0.2537;
  double training_fraction = 0.625;
  Modulation modulation = Modulation::gaussian;
  std::optional<std::uint64_t> permutation_seed;  // nullopt = identity
  std::uint64_t rng_seed = 1;
  int n_trials = 100;
  int training_offset = 0;  // start of the contiguous training block

  int n_training() const {
    return static_cast<int>(std::lround(training_fraction * n_subcarriers));
  }

  void validate() const {
    if (n_subcarriers <= 0) throw std::invalid_argument("config: n_subcarriers must be positive");
    if (n_nonzero_taps <= 0 || n_nonzero_taps > channel_len || channel_len > n_subcarriers)
      throw std::invalid_argument("config: need 0 < n_nonzero_taps <= channel_len <= n_subcarriers");
    if (!(std::abs(epsilon) <= 0.5))
      throw std::invalid_argument("config: |epsilon| must be <= 0.5");
    if (training_fraction < 0.0 || training_fraction > 1.0)
      throw std::invalid_argument("config: training_fraction must be in [0, 1]");
    const double t_exact = training_fraction * n_subcarriers;
    if (std::abs(t_exact - std::lround(t_exact)) > 1e-9)
      throw std::invalid_argument("config: training_fraction * n_subcarriers must be an integer");
    if (n_trials <= 0) throw std::invalid_argument("config: n_trials must be positive");
    if (training_offset < 0 || training_offset >= n_subcarriers)
      throw std::invalid_argument("config: training_offset out of range");
  }

  Permutation permutation() const {
    return permutation_seed ? Permutation::random(n_subcarriers, *permutation_seed)
                            : Permutation::identity(n_subcarriers);
  }
};

struct FrameInstance {
  ExperimentConfig config;
  CVector x;
  std::vector<uint8_t> training_mask;
  ChannelImpulseResponse true_h;
  double true_epsilon = 0.0;
  double sigma = 0.0;
  CVector r;
  std::vector<uint8_t> bits;  // qpsk payload, empty in gaussian mode

  int n_data_symbols() const { return static_cast<int>(bits.size()) / 2; }

  ModelContext context() const {
    ModelContext ctx;
    ctx.n_sub = config.n_subcarriers;
    ctx.chan_len = config.channel_len;
    ctx.perm = config.permutation();
    ctx.layout = CompositeLayout::build(training_mask);
    ctx.x_known = x;
    for (int t = 0; t < ctx.n_sub; ++t)
      if (!training_mask[static_cast<size_t>(t)]) ctx.x_known[t] = Complex(0, 0);
    return ctx;
  }

  RVector observation() const { return interleave_observation(r); }
};

// ---------------------------------------------------------------------------
// RNG streams: per-purpose/per-trial generators split from one master seed.
// ---------------------------------------------------------------------------

inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::mt19937_64 seed_stream(std::uint64_t master, std::uint64_t tag) {
  return std::mt19937_64(mix_seed(mix_seed(master) ^ tag));
}

inline std::mt19937_64 trial_stream(std::uint64_t master, std::uint64_t trial) {
  return seed_stream(master, 0x1000 + trial);
}

// ---------------------------------------------------------------------------

/// Uniform random support of size n_nonzero; nonzero taps i.i.d. proper
/// complex Gaussian; result normalized to ||h|| = 1.
inline ChannelImpulseResponse draw_sparse_channel(int chan_len, int n_nonzero,
                                                  std::mt19937_64& rng) {
  if (n_nonzero <= 0 || n_nonzero > chan_len)
    throw std::invalid_argument("draw_sparse_channel: need 0 < n_nonzero <= chan_len");
  std::vector<int> idx(static_cast<size_t>(chan_len));
  for (int i = 0; i < chan_len; ++i) idx[static_cast<size_t>(i)] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  std::normal_distribution<double> gauss(0.0, 1.0 / std::numbers::sqrt2);
  CVector taps = CVector::Zero(chan_len);
  for (int i = 0; i < n_nonzero; ++i)
    taps[idx[static_cast<size_t>(i)]] = Complex(gauss(rng), gauss(rng));
  taps /= taps.norm();
  return ChannelImpulseResponse(std::move(taps));
}

/// Noise variance for a target SNR: sigma^2 = signal_power / 10^(snr_db/10).
inline double sigma_from_snr(double snr_db, double signal_power) {
  if (!(signal_power > 0)) throw std::invalid_argument("sigma_from_snr: signal_power must be > 0");
  return signal_power / std::pow(10.0, snr_db / 10.0);
}

/// Unit-modulus pseudo-random QPSK sequence used as the training signal,
/// derived from the config seed only (identical across trials).
inline CVector training_sequence(int n, std::uint64_t rng_seed) {
  std::mt19937_64 rng = seed_stream(rng_seed, 0x7261696eULL);
  std::uniform_int_distribution<int> bit(0, 1);
  CVector seq(n);
  for (int k = 0; k < n; ++k) {
    const double re = bit(rng) ? -1.0 : 1.0;
    const double im = bit(rng) ? -1.0 : 1.0;
    seq[k] = Complex(re, im) / std::numbers::sqrt2;
  }
  return seq;
}

inline Complex qpsk_symbol(uint8_t b0, uint8_t b1) {
  return Complex(b0 ? -1.0 : 1.0, b1 ? -1.0 : 1.0) / std::numbers::sqrt2;
}

inline std::pair<uint8_t, uint8_t> qpsk_decide(Complex s) {
  return {static_cast<uint8_t>(s.real() < 0), static_cast<uint8_t>(s.imag() < 0)};
}

/// One reproducible experiment instance. The channel taps in the frame carry
/// sqrt(n_nonzero) times the normalized draw (i.i.d. CN(0,1) nonzero taps),
/// and sigma^2 references unit transmit power.
inline FrameInstance generate_frame(const ExperimentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int n = cfg.n_subcarriers;
  const int n_train = cfg.n_training();
  const int n_unknown = n - n_train;

  FrameInstance frame;
  frame.config = cfg;
  frame.true_epsilon = cfg.epsilon;
  frame.sigma = std::sqrt(sigma_from_snr(cfg.snr_db, 1.0));

  ChannelImpulseResponse h = draw_sparse_channel(cfg.channel_len, cfg.n_nonzero_taps, rng);
  h.taps *= std::sqrt(static_cast<double>(cfg.n_nonzero_taps));
  frame.true_h = h;

  frame.training_mask.assign(static_cast<size_t>(n), 0);
  for (int i = 0; i < n_train; ++i)
    frame.training_mask[static_cast<size_t>((cfg.training_offset + i) % n)] = 1;

  const CVector train_seq = training_sequence(n, cfg.rng_seed);
  frame.x.resize(n);
  for (int t = 0; t < n; ++t)
    if (frame.training_mask[static_cast<size_t>(t)]) frame.x[t] = train_seq[t];

  if (n_unknown > 0) {
    std::vector<int> unknown_times;
    for (int t = 0; t < n; ++t)
      if (!frame.training_mask[static_cast<size_t>(t)]) unknown_times.push_back(t);
    if (cfg.modulation == Modulation::gaussian) {
      std::normal_distribution<double> gauss(0.0, 1.0 / std::numbers::sqrt2);
      for (int t : unknown_times) frame.x[t] = Complex(gauss(rng), gauss(rng));
    } else {
      std::uniform_int_distribution<int> bit(0, 1);
      frame.bits.resize(static_cast<size_t>(2 * n_unknown));
      for (auto& b : frame.bits) b = static_cast<uint8_t>(bit(rng));
      CVector d(n_unknown);
      for (int i = 0; i < n_unknown; ++i)
        d[i] = qpsk_symbol(frame.bits[static_cast<size_t>(2 * i)],
                           frame.bits[static_cast<size_t>(2 * i + 1)]);
      const CVector u = std::sqrt(static_cast<double>(n_unknown)) * idft(d);
      for (int i = 0; i < n_unknown; ++i) frame.x[unknown_times[static_cast<size_t>(i)]] = u[i];
    }
  }

  frame.r = simulate_received(frame.true_h, CfoParam(cfg.epsilon), cfg.permutation(), frame.x,
                              frame.sigma, rng);
  return frame;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["n_subcarriers"] = cfg.n_subcarriers;
  j["channel_len"] = cfg.channel_len;
  j["n_nonzero_taps"] = cfg.n_nonzero_taps;
  j["snr_db"] = cfg.snr_db;
  j["epsilon"] = cfg.epsilon;
  j["training_fraction"] = cfg.training_fraction;
  j["modulation"] = to_string(cfg.modulation);
  if (cfg.permutation_seed)
    j["permutation_seed"] = *cfg.permutation_seed;
  else
    j["permutation_seed"] = "identity";
  j["rng_seed"] = cfg.rng_seed;
  j["n_trials"] = cfg.n_trials;
  j["training_offset"] = cfg.training_offset;
  return j;
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  try {
    cfg.n_subcarriers = j.at("n_subcarriers").get<int>();
    cfg.channel_len = j.at("channel_len").get<int>();
    cfg.n_nonzero_taps = j.at("n_nonzero_taps").get<int>();
    cfg.snr_db = j.at("snr_db").get<double>();
    cfg.epsilon = j.at("epsilon").get<double>();
    cfg.training_fraction = j.at("training_fraction").get<double>();
    cfg.modulation = modulation_from_string(j.at("modulation").get<std::string>());
    const auto& ps = j.at("permutation_seed");
    if (ps.is_string()) {
      if (ps.get<std::string>() != "identity")
        throw FrameIoError("permutation_seed must be an integer or \"identity\"");
      cfg.permutation_seed.reset();
    } else {
      cfg.permutation_seed = ps.get<std::uint64_t>();
    }
    cfg.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    cfg.n_trials = j.at("n_trials").get<int>();
    cfg.training_offset = j.value("training_offset", 0);
  } catch (const json::exception& e) {
    throw FrameIoError(std::string("malformed config: ") + e.what());
  }
  return cfg;
}

namespace detail {

inline json real_array(const auto& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline RVector real_vector(const json& a, const char* field) {
  if (!a.is_array()) throw FrameIoError(std::string("field is not an array: ") + field);
  RVector v(static_cast<Eigen::Index>(a.size()));
  for (size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

}  // namespace detail

inline json frame_to_json(const FrameInstance& frame) {
  json j;
  j["schema_version"] = kFrameSchemaVersion;
  j["config"] = config_to_json(frame.config);
  j["x_re"] = detail::real_array(frame.x.real());
  j["x_im"] = detail::real_array(frame.x.imag());
  j["mask"] = frame.training_mask;
  j["h_re"] = detail::real_array(frame.true_h.taps.real());
  j["h_im"] = detail::real_array(frame.true_h.taps.imag());
  j["epsilon"] = frame.true_epsilon;
  j["sigma"] = frame.sigma;
  j["r_re"] = detail::real_array(frame.r.real());
  j["r_im"] = detail::real_array(frame.r.imag());
  j["bits"] = frame.bits;
  return j;
}

inline FrameInstance frame_from_json(const json& j) {
  if (!j.is_object() || !j.contains("schema_version"))
    throw FrameIoError("not a frame file: missing schema_version");
  const int version = j.at("schema_version").get<int>();
  if (version != kFrameSchemaVersion)
    throw FrameIoError("frame schema version mismatch: file has " + std::to_string(version) +
                       ", expected " + std::to_string(kFrameSchemaVersion));
  FrameInstance frame;
  try {
    frame.config = config_from_json(j.at("config"));
    const RVector xr = detail::real_vector(j.at("x_re"), "x_re");
    const RVector xi = detail::real_vector(j.at("x_im"), "x_im");
    if (xr.size() != xi.size()) throw FrameIoError("x_re / x_im length mismatch");
    frame.x.resize(xr.size());
    frame.x.real() = xr;
    frame.x.imag() = xi;
    frame.training_mask = j.at("mask").get<std::vector<uint8_t>>();
    const RVector hr = detail::real_vector(j.at("h_re"), "h_re");
    const RVector hi = detail::real_vector(j.at("h_im"), "h_im");
    if (hr.size() != hi.size()) throw FrameIoError("h_re / h_im length mismatch");
    CVector taps(hr.size());
    taps.real() = hr;
    taps.imag() = hi;
    frame.true_h = ChannelImpulseResponse(std::move(taps));
    frame.true_epsilon = j.at("epsilon").get<double>();
    frame.sigma = j.at("sigma").get<double>();
    const RVector rr = detail::real_vector(j.at("r_re"), "r_re");
    const RVector ri = detail::real_vector(j.at("r_im"), "r_im");
    if (rr.size() != ri.size()) throw FrameIoError("r_re / r_im length mismatch");
    frame.r.resize(rr.size());
    frame.r.real() = rr;
    frame.r.imag() = ri;
    frame.bits = j.at("bits").get<std::vector<uint8_t>>();
  } catch (const json::exception& e) {
    throw FrameIoError(std::string("malformed frame file: ") + e.what());
  }
  if (static_cast<int>(frame.training_mask.size()) != frame.config.n_subcarriers ||
      static_cast<int>(frame.x.size()) != frame.config.n_subcarriers ||
      static_cast<int>(frame.r.size()) != frame.config.n_subcarriers)
    throw FrameIoError("frame file has inconsistent dimensions");
  return frame;
}

inline void persist_instance(const FrameInstance& frame, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FrameIoError("cannot open for writing: " + path);
  out << frame_to_json(frame).dump(2) << "\n";
  if (!out) throw FrameIoError("write failed: " + path);
}

inline FrameInstance load_instance(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FrameIoError("cannot open: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FrameIoError(std::string("corrupted frame file ") + path + ": " + e.what());
  }
  return frame_from_json(j);
}

}  // namespace ofdmem

#endif  // OFDMEM_SIMULATE_HPP
