#include "cpcser/synth.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace cpcser {

namespace {

// Maps log(value) from [log lo, log hi] onto [-1, 1].
double log_unit(double value, double lo, double hi) {
  return 2.0 * (std::log(value) - std::log(lo)) / (std::log(hi) - std::log(lo)) - 1.0;
}

double lin_unit(double value, double lo, double hi) { return 2.0 * (value - lo) / (hi - lo) - 1.0; }

double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

}  // namespace

EmotionLabels label_model(const SignalParams& p, const SignalRanges& r) {
  const double pitch = log_unit(p.f0_hz, r.f0_min, r.f0_max);
  const double tilt = lin_unit(p.tilt, r.tilt_min, r.tilt_max);
  const double noise = lin_unit(p.noise_mix, r.noise_min, r.noise_max);
  const double rate = log_unit(p.envelope_rate_hz, r.rate_min, r.rate_max);
  EmotionLabels out;
  out.activation = std::tanh(0.8 * pitch + 0.8 * rate);
  out.valence = std::tanh(0.7 * tilt + 0.9 * rate);
  out.dominance = std::tanh(-0.6 * pitch + 0.5 * noise + 0.7 * rate);
  return out;
}

AudioClip render_signal(const SignalParams& p, std::size_t num_samples, std::uint64_t seed) {
  if (num_samples == 0) throw std::invalid_argument("synth: num_samples must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double sr = kSampleRate;
  const double nyquist_guard = 7600.0;
  const double exponent = 1.0 + p.tilt;
  std::vector<double> source(num_samples, 0.0);
  double harmonic_power = 0.0;
  for (int h = 1; h * p.f0_hz < nyquist_guard; ++h) {
    const double amp = std::pow(static_cast<double>(h), -exponent);
    harmonic_power += 0.5 * amp * amp;
    const double omega = 2.0 * std::numbers::pi * h * p.f0_hz / sr;
    std::complex<double> osc = std::polar(amp, phase_dist(rng));
    const std::complex<double> rot = std::polar(1.0, omega);
    for (std::size_t n = 0; n < num_samples; ++n) {
      source[n] += osc.imag();
      osc *= rot;
    }
  }
  // Mix white noise at the requested share of total source power.
  const double harmonic_scale = std::sqrt((1.0 - p.noise_mix) / harmonic_power);
  const double noise_scale = std::sqrt(p.noise_mix);
  for (auto& s : source) s = harmonic_scale * s + noise_scale * gauss(rng);

  // Syllable-like amplitude envelope.
  const double depth = 0.8;
  const double w_env = 2.0 * std::numbers::pi * p.envelope_rate_hz / sr;
  for (std::size_t n = 0; n < num_samples; ++n) {
    const double env = (1.0 - depth) + depth * 0.5 * (1.0 + std::sin(w_env * static_cast<double>(n) + p.envelope_phase));
    source[n] *= env;
  }

  const double power = std::inner_product(source.begin(), source.end(), source.begin(), 0.0) /
                       static_cast<double>(num_samples);
  const double gain = power > 0.0 ? p.rms / std::sqrt(power) : 0.0;
  AudioClip clip;
  clip.samples.resize(num_samples);
  for (std::size_t n = 0; n < num_samples; ++n) clip.samples[n] = std::clamp(gain * source[n], -1.0, 1.0);
  return clip;
}

std::vector<SyntheticUtterance> synth_corpus(const SynthConfig& config, std::uint64_t seed) {
  if (config.count == 0) throw std::invalid_argument("synth: count must be positive");
  if (!(config.min_seconds > 0.0 && config.max_seconds >= config.min_seconds)) {
    throw std::invalid_argument("synth: need 0 < min_seconds <= max_seconds");
  }
  if (config.families != 1 && config.families != 2) throw std::invalid_argument("synth: families must be 1 or 2");
  const auto& r = config.ranges;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> label_noise(0.0, 1.0);

  std::vector<SyntheticUtterance> corpus;
  corpus.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) {
    SyntheticUtterance u;
    SignalParams& p = u.params;
    p.f0_hz = log_uniform(rng, r.f0_min, r.f0_max);
    p.rms = log_uniform(rng, r.rms_min, r.rms_max);
    p.tilt = r.tilt_min + (r.tilt_max - r.tilt_min) * unit(rng);
    p.noise_mix = r.noise_min + (r.noise_max - r.noise_min) * unit(rng);
    std::size_t family = 0;
    if (config.families == 2) {
      family = i % 2;
      // Two disjoint rate bands at the ends of the range.
      const double split = std::sqrt(r.rate_min * r.rate_max);
      const double lo = family == 0 ? r.rate_min : split * 1.25;
      const double hi = family == 0 ? split / 1.25 : r.rate_max;
      p.envelope_rate_hz = log_uniform(rng, lo, hi);
      u.tag = "family" + std::to_string(family);
    } else {
      p.envelope_rate_hz = log_uniform(rng, r.rate_min, r.rate_max);
    }
    p.envelope_phase = 2.0 * std::numbers::pi * unit(rng);

    const double seconds = config.min_seconds + (config.max_seconds - config.min_seconds) * unit(rng);
    const auto samples = static_cast<std::size_t>(std::llround(seconds * kSampleRate));
    u.clip = render_signal(p, samples, rng());
    char id[64];
    std::snprintf(id, sizeof(id), "%s%05zu", config.id_prefix.c_str(), i);
    u.clip.id = id;

    const EmotionLabels clean = label_model(p, r);
    auto noisy = [&](double v) { return std::clamp(v + config.label_noise * label_noise(rng), -1.0, 1.0); };
    u.labels.activation = noisy(clean.activation);
    u.labels.valence = noisy(clean.valence);
    u.labels.dominance = noisy(clean.dominance);
    corpus.push_back(std::move(u));
  }

  if (config.split_scheme == "none") {
    for (auto& u : corpus) u.split = "train";
  } else if (config.split_scheme == "folds") {
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < order.size(); ++k) corpus[order[k]].split = "fold" + std::to_string(k % 5);
  } else if (config.split_scheme == "holdout") {
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n = corpus.size();
    const auto n_test = static_cast<std::size_t>(std::llround(config.test_fraction * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(config.val_fraction * static_cast<double>(n)));
    for (std::size_t k = 0; k < n; ++k) {
      corpus[order[k]].split = k < n_test ? "test" : (k < n_test + n_val ? "val" : "train");
    }
  } else {
    throw std::invalid_argument("synth: unknown split_scheme '" + config.split_scheme + "'");
  }
  return corpus;
}

}  // namespace cpcser
