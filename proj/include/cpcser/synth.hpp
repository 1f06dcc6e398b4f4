#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cpcser/audio.hpp"

namespace cpcser {

/// Activation, valence, dominance in [-1, 1].
struct EmotionLabels {
  double activation = 0.0;
  double valence = 0.0;
  double dominance = 0.0;

  std::array<double, 3> as_array() const { return {activation, valence, dominance}; }
};

/// Controllable parameters of one synthetic utterance.
struct SignalParams {
  double f0_hz = 150.0;         // harmonic source pitch, [90, 360]
  double rms = 0.1;             // target RMS amplitude, [0.02, 0.4]
  double tilt = 0.0;            // spectral tilt, [-1, 1]; harmonic h has amplitude h^-(1 + tilt)
  double noise_mix = 0.1;       // white-noise share of the source, [0, 0.3]
  double envelope_rate_hz = 4;  // syllabic amplitude-modulation rate, [2, 8]
  double envelope_phase = 0.0;
};

struct SignalRanges {
  double f0_min = 90.0, f0_max = 360.0;
  double rms_min = 0.02, rms_max = 0.4;
  double tilt_min = -1.0, tilt_max = 1.0;
  double noise_min = 0.0, noise_max = 0.3;
  double rate_min = 2.0, rate_max = 8.0;
};

/// Noise-free label model: squashed linear functions of the normalized log f0,
/// spectral tilt, noise share and log envelope rate. RMS level is a nuisance.
EmotionLabels label_model(const SignalParams& params, const SignalRanges& ranges = {});

struct SynthConfig {
  std::size_t count = 64;
  double min_seconds = 2.0;
  double max_seconds = 12.0;
  double label_noise = 0.05;  // std of additive Gaussian label noise before clamping
  /// 1: one population. 2: two families separated by envelope rate ("family0" slow,
  /// "family1" fast), tagged for embedding export.
  std::size_t families = 1;
  /// "holdout" (train/val/test), "folds" (fold0..fold4) or "none" (all train).
  std::string split_scheme = "holdout";
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::string id_prefix = "utt";
  SignalRanges ranges;
};

struct SyntheticUtterance {
  AudioClip clip;
  SignalParams params;
  EmotionLabels labels;
  std::string split;
  std::string tag;
};

/// Renders a waveform for params, deterministic given (params, num_samples, seed).
AudioClip render_signal(const SignalParams& params, std::size_t num_samples, std::uint64_t seed);

/// Deterministic for (config, seed).
std::vector<SyntheticUtterance> synth_corpus(const SynthConfig& config, std::uint64_t seed);

}  // namespace cpcser
