#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "cpcser/audio.hpp"

namespace cpcser {

/// Framing and filterbank parameters for log mel filterbank energies.
struct LfbeConfig {
  std::size_t frame_length = 400;  // 25 ms
  std::size_t frame_shift = 160;   // 10 ms
  std::size_t fft_size = 512;
  std::size_t num_bins = 40;
  double preemphasis = 0.97;
  double low_hz = 0.0;
  double high_hz = 8000.0;
  double energy_floor = 1e-10;
};

/// Row-major [frames x num_bins] matrix of log filterbank energies.
struct LfbeFrames {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> values;
  double frame_shift_seconds = 0.0;
  double frame_length_seconds = 0.0;

  double at(std::size_t t, std::size_t b) const { return values[t * bins + b]; }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular mel filters evaluated on the fft_size/2+1 spectrum bins, row-major
/// [num_bins x (fft_size/2 + 1)].
std::vector<double> mel_filterbank(const LfbeConfig& config);

std::size_t lfbe_frame_count(std::size_t num_samples, const LfbeConfig& config);

/// Throws std::invalid_argument if the clip is shorter than one frame or not 16 kHz.
LfbeFrames compute_lfbe(const AudioClip& clip, const LfbeConfig& config = {});

/// Writes values as little-endian float32, row-major, plus `<path>.json` with the shape.
void save_feature_matrix(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                         const std::vector<double>& values);
/// Reads a matrix written by save_feature_matrix; values are widened from float32.
std::vector<double> load_feature_matrix(const std::filesystem::path& path, std::size_t& rows, std::size_t& cols);

}  // namespace cpcser
