#include "cpcser/lfbe.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

namespace cpcser {

namespace {

// FFTW planning is not thread-safe; execution on distinct plans is.
std::mutex g_fftw_planner;

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    in_ = fftw_alloc_real(n);
    out_ = fftw_alloc_complex(n / 2 + 1);
    std::lock_guard lock(g_fftw_planner);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard lock(g_fftw_planner);
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }

  // |X_k|^2 for k = 0..n/2
  void power(std::vector<double>& spectrum) {
    fftw_execute(plan_);
    spectrum.resize(n_ / 2 + 1);
    for (std::size_t k = 0; k < spectrum.size(); ++k) spectrum[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
  }

 private:
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

}  // namespace

double hz_to_mel(double hz) { return 1127.0 * std::log(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::exp(mel / 1127.0) - 1.0); }

std::vector<double> mel_filterbank(const LfbeConfig& config) {
  if (config.num_bins == 0 || config.fft_size < 2) throw std::invalid_argument("lfbe: bad filterbank config");
  if (!(config.low_hz >= 0.0 && config.high_hz > config.low_hz && config.high_hz <= kSampleRate / 2.0)) {
    throw std::invalid_argument("lfbe: mel range must satisfy 0 <= low < high <= 8000 Hz");
  }
  const std::size_t bins = config.fft_size / 2 + 1;
  const double mel_low = hz_to_mel(config.low_hz);
  const double mel_high = hz_to_mel(config.high_hz);
  const double delta = (mel_high - mel_low) / static_cast<double>(config.num_bins + 1);
  std::vector<double> weights(config.num_bins * bins, 0.0);
  for (std::size_t m = 0; m < config.num_bins; ++m) {
    const double left = mel_low + delta * static_cast<double>(m);
    const double center = left + delta;
    const double right = center + delta;
    for (std::size_t k = 0; k < bins; ++k) {
      const double mel = hz_to_mel(static_cast<double>(k) * kSampleRate / static_cast<double>(config.fft_size));
      double w = 0.0;
      if (mel > left && mel < center) {
        w = (mel - left) / delta;
      } else if (mel >= center && mel < right) {
        w = (right - mel) / delta;
      }
      weights[m * bins + k] = w;
    }
  }
  return weights;
}

std::size_t lfbe_frame_count(std::size_t num_samples, const LfbeConfig& config) {
  if (num_samples < config.frame_length) return 0;
  return 1 + (num_samples - config.frame_length) / config.frame_shift;
}

LfbeFrames compute_lfbe(const AudioClip& clip, const LfbeConfig& config) {
  if (clip.sample_rate != kSampleRate) throw std::invalid_argument("lfbe: clip '" + clip.id + "' is not 16 kHz");
  if (config.frame_length == 0 || config.frame_shift == 0 || config.fft_size < config.frame_length) {
    throw std::invalid_argument("lfbe: frame_length/frame_shift/fft_size are inconsistent");
  }
  const std::size_t frames = lfbe_frame_count(clip.samples.size(), config);
  if (frames == 0) {
    throw std::invalid_argument("lfbe: clip '" + clip.id + "' has " + std::to_string(clip.samples.size()) +
                                " samples, shorter than one " + std::to_string(config.frame_length) +
                                "-sample frame");
  }
  const std::size_t bins = config.fft_size / 2 + 1;
  const auto filters = mel_filterbank(config);

  std::vector<double> window(config.frame_length);
  for (std::size_t i = 0; i < window.size(); ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                     static_cast<double>(config.frame_length - 1));
  }

  LfbeFrames result;
  result.frames = frames;
  result.bins = config.num_bins;
  result.values.resize(frames * config.num_bins);
  result.frame_shift_seconds = static_cast<double>(config.frame_shift) / kSampleRate;
  result.frame_length_seconds = static_cast<double>(config.frame_length) / kSampleRate;

  RealFft fft(config.fft_size);
  std::vector<double> frame(config.frame_length);
  std::vector<double> spectrum;
  const double log_floor = std::log(config.energy_floor);
  for (std::size_t t = 0; t < frames; ++t) {
    std::copy_n(clip.samples.begin() + static_cast<std::ptrdiff_t>(t * config.frame_shift), config.frame_length,
                frame.begin());
    for (std::size_t i = config.frame_length; i-- > 1;) frame[i] -= config.preemphasis * frame[i - 1];
    frame[0] -= config.preemphasis * frame[0];
    double* in = fft.input();
    for (std::size_t i = 0; i < config.frame_length; ++i) in[i] = frame[i] * window[i];
    std::fill(in + config.frame_length, in + config.fft_size, 0.0);
    fft.power(spectrum);
    for (std::size_t m = 0; m < config.num_bins; ++m) {
      double energy = 0.0;
      const double* w = filters.data() + m * bins;
      for (std::size_t k = 0; k < bins; ++k) energy += w[k] * spectrum[k];
      result.values[t * config.num_bins + m] = energy > config.energy_floor ? std::log(energy) : log_floor;
    }
  }
  return result;
}

void save_feature_matrix(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                         const std::vector<double>& values) {
  if (values.size() != rows * cols) throw std::invalid_argument("features: value count does not match shape");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("features: cannot create " + path.string());
  for (double v : values) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    unsigned char le[4];
    for (int i = 0; i < 4; ++i) le[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(le), 4);
  }
  nlohmann::json shape = {{"rows", rows}, {"cols", cols}, {"dtype", "float32"}, {"byte_order", "little"},
                          {"layout", "row-major"}};
  std::ofstream side(path.string() + ".json", std::ios::trunc);
  side << shape.dump(2) << '\n';
  if (!out || !side) throw std::runtime_error("features: write failed for " + path.string());
}

std::vector<double> load_feature_matrix(const std::filesystem::path& path, std::size_t& rows, std::size_t& cols) {
  std::ifstream side(path.string() + ".json");
  if (!side) throw std::runtime_error("features: missing shape descriptor for " + path.string());
  const auto shape = nlohmann::json::parse(side);
  rows = shape.at("rows").get<std::size_t>();
  cols = shape.at("cols").get<std::size_t>();
  std::ifstream in(path, std::ios::binary);
  std::vector<double> values(rows * cols);
  for (auto& v : values) {
    unsigned char le[4];
    if (!in.read(reinterpret_cast<char*>(le), 4)) throw std::runtime_error("features: truncated " + path.string());
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(le[i]) << (8 * i);
    v = std::bit_cast<float>(bits);
  }
  return values;
}

}  // namespace cpcser
