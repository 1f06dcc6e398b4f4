#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpcser {

inline constexpr int kSampleRate = 16000;

/// Mono 16 kHz waveform with samples in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = kSampleRate;
  std::string id;

  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

class WavError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads RIFF/WAVE PCM 16-bit mono or stereo at 16 kHz. Stereo is averaged to
/// mono; samples are scaled by 1/32768.
AudioClip read_wav(const std::filesystem::path& path);
AudioClip parse_wav(const std::vector<unsigned char>& bytes, std::string id = {});

/// Writes a canonical 44-byte-header mono PCM16 file. Samples are clamped to
/// [-1, 32767/32768] and rounded to the nearest code.
void write_wav(const std::filesystem::path& path, const AudioClip& clip);
std::vector<unsigned char> encode_wav(const AudioClip& clip);

/// Cuts or repeat-pads a clip to round(target_seconds * sample_rate) samples.
/// Long clips keep their prefix; short clips are tiled and truncated.
AudioClip fix_length(const AudioClip& clip, double target_seconds);

}  // namespace cpcser
