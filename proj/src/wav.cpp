#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cpcser/audio.hpp"

namespace cpcser {

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace

AudioClip parse_wav(const std::vector<unsigned char>& bytes, std::string id) {
  if (bytes.size() < 12) throw WavError("wav: truncated RIFF header");
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0) throw WavError("wav: missing RIFF chunk id");
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) throw WavError("wav: RIFF form type is not WAVE");

  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string chunk(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    const std::uint32_t size = read_u32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw WavError("wav: truncated '" + chunk + "' chunk");
    if (chunk == "fmt ") {
      if (size < 16) throw WavError("wav: 'fmt ' chunk too short");
      const std::uint16_t format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      if (format != 1) throw WavError("wav: 'fmt ' chunk declares non-PCM encoding " + std::to_string(format));
      if (bits != 16) throw WavError("wav: 'fmt ' chunk declares unsupported bit depth " + std::to_string(bits));
      if (channels != 1 && channels != 2) {
        throw WavError("wav: 'fmt ' chunk declares unsupported channel count " + std::to_string(channels));
      }
      if (rate != static_cast<std::uint32_t>(kSampleRate)) {
        throw WavError("wav: 'fmt ' chunk declares sample rate " + std::to_string(rate) + ", expected 16000");
      }
      have_fmt = true;
    } else if (chunk == "data") {
      if (!have_fmt) throw WavError("wav: 'data' chunk precedes 'fmt ' chunk");
      const std::size_t frame_bytes = 2u * channels;
      if (size % frame_bytes != 0) throw WavError("wav: 'data' chunk size is not a whole number of frames");
      const std::size_t frames = size / frame_bytes;
      if (frames == 0) throw WavError("wav: 'data' chunk is empty");
      AudioClip clip;
      clip.id = std::move(id);
      clip.samples.resize(frames);
      for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const auto code = static_cast<std::int16_t>(read_u16(bytes.data() + body + f * frame_bytes + 2 * c));
          acc += static_cast<double>(code) / 32768.0;
        }
        clip.samples[f] = acc / channels;
      }
      return clip;
    }
    pos = body + size + (size & 1u);
  }
  throw WavError(have_fmt ? "wav: missing 'data' chunk" : "wav: missing 'fmt ' chunk");
}

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavError("wav: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_wav(bytes, path.stem().string());
  } catch (const WavError& e) {
    throw WavError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

std::vector<unsigned char> encode_wav(const AudioClip& clip) {
  if (clip.sample_rate != kSampleRate) throw WavError("wav: refusing to write non-16 kHz clip");
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, kSampleRate);
  put_u32(out, kSampleRate * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);
  for (double s : clip.samples) {
    const double code = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(code)));
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  const auto bytes = encode_wav(clip);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WavError("wav: cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WavError("wav: write failed for " + path.string());
}

}  // namespace cpcser
