#include <cmath>

#include "cpcser/audio.hpp"

namespace cpcser {

AudioClip fix_length(const AudioClip& clip, double target_seconds) {
  if (clip.samples.empty()) throw std::invalid_argument("fix_length: empty clip '" + clip.id + "'");
  if (!(target_seconds > 0.0)) throw std::invalid_argument("fix_length: target_seconds must be positive");
  const auto target = static_cast<std::size_t>(std::llround(target_seconds * clip.sample_rate));
  AudioClip out;
  out.id = clip.id;
  out.sample_rate = clip.sample_rate;
  out.samples.reserve(target);
  while (out.samples.size() < target) {
    const std::size_t take = std::min(clip.samples.size(), target - out.samples.size());
    out.samples.insert(out.samples.end(), clip.samples.begin(), clip.samples.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return out;
}

}  // namespace cpcser
