#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cpcser/adam.hpp"
#include "cpcser/audio.hpp"
#include "cpcser/tensor.hpp"
#include "json.hpp"

namespace cpcser {

struct CpcConfig {
  std::vector<std::size_t> strides{5, 4, 4, 2};
  std::vector<std::size_t> filter_sizes{10, 8, 8, 4};
  std::size_t encoder_channels = 128;
  std::size_t latent_dim = 128;  // D_z, width of the last encoder layer
  std::size_t gru_hidden = 256;  // D_c
  std::size_t horizon = 12;      // k prediction heads
  std::size_t negatives = 50;
  double temperature = 1.0;
  /// Scale each waveform to zero mean and unit variance before the encoder.
  bool standardize_waveform = true;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  std::size_t downsampling() const;
  /// Encoder output length for `samples` input samples, 0 if too short.
  std::size_t frames_for(std::size_t samples) const;
  /// Shortest input producing one encoder frame (the receptive field).
  std::size_t min_samples() const;
  /// Last input sample (exclusive) seen by encoder frame `frame`.
  std::size_t receptive_end(std::size_t frame) const;
};

void to_json(nlohmann::json& j, const CpcConfig& c);
void from_json(const nlohmann::json& j, CpcConfig& c);

/// Candidate frames for every (anchor, step) pair of one sequence. For step m
/// (1-based) and anchor t, row `(m-1)*anchors + t` holds `width` frame ids:
/// column 0 is the positive t+m, the rest are distinct negatives drawn
/// uniformly without replacement from all other frames of the sequence.
struct CandidateTable {
  std::size_t length = 0;
  std::size_t anchors = 0;
  std::size_t horizon = 0;
  std::size_t width = 0;
  std::vector<std::size_t> index;

  std::span<const std::size_t> step(std::size_t m) const {
    return std::span<const std::size_t>(index).subspan((m - 1) * anchors * width, anchors * width);
  }
};

/// Throws std::invalid_argument if length <= horizon or length - 1 < negatives.
CandidateTable sample_candidates(std::size_t length, std::size_t horizon, std::size_t negatives,
                                 std::uint64_t seed);

/// Zero mean, unit population variance; a constant input maps to zeros.
std::vector<double> standardize(std::span<const double> samples);

struct LatentSequence {
  Tensor z;  // [L x D_z]
  Tensor c;  // [L x D_c]
};

/// Strided-CNN encoder, GRU autoregressor and per-step affine prediction heads.
class CpcModel {
 public:
  explicit CpcModel(CpcConfig config = {}, std::uint64_t seed = 0);

  const CpcConfig& config() const { return config_; }

  /// Deep copy; the default copy shares parameter storage.
  CpcModel clone() const;

  /// waveform: [n x 1], used as given. Returns z: [L x D_z].
  Tensor encode(const Tensor& waveform) const;
  /// Applies the configured waveform standardization first.
  Tensor encode(std::span<const double> samples) const;

  /// Causal GRU over z from a zero state. Returns c: [L x D_c].
  Tensor aggregate(const Tensor& z) const;

  LatentSequence forward(std::span<const double> samples) const;

  /// Prediction of z_{t+m} from c_t for every anchor row of `context`: [A x D_z].
  Tensor predict(const Tensor& context, std::size_t m) const;

  /// InfoNCE averaged over all anchors t in [0, L-k) and steps m in [1, k].
  Tensor info_nce_loss(const Tensor& z, const Tensor& c, std::uint64_t sampler_seed) const;
  Tensor info_nce_loss(const Tensor& z, const Tensor& c, const CandidateTable& candidates) const;

  /// Frozen forward pass: c as a detached [L x D_c] tensor.
  Tensor extract_features(const AudioClip& clip) const;

  /// Parameter handles named "cpc.*". Handles alias the model's storage.
  std::vector<NamedTensor> parameters() const;
  void set_trainable(bool trainable);

  nlohmann::json checkpoint_config() const;
  void save(const std::filesystem::path& path) const;
  static CpcModel load(const std::filesystem::path& path);

 private:
  struct ConvLayer {
    Tensor weight;  // [filter*C_in x C_out]
    Tensor bias;    // [1 x C_out]
    std::size_t filter = 0;
    std::size_t stride = 0;
  };

  CpcConfig config_;
  std::vector<ConvLayer> conv_;
  // Gate blocks are laid out [reset | update | candidate] along the columns.
  Tensor gru_wx_, gru_bx_, gru_wh_, gru_bh_;
  std::vector<Tensor> head_w_, head_b_;
};

}  // namespace cpcser
