#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cpcser/adam.hpp"
#include "cpcser/tensor.hpp"
#include "json.hpp"

namespace cpcser {

struct RecognizerConfig {
  std::size_t input_dim = 256;  // 256 for CPC contexts, 40 for LFBE
  std::size_t heads = 8;
  std::size_t attn_dim = 64;    // D_attn per head
  std::size_t model_dim = 512;  // D_u
  std::size_t dense_hidden = 128;
  std::size_t output_dim = 3;
  double dropout = 0.2;
  std::vector<double> loss_weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  /// Learned linear map input_dim -> model_dim ahead of attention, so attention
  /// input and output widths agree. Without it attention reads raw features.
  bool input_projection = true;

  void validate() const;
  std::size_t attention_input_dim() const { return input_projection ? model_dim : input_dim; }
};

void to_json(nlohmann::json& j, const RecognizerConfig& c);
void from_json(const nlohmann::json& j, RecognizerConfig& c);

struct EmotionPrediction {
  double activation = 0.0;
  double valence = 0.0;
  double dominance = 0.0;
};

struct AttentionHeadWeights {
  Tensor wq, wk, wv;  // each [D_c x D_attn]
};

/// softmax(C Wq (C Wk)^T / sqrt(D_attn)) with the softmax over keys (rows sum to 1).
Tensor attention_weights(const Tensor& c, const Tensor& wq, const Tensor& wk);

/// Scaled dot-product self-attention of one head: [L x D_attn].
Tensor attention_head(const Tensor& c, const Tensor& wq, const Tensor& wk, const Tensor& wv);

/// Concat(H^1..H^n) W_O: [L x D_u].
Tensor multi_head(const Tensor& c, std::span<const AttentionHeadWeights> heads, const Tensor& wo);

/// [mean over time ; population std over time] as a [1 x 2*D_u] row.
Tensor pool_mean_std(const Tensor& u);

/// 1 - sum_i w_i CCC_i with each CCC taken across the batch (rows) per column.
/// Columns where both predictions and labels are constant and equal count as CCC 1.
Tensor ccc_loss(const Tensor& preds, const Tensor& labels, std::span<const double> weights);

class EmotionRecognizer {
 public:
  explicit EmotionRecognizer(RecognizerConfig config = {}, std::uint64_t seed = 0);

  const RecognizerConfig& config() const { return config_; }
  EmotionRecognizer clone() const;

  /// features [L x input_dim] -> [1 x output_dim]. Dropout only when train_mode,
  /// with its mask drawn from `seed`.
  Tensor forward(const Tensor& features, bool train_mode = false, std::uint64_t seed = 0) const;
  /// Stacked forward over utterances -> [B x output_dim]; utterance i uses seed + i.
  Tensor forward_batch(std::span<const Tensor> features, bool train_mode, std::uint64_t seed) const;
  EmotionPrediction predict(const Tensor& features, bool train_mode = false, std::uint64_t seed = 0) const;

  /// Utterance embedding after attention and pooling, [1 x 2*D_u].
  Tensor pooled(const Tensor& features) const;

  std::span<const AttentionHeadWeights> heads() const { return heads_; }
  std::vector<NamedTensor> parameters() const;
  void set_trainable(bool trainable);

 private:
  Tensor project(const Tensor& features) const;

  RecognizerConfig config_;
  Tensor proj_w_, proj_b_;
  std::vector<AttentionHeadWeights> heads_;
  Tensor wo_;
  Tensor dense1_w_, dense1_b_, dense2_w_, dense2_b_, out_w_, out_b_;
};

}  // namespace cpcser
