#include "cpcser/recognizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace cpcser {

void RecognizerConfig::validate() const {
  if (input_dim == 0 || heads == 0 || attn_dim == 0 || model_dim == 0 || dense_hidden == 0 || output_dim == 0) {
    throw std::invalid_argument("recognizer config: widths must be positive");
  }
  if (heads * attn_dim != model_dim) {
    throw std::invalid_argument("recognizer config: heads x attn_dim (" + std::to_string(heads * attn_dim) +
                                ") must equal model_dim (" + std::to_string(model_dim) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("recognizer config: dropout must be in [0, 1)");
  if (loss_weights.size() != output_dim) {
    throw std::invalid_argument("recognizer config: need one loss weight per output");
  }
  const double total = std::accumulate(loss_weights.begin(), loss_weights.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("recognizer config: loss weights must sum to 1");
}

void to_json(nlohmann::json& j, const RecognizerConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim},
                     {"heads", c.heads},
                     {"attn_dim", c.attn_dim},
                     {"model_dim", c.model_dim},
                     {"dense_hidden", c.dense_hidden},
                     {"output_dim", c.output_dim},
                     {"dropout", c.dropout},
                     {"loss_weights", c.loss_weights},
                     {"input_projection", c.input_projection}};
}

void from_json(const nlohmann::json& j, RecognizerConfig& c) {
  static const char* known[] = {"input_dim",    "heads",      "attn_dim",     "model_dim",       "dense_hidden",
                                "output_dim",   "dropout",    "loss_weights", "input_projection"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("recognizer config: unknown key '" + key + "'");
    }
  }
  RecognizerConfig d;
  c.input_dim = j.value("input_dim", d.input_dim);
  c.heads = j.value("heads", d.heads);
  c.attn_dim = j.value("attn_dim", d.attn_dim);
  c.model_dim = j.value("model_dim", d.model_dim);
  c.dense_hidden = j.value("dense_hidden", d.dense_hidden);
  c.output_dim = j.value("output_dim", d.output_dim);
  c.dropout = j.value("dropout", d.dropout);
  c.loss_weights = j.value("loss_weights", d.loss_weights);
  c.input_projection = j.value("input_projection", d.input_projection);
}

Tensor attention_weights(const Tensor& c, const Tensor& wq, const Tensor& wk) {
  if (wq.shape() != wk.shape()) {
    throw ShapeError("attention: W_Q " + to_string(wq.shape()) + " and W_K " + to_string(wk.shape()) + " differ");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(wq.size(1)));
  const Tensor q = matmul(c, wq);
  const Tensor k = matmul(c, wk);
  return softmax(scale(matmul(q, transpose(k)), inv_sqrt_d), 1);
}

Tensor attention_head(const Tensor& c, const Tensor& wq, const Tensor& wk, const Tensor& wv) {
  if (wv.shape() != wq.shape()) {
    throw ShapeError("attention: W_V " + to_string(wv.shape()) + " does not match W_Q " + to_string(wq.shape()));
  }
  return matmul(attention_weights(c, wq, wk), matmul(c, wv));
}

Tensor multi_head(const Tensor& c, std::span<const AttentionHeadWeights> heads, const Tensor& wo) {
  if (heads.empty()) throw ShapeError("multi_head: no heads");
  std::vector<Tensor> outputs;
  outputs.reserve(heads.size());
  for (const auto& h : heads) outputs.push_back(attention_head(c, h.wq, h.wk, h.wv));
  return matmul(concat(outputs, 1), wo);
}

Tensor pool_mean_std(const Tensor& u) {
  if (u.rank() != 2) throw ShapeError("pool_mean_std: expected [L x D], got " + to_string(u.shape()));
  return concat({mean(u, 0), sqrt(variance(u, 0))}, 1);
}

Tensor ccc_loss(const Tensor& preds, const Tensor& labels, std::span<const double> weights) {
  if (preds.rank() != 2 || preds.shape() != labels.shape()) {
    throw ShapeError("ccc_loss: predictions " + to_string(preds.shape()) + " and labels " +
                     to_string(labels.shape()) + " must be matching [B x D] matrices");
  }
  if (preds.size(0) < 2) throw std::invalid_argument("ccc_loss: batch of " + std::to_string(preds.size(0)) +
                                                     " rows; CCC needs at least 2");
  if (weights.size() != preds.size(1)) throw ShapeError("ccc_loss: need one weight per column");

  const Tensor mean_p = mean(preds, 0);
  const Tensor mean_y = mean(labels, 0);
  const Tensor dp = preds - mean_p;
  const Tensor dy = labels - mean_y;
  const Tensor cov = mean(dp * dy, 0);
  const Tensor denom = mean(dp * dp, 0) + mean(dy * dy, 0) + square(mean_p - mean_y);

  // A zero denominator means both columns are the same constant: concordance 1.
  std::vector<double> degenerate(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) degenerate[i] = denom.data()[i] == 0.0 ? 1.0 : 0.0;
  const Tensor fix = Tensor::from_data({1, weights.size()}, degenerate);
  const Tensor ccc = (scale(cov, 2.0) + fix) / (denom + fix);
  const Tensor w = Tensor::from_data({1, weights.size()}, std::vector<double>(weights.begin(), weights.end()));
  return add_scalar(neg(sum(ccc * w)), 1.0);
}

namespace {

Tensor uniform_param(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

Tensor dropout(const Tensor& x, double p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(x.numel());
  const double scale_kept = 1.0 / (1.0 - p);
  for (auto& m : mask) m = keep(rng) ? scale_kept : 0.0;
  return x * Tensor::from_data(x.shape(), std::move(mask));
}

}  // namespace

EmotionRecognizer::EmotionRecognizer(RecognizerConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  if (config_.input_projection) {
    proj_w_ = uniform_param({config_.input_dim, config_.model_dim}, config_.input_dim, rng);
    proj_b_ = uniform_param({1, config_.model_dim}, config_.input_dim, rng);
  }
  const std::size_t d_in = config_.attention_input_dim();
  for (std::size_t j = 0; j < config_.heads; ++j) {
    AttentionHeadWeights h;
    h.wq = uniform_param({d_in, config_.attn_dim}, d_in, rng);
    h.wk = uniform_param({d_in, config_.attn_dim}, d_in, rng);
    h.wv = uniform_param({d_in, config_.attn_dim}, d_in, rng);
    heads_.push_back(std::move(h));
  }
  const std::size_t concat_dim = config_.heads * config_.attn_dim;
  wo_ = uniform_param({concat_dim, config_.model_dim}, concat_dim, rng);
  const std::size_t pooled_dim = 2 * config_.model_dim;
  dense1_w_ = uniform_param({pooled_dim, config_.dense_hidden}, pooled_dim, rng);
  dense1_b_ = uniform_param({1, config_.dense_hidden}, pooled_dim, rng);
  dense2_w_ = uniform_param({config_.dense_hidden, config_.dense_hidden}, config_.dense_hidden, rng);
  dense2_b_ = uniform_param({1, config_.dense_hidden}, config_.dense_hidden, rng);
  out_w_ = uniform_param({config_.dense_hidden, config_.output_dim}, config_.dense_hidden, rng);
  out_b_ = uniform_param({1, config_.output_dim}, config_.dense_hidden, rng);
}

EmotionRecognizer EmotionRecognizer::clone() const {
  EmotionRecognizer copy(config_);
  const auto src = parameters();
  const auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    Tensor target = dst[i].tensor;
    std::ranges::copy(src[i].tensor.data(), target.mutable_data().begin());
    target.set_requires_grad(src[i].tensor.requires_grad());
  }
  return copy;
}

Tensor EmotionRecognizer::project(const Tensor& features) const {
  if (features.rank() != 2 || features.size(1) != config_.input_dim) {
    throw ShapeError("recognizer: features must be [L x " + std::to_string(config_.input_dim) + "], got " +
                     to_string(features.shape()));
  }
  return config_.input_projection ? matmul(features, proj_w_) + proj_b_ : features;
}

Tensor EmotionRecognizer::pooled(const Tensor& features) const {
  return pool_mean_std(multi_head(project(features), heads_, wo_));
}

Tensor EmotionRecognizer::forward(const Tensor& features, bool train_mode, std::uint64_t seed) const {
  Tensor h = relu(matmul(pooled(features), dense1_w_) + dense1_b_);
  h = relu(matmul(h, dense2_w_) + dense2_b_);
  if (train_mode && config_.dropout > 0.0) h = dropout(h, config_.dropout, seed);
  return matmul(h, out_w_) + out_b_;
}

Tensor EmotionRecognizer::forward_batch(std::span<const Tensor> features, bool train_mode, std::uint64_t seed) const {
  std::vector<Tensor> rows;
  rows.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) rows.push_back(forward(features[i], train_mode, seed + i));
  return concat(rows, 0);
}

EmotionPrediction EmotionRecognizer::predict(const Tensor& features, bool train_mode, std::uint64_t seed) const {
  if (config_.output_dim != 3) throw std::logic_error("recognizer: predict() needs a 3-output model");
  NoGradGuard no_grad;
  const Tensor out = forward(features, train_mode, seed);
  return {out.data()[0], out.data()[1], out.data()[2]};
}

std::vector<NamedTensor> EmotionRecognizer::parameters() const {
  std::vector<NamedTensor> params;
  if (config_.input_projection) {
    params.push_back({"recognizer.input_projection.weight", proj_w_});
    params.push_back({"recognizer.input_projection.bias", proj_b_});
  }
  for (std::size_t j = 0; j < heads_.size(); ++j) {
    const std::string prefix = "recognizer.attention.head" + std::to_string(j) + ".";
    params.push_back({prefix + "query", heads_[j].wq});
    params.push_back({prefix + "key", heads_[j].wk});
    params.push_back({prefix + "value", heads_[j].wv});
  }
  params.push_back({"recognizer.attention.output", wo_});
  params.push_back({"recognizer.dense1.weight", dense1_w_});
  params.push_back({"recognizer.dense1.bias", dense1_b_});
  params.push_back({"recognizer.dense2.weight", dense2_w_});
  params.push_back({"recognizer.dense2.bias", dense2_b_});
  params.push_back({"recognizer.output.weight", out_w_});
  params.push_back({"recognizer.output.bias", out_b_});
  return params;
}

void EmotionRecognizer::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
}

}  // namespace cpcser
