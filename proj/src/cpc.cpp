#include "cpcser/cpc.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "cpcser/checkpoint.hpp"

namespace cpcser {

void CpcConfig::validate() const {
  if (strides.size() != 4 || filter_sizes.size() != 4) {
    throw std::invalid_argument("cpc config: strides and filter_sizes must each list 4 layers");
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (strides[i] == 0 || filter_sizes[i] == 0) throw std::invalid_argument("cpc config: zero stride or filter");
  }
  if (encoder_channels == 0 || latent_dim == 0 || gru_hidden == 0) {
    throw std::invalid_argument("cpc config: layer widths must be positive");
  }
  if (horizon < 1) throw std::invalid_argument("cpc config: horizon must be >= 1");
  if (negatives < 1) throw std::invalid_argument("cpc config: negatives must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("cpc config: temperature must be > 0");
}

std::size_t CpcConfig::downsampling() const {
  std::size_t d = 1;
  for (auto s : strides) d *= s;
  return d;
}

std::size_t CpcConfig::frames_for(std::size_t samples) const {
  std::size_t len = samples;
  for (std::size_t i = 0; i < strides.size(); ++i) {
    if (len < filter_sizes[i]) return 0;
    len = (len - filter_sizes[i]) / strides[i] + 1;
  }
  return len;
}

std::size_t CpcConfig::min_samples() const {
  std::size_t need = 1;
  for (std::size_t i = strides.size(); i-- > 0;) need = (need - 1) * strides[i] + filter_sizes[i];
  return need;
}

std::size_t CpcConfig::receptive_end(std::size_t frame) const { return frame * downsampling() + min_samples(); }

void to_json(nlohmann::json& j, const CpcConfig& c) {
  j = nlohmann::json{{"strides", c.strides},
                     {"filter_sizes", c.filter_sizes},
                     {"encoder_channels", c.encoder_channels},
                     {"latent_dim", c.latent_dim},
                     {"gru_hidden", c.gru_hidden},
                     {"horizon", c.horizon},
                     {"negatives", c.negatives},
                     {"temperature", c.temperature},
                     {"standardize_waveform", c.standardize_waveform}};
}

void from_json(const nlohmann::json& j, CpcConfig& c) {
  static const char* known[] = {"strides",    "filter_sizes", "encoder_channels", "latent_dim",
                                "gru_hidden", "horizon",      "negatives",        "temperature",
                                "standardize_waveform"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("cpc config: unknown key '" + key + "'");
    }
  }
  CpcConfig d;
  c.strides = j.value("strides", d.strides);
  c.filter_sizes = j.value("filter_sizes", d.filter_sizes);
  c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.gru_hidden = j.value("gru_hidden", d.gru_hidden);
  c.horizon = j.value("horizon", d.horizon);
  c.negatives = j.value("negatives", d.negatives);
  c.temperature = j.value("temperature", d.temperature);
  c.standardize_waveform = j.value("standardize_waveform", d.standardize_waveform);
}

std::vector<double> standardize(std::span<const double> samples) {
  std::vector<double> x(samples.begin(), samples.end());
  if (x.empty()) return x;
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  const double sd = std::sqrt(var / n);
  for (double& v : x) v = sd > 0.0 ? (v - mu) / sd : 0.0;
  return x;
}

CandidateTable sample_candidates(std::size_t length, std::size_t horizon, std::size_t negatives,
                                 std::uint64_t seed) {
  if (length <= horizon) {
    throw std::invalid_argument("info_nce: sequence of " + std::to_string(length) +
                                " frames is too short for horizon " + std::to_string(horizon));
  }
  if (length - 1 < negatives) {
    throw std::invalid_argument("info_nce: " + std::to_string(length) + " frames cannot supply " +
                                std::to_string(negatives) + " distinct negatives (need at least " +
                                std::to_string(negatives + 1) + ")");
  }
  CandidateTable table;
  table.length = length;
  table.anchors = length - horizon;
  table.horizon = horizon;
  table.width = negatives + 1;
  table.index.resize(horizon * table.anchors * table.width);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> draw(0, length - 2);
  std::size_t* out = table.index.data();
  for (std::size_t m = 1; m <= horizon; ++m) {
    for (std::size_t t = 0; t < table.anchors; ++t, out += table.width) {
      const std::size_t positive = t + m;
      out[0] = positive;
      std::size_t filled = 1;
      while (filled < table.width) {
        std::size_t pick = draw(rng);
        if (pick >= positive) ++pick;  // skip the positive without biasing the rest
        bool dup = false;
        for (std::size_t j = 1; j < filled && !dup; ++j) dup = out[j] == pick;
        if (!dup) out[filled++] = pick;
      }
    }
  }
  return table;
}

namespace {

Tensor uniform_param(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

CpcModel::CpcModel(CpcConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::size_t c_in = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t c_out = i == 3 ? config_.latent_dim : config_.encoder_channels;
    const std::size_t fan_in = config_.filter_sizes[i] * c_in;
    ConvLayer layer;
    layer.filter = config_.filter_sizes[i];
    layer.stride = config_.strides[i];
    // He-uniform so activations keep their scale through the ReLU stack.
    layer.weight = uniform_param({fan_in, c_out}, fan_in, rng, std::sqrt(6.0));
    layer.bias = Tensor::zeros({1, c_out}, true);
    conv_.push_back(std::move(layer));
    c_in = c_out;
  }
  const std::size_t h = config_.gru_hidden, dz = config_.latent_dim;
  gru_wx_ = uniform_param({dz, 3 * h}, dz, rng);
  gru_bx_ = uniform_param({1, 3 * h}, h, rng);
  gru_wh_ = uniform_param({h, 3 * h}, h, rng);
  gru_bh_ = uniform_param({1, 3 * h}, h, rng);
  for (std::size_t m = 0; m < config_.horizon; ++m) {
    head_w_.push_back(uniform_param({h, dz}, h, rng));
    head_b_.push_back(uniform_param({1, dz}, h, rng));
  }
}

CpcModel CpcModel::clone() const {
  CpcModel copy(config_);
  const auto src = parameters();
  const auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    Tensor target = dst[i].tensor;
    std::ranges::copy(src[i].tensor.data(), target.mutable_data().begin());
    target.set_requires_grad(src[i].tensor.requires_grad());
  }
  return copy;
}

Tensor CpcModel::encode(const Tensor& waveform) const {
  const auto& s = waveform.shape();
  if (s.size() != 2 || s[1] != 1) throw ShapeError("cpc encode: waveform must be [n x 1], got " + to_string(s));
  if (s[0] < config_.min_samples()) {
    throw std::invalid_argument("cpc encode: " + std::to_string(s[0]) + " samples is below the encoder minimum of " +
                                std::to_string(config_.min_samples()));
  }
  Tensor h = waveform;
  for (const auto& layer : conv_) h = relu(conv1d(h, layer.weight, layer.filter, layer.stride) + layer.bias);
  return h;
}

Tensor CpcModel::encode(std::span<const double> samples) const {
  if (samples.empty()) throw std::invalid_argument("cpc encode: empty waveform");
  std::vector<double> x = config_.standardize_waveform ? standardize(samples)
                                                      : std::vector<double>(samples.begin(), samples.end());
  const std::size_t n = x.size();
  return encode(Tensor::from_data({n, 1}, std::move(x)));
}

Tensor CpcModel::aggregate(const Tensor& z) const {
  const auto& s = z.shape();
  if (s.size() != 2 || s[1] != config_.latent_dim) {
    throw ShapeError("cpc aggregate: z must be [L x " + std::to_string(config_.latent_dim) + "], got " + to_string(s));
  }
  const std::size_t len = s[0], hd = config_.gru_hidden;
  // Input projections for every step in one GEMM.
  const Tensor xg = matmul(z, gru_wx_) + gru_bx_;
  Tensor h = Tensor::zeros({1, hd});
  std::vector<Tensor> states;
  states.reserve(len);
  for (std::size_t t = 0; t < len; ++t) {
    const Tensor x_t = slice(xg, 0, t, t + 1);
    const Tensor h_t = matmul(h, gru_wh_) + gru_bh_;
    const Tensor reset = sigmoid(slice(x_t, 1, 0, hd) + slice(h_t, 1, 0, hd));
    const Tensor update = sigmoid(slice(x_t, 1, hd, 2 * hd) + slice(h_t, 1, hd, 2 * hd));
    const Tensor cand = tanh(slice(x_t, 1, 2 * hd, 3 * hd) + reset * slice(h_t, 1, 2 * hd, 3 * hd));
    h = cand + update * (h - cand);  // (1 - u) * n + u * h
    states.push_back(h);
  }
  return concat(states, 0);
}

LatentSequence CpcModel::forward(std::span<const double> samples) const {
  LatentSequence out;
  out.z = encode(samples);
  out.c = aggregate(out.z);
  return out;
}

Tensor CpcModel::predict(const Tensor& context, std::size_t m) const {
  if (m < 1 || m > config_.horizon) throw std::invalid_argument("cpc predict: step out of range");
  return matmul(context, head_w_[m - 1]) + head_b_[m - 1];
}

Tensor CpcModel::info_nce_loss(const Tensor& z, const Tensor& c, std::uint64_t sampler_seed) const {
  if (z.rank() != 2 || c.rank() != 2 || z.size(0) != c.size(0)) {
    throw ShapeError("info_nce: z " + to_string(z.shape()) + " and c " + to_string(c.shape()) +
                     " must share their leading length");
  }
  return info_nce_loss(z, c, sample_candidates(z.size(0), config_.horizon, config_.negatives, sampler_seed));
}

Tensor CpcModel::info_nce_loss(const Tensor& z, const Tensor& c, const CandidateTable& candidates) const {
  const std::size_t len = z.size(0);
  if (c.size(0) != len || candidates.length != len || candidates.horizon != config_.horizon ||
      candidates.width != config_.negatives + 1) {
    throw ShapeError("info_nce: candidate table does not match sequence length " + std::to_string(len));
  }
  const std::size_t anchors = candidates.anchors;
  const Tensor context = slice(c, 0, 0, anchors);
  std::vector<Tensor> terms;
  terms.reserve(config_.horizon);
  for (std::size_t m = 1; m <= config_.horizon; ++m) {
    const Tensor logits = scale(gather_dot(predict(context, m), z, candidates.step(m), candidates.width),
                                1.0 / config_.temperature);
    terms.push_back(sum(slice(log_softmax(logits, 1), 1, 0, 1)));
  }
  return scale(sum(concat(terms, 0)), -1.0 / static_cast<double>(anchors * config_.horizon));
}

Tensor CpcModel::extract_features(const AudioClip& clip) const {
  NoGradGuard no_grad;
  return forward(clip.samples).c.detach();
}

std::vector<NamedTensor> CpcModel::parameters() const {
  std::vector<NamedTensor> params;
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    params.push_back({"cpc.encoder." + std::to_string(i) + ".weight", conv_[i].weight});
    params.push_back({"cpc.encoder." + std::to_string(i) + ".bias", conv_[i].bias});
  }
  params.push_back({"cpc.gru.input_weight", gru_wx_});
  params.push_back({"cpc.gru.input_bias", gru_bx_});
  params.push_back({"cpc.gru.hidden_weight", gru_wh_});
  params.push_back({"cpc.gru.hidden_bias", gru_bh_});
  for (std::size_t m = 0; m < head_w_.size(); ++m) {
    params.push_back({"cpc.head." + std::to_string(m + 1) + ".weight", head_w_[m]});
    params.push_back({"cpc.head." + std::to_string(m + 1) + ".bias", head_b_[m]});
  }
  return params;
}

void CpcModel::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
}

nlohmann::json CpcModel::checkpoint_config() const { return {{"kind", "cpc"}, {"cpc", config_}}; }

void CpcModel::save(const std::filesystem::path& path) const {
  const auto params = parameters();
  save_checkpoint(path, checkpoint_config(), params);
}

CpcModel CpcModel::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.config.contains("cpc")) throw CheckpointError("checkpoint: " + path.string() + " holds no CPC model");
  CpcModel model(ckpt.config.at("cpc").get<CpcConfig>());
  restore_parameters(ckpt, model.parameters());
  return model;
}

}  // namespace cpcser
