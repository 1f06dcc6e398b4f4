#include "cpcser/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cpcser/checkpoint.hpp"
#include "cpcser/log.hpp"

namespace cpcser {

namespace fs = std::filesystem;

// ---- setups and config ------------------------------------------------------

std::string setup_name(Setup s) {
  switch (s) {
    case Setup::Sup: return "Sup";
    case Setup::JointCpc: return "jointCPC";
    case Setup::MiniCpc: return "miniCPC";
    case Setup::PreCpc: return "preCPC";
  }
  return "?";
}

Setup parse_setup(const std::string& name) {
  std::string lower;
  for (char ch : name) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  if (lower == "sup") return Setup::Sup;
  if (lower == "jointcpc") return Setup::JointCpc;
  if (lower == "minicpc") return Setup::MiniCpc;
  if (lower == "precpc") return Setup::PreCpc;
  throw std::invalid_argument("unknown setup '" + name + "' (expected Sup, jointCPC, miniCPC or preCPC)");
}

namespace {

RecognizerConfig recognizer_for(const ExperimentConfig& c) {
  RecognizerConfig r = c.recognizer;
  r.input_dim = c.setup == Setup::Sup ? c.lfbe.num_bins : c.cpc.gru_hidden;
  return r;
}

CpcConfig cpc_for(const ExperimentConfig& c) {
  CpcConfig cfg = c.cpc;
  cfg.standardize_waveform = c.standardize_waveform;
  return cfg;
}

void lfbe_to_json(nlohmann::json& j, const LfbeConfig& c) {
  j = nlohmann::json{{"frame_length", c.frame_length}, {"frame_shift", c.frame_shift}, {"fft_size", c.fft_size},
                     {"num_bins", c.num_bins},         {"preemphasis", c.preemphasis}, {"low_hz", c.low_hz},
                     {"high_hz", c.high_hz},           {"energy_floor", c.energy_floor}};
}

LfbeConfig lfbe_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"frame_length", "frame_shift", "fft_size", "num_bins",
                                           "preemphasis",  "low_hz",      "high_hz",  "energy_floor"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("lfbe config: unknown key '" + key + "'");
  }
  LfbeConfig d, c;
  c.frame_length = j.value("frame_length", d.frame_length);
  c.frame_shift = j.value("frame_shift", d.frame_shift);
  c.fft_size = j.value("fft_size", d.fft_size);
  c.num_bins = j.value("num_bins", d.num_bins);
  c.preemphasis = j.value("preemphasis", d.preemphasis);
  c.low_hz = j.value("low_hz", d.low_hz);
  c.high_hz = j.value("high_hz", d.high_hz);
  c.energy_floor = j.value("energy_floor", d.energy_floor);
  return c;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be > 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("config: weight_decay must be >= 0");
  if (batch_size < 2) throw std::invalid_argument("config: batch_size must be >= 2 (CCC needs two rows)");
  if (cv_folds == 1) throw std::invalid_argument("config: cv_folds must be 0 (fixed split) or >= 2");
  if (repeats != seeds.size()) {
    throw std::invalid_argument("config: repeats (" + std::to_string(repeats) + ") must equal the number of seeds (" +
                                std::to_string(seeds.size()) + ")");
  }
  if (repeats == 0) throw std::invalid_argument("config: at least one repeat is required");
  if (!(target_seconds > 0.0)) throw std::invalid_argument("config: target_seconds must be > 0");
  if (pretrain_steps == 0 || pretrain_batch_size == 0) {
    throw std::invalid_argument("config: pretrain_steps and pretrain_batch_size must be positive");
  }
  if (!(pretrain_lr > 0.0)) throw std::invalid_argument("config: pretrain_lr must be > 0");
  if (!(joint_lambda >= 0.0)) throw std::invalid_argument("config: joint_lambda must be >= 0");
  if (lfbe_normalization != "global" && lfbe_normalization != "none") {
    throw std::invalid_argument("config: lfbe_normalization must be \"global\" or \"none\"");
  }
  if (ccc_mode != "per_fold" && ccc_mode != "pooled") {
    throw std::invalid_argument("config: ccc_mode must be \"per_fold\" or \"pooled\"");
  }
  if (setup == Setup::Sup && (!pretrain_corpus.empty() || !cpc_checkpoint.empty())) {
    throw std::invalid_argument("config: Sup takes no pretrain_corpus or cpc_checkpoint");
  }
  if (setup == Setup::PreCpc && pretrain_corpus.empty() && cpc_checkpoint.empty()) {
    throw std::invalid_argument("config: preCPC requires pretrain_corpus (or a stage-1 cpc_checkpoint)");
  }
  if (setup == Setup::JointCpc && !cpc_checkpoint.empty()) {
    throw std::invalid_argument("config: jointCPC trains from scratch and takes no cpc_checkpoint");
  }
  cpc.validate();
  recognizer_for(*this).validate();
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json lfbe;
  lfbe_to_json(lfbe, c.lfbe);
  j = nlohmann::json{{"setup", setup_name(c.setup)},
                     {"label_corpus", c.label_corpus},
                     {"pretrain_corpus", c.pretrain_corpus},
                     {"cpc_checkpoint", c.cpc_checkpoint},
                     {"epochs", c.epochs},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"cv_folds", c.cv_folds},
                     {"repeats", c.repeats},
                     {"seeds", c.seeds},
                     {"target_seconds", c.target_seconds},
                     {"standardize_waveform", c.standardize_waveform},
                     {"pretrain_steps", c.pretrain_steps},
                     {"pretrain_batch_size", c.pretrain_batch_size},
                     {"pretrain_lr", c.pretrain_lr},
                     {"joint_lambda", c.joint_lambda},
                     {"finetune_cpc", c.finetune_cpc},
                     {"lfbe_normalization", c.lfbe_normalization},
                     {"ccc_mode", c.ccc_mode},
                     {"cpc", c.cpc},
                     {"recognizer", c.recognizer},
                     {"lfbe", lfbe}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const std::set<std::string> known{
      "setup",          "label_corpus",  "pretrain_corpus",     "cpc_checkpoint",      "epochs",
      "lr",             "weight_decay",  "batch_size",          "cv_folds",            "repeats",
      "seeds",          "target_seconds", "standardize_waveform", "pretrain_steps",     "pretrain_batch_size",
      "pretrain_lr",    "joint_lambda",  "finetune_cpc",        "lfbe_normalization",  "ccc_mode",
      "cpc",            "recognizer",    "lfbe"};
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  ExperimentConfig d;
  c.setup = j.contains("setup") ? parse_setup(j.at("setup").get<std::string>()) : d.setup;
  c.label_corpus = j.value("label_corpus", d.label_corpus);
  c.pretrain_corpus = j.value("pretrain_corpus", d.pretrain_corpus);
  c.cpc_checkpoint = j.value("cpc_checkpoint", d.cpc_checkpoint);
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.cv_folds = j.value("cv_folds", d.cv_folds);
  // Either of seeds/repeats implies the other; both given must agree (checked by validate).
  c.seeds = j.value("seeds", d.seeds);
  c.repeats = j.value("repeats", j.contains("seeds") ? c.seeds.size() : d.repeats);
  if (j.contains("repeats") && !j.contains("seeds")) {
    c.seeds.resize(c.repeats);
    std::iota(c.seeds.begin(), c.seeds.end(), std::uint64_t{0});
  }
  c.target_seconds = j.value("target_seconds", d.target_seconds);
  c.standardize_waveform = j.value("standardize_waveform", d.standardize_waveform);
  c.pretrain_steps = j.value("pretrain_steps", d.pretrain_steps);
  c.pretrain_batch_size = j.value("pretrain_batch_size", d.pretrain_batch_size);
  c.pretrain_lr = j.value("pretrain_lr", d.pretrain_lr);
  c.joint_lambda = j.value("joint_lambda", d.joint_lambda);
  c.finetune_cpc = j.value("finetune_cpc", d.finetune_cpc);
  c.lfbe_normalization = j.value("lfbe_normalization", d.lfbe_normalization);
  c.ccc_mode = j.value("ccc_mode", d.ccc_mode);
  c.cpc = j.contains("cpc") ? j.at("cpc").get<CpcConfig>() : d.cpc;
  c.recognizer = j.contains("recognizer") ? j.at("recognizer").get<RecognizerConfig>() : d.recognizer;
  c.lfbe = j.contains("lfbe") ? lfbe_from_json(j.at("lfbe")) : d.lfbe;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config: " + path.string() + " is not valid JSON");
  }
  try {
    return j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: " + path.string() + ": field has the wrong type");
  }
}

// ---- data -------------------------------------------------------------------

std::vector<Utterance> load_utterances(const fs::path& manifest, double target_seconds, bool require_labels) {
  std::vector<Utterance> out;
  for (const auto& e : read_manifest(manifest)) {
    if (require_labels && !e.labels) {
      throw std::runtime_error("manifest " + manifest.string() + ": utterance '" + e.id + "' has no labels");
    }
    AudioClip clip = read_wav(e.path);
    clip.id = e.id;
    out.push_back({e.id, fix_length(clip, target_seconds), e.labels, e.split, e.tag});
  }
  if (out.empty()) throw std::runtime_error("manifest " + manifest.string() + " lists no utterances");
  return out;
}

std::vector<Utterance> to_utterances(const std::vector<SyntheticUtterance>& corpus, double target_seconds) {
  std::vector<Utterance> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus) {
    out.push_back({u.clip.id, fix_length(u.clip, target_seconds), u.labels, u.split, u.tag});
  }
  return out;
}

SplitPlan holdout_plan(const std::vector<Utterance>& data) {
  SplitPlan plan;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].split == "train") plan.train.push_back(i);
    else if (data[i].split == "val") plan.val.push_back(i);
    else if (data[i].split == "test") plan.test.push_back(i);
  }
  auto need = [](const std::vector<std::size_t>& v, const char* name) {
    if (v.size() < 2) {
      throw std::invalid_argument(std::string("split: need at least 2 \"") + name + "\" utterances, found " +
                                  std::to_string(v.size()));
    }
  };
  need(plan.train, "train");
  need(plan.val, "val");
  need(plan.test, "test");
  return plan;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return mix(mix(mix(mix(seed) ^ stream) ^ a) ^ b);
}

std::vector<std::size_t> assign_folds(std::size_t count, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("folds: need at least 2 folds");
  if (count < 2 * k) {
    throw std::invalid_argument("folds: " + std::to_string(count) + " utterances cannot fill " + std::to_string(k) +
                                " folds of at least 2");
  }
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 7));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> fold_of(count);
  for (std::size_t pos = 0; pos < count; ++pos) fold_of[order[pos]] = pos % k;
  return fold_of;
}

SplitPlan fold_plan(const std::vector<std::size_t>& fold_of, std::size_t k, std::size_t fold) {
  if (fold >= k) throw std::invalid_argument("folds: fold index out of range");
  SplitPlan plan;
  plan.fold = static_cast<int>(fold);
  const std::size_t val_fold = (fold + 1) % k;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] == fold) plan.test.push_back(i);
    else if (fold_of[i] == val_fold) plan.val.push_back(i);
    else plan.train.push_back(i);
  }
  return plan;
}

void check_disjoint(const std::vector<Utterance>& data, const SplitPlan& plan) {
  std::map<std::string, const char*> owner;
  auto claim = [&](const std::vector<std::size_t>& idx, const char* name) {
    for (std::size_t i : idx) {
      if (i >= data.size()) throw std::out_of_range("split: index beyond the corpus");
      const auto [it, fresh] = owner.emplace(data[i].id, name);
      if (!fresh) {
        throw std::logic_error("split leakage: utterance '" + data[i].id + "' is in both " + it->second + " and " +
                               name);
      }
    }
  };
  claim(plan.train, "train");
  claim(plan.val, "val");
  claim(plan.test, "test");
}

// ---- records ---------------------------------------------------------------

void to_json(nlohmann::json& j, const RunRecord& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : r.curve) {
    curve.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                     {"val_ccc_avg", e.val_ccc_avg}});
  }
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : r.predictions) preds.push_back({{"id", p.id}, {"pred", p.pred}, {"label", p.label}});
  j = nlohmann::json{{"setup", r.setup},
                     {"seed", r.seed},
                     {"fold", r.fold},
                     {"best_epoch", r.best_epoch},
                     {"val_loss", r.val_loss},
                     {"test", {{"ccc_act", r.test.act}, {"ccc_val", r.test.val}, {"ccc_dom", r.test.dom},
                               {"ccc_avg", r.test.avg}, {"n", r.test.n}}},
                     {"checkpoint", r.checkpoint},
                     {"curve", curve},
                     {"predictions", preds},
                     {"train_ids", r.train_ids},
                     {"val_ids", r.val_ids},
                     {"test_ids", r.test_ids}};
  if (r.cpc_checksum_stage1) j["cpc_checksum_stage1"] = *r.cpc_checksum_stage1;
  if (r.cpc_checksum_final) j["cpc_checksum_final"] = *r.cpc_checksum_final;
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  r.setup = j.at("setup").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.fold = j.at("fold").get<int>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.val_loss = j.at("val_loss").get<double>();
  const auto& t = j.at("test");
  r.test = {t.at("ccc_act").get<double>(), t.at("ccc_val").get<double>(), t.at("ccc_dom").get<double>(),
            t.at("ccc_avg").get<double>(), t.at("n").get<std::size_t>()};
  r.checkpoint = j.value("checkpoint", std::string{});
  r.curve.clear();
  for (const auto& e : j.value("curve", nlohmann::json::array())) {
    r.curve.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                       e.at("val_loss").get<double>(), e.at("val_ccc_avg").get<double>()});
  }
  r.predictions.clear();
  for (const auto& p : j.value("predictions", nlohmann::json::array())) {
    r.predictions.push_back({p.at("id").get<std::string>(), p.at("pred").get<std::array<double, 3>>(),
                             p.at("label").get<std::array<double, 3>>()});
  }
  r.train_ids = j.value("train_ids", std::vector<std::string>{});
  r.val_ids = j.value("val_ids", std::vector<std::string>{});
  r.test_ids = j.value("test_ids", std::vector<std::string>{});
  r.cpc_checksum_stage1.reset();
  r.cpc_checksum_final.reset();
  if (j.contains("cpc_checksum_stage1")) r.cpc_checksum_stage1 = j.at("cpc_checksum_stage1").get<std::uint64_t>();
  if (j.contains("cpc_checksum_final")) r.cpc_checksum_final = j.at("cpc_checksum_final").get<std::uint64_t>();
}

// ---- pre-training ------------------------------------------------------------

PretrainResult pretrain_cpc(const CpcConfig& config, const std::vector<AudioClip>& clips,
                            const PretrainOptions& options) {
  if (clips.empty()) throw std::invalid_argument("pretrain: no clips");
  if (options.batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be positive");
  for (const auto& c : clips) {
    const std::size_t frames = config.frames_for(c.samples.size());
    if (frames <= config.horizon || frames - 1 < config.negatives) {
      throw std::invalid_argument("pretrain: clip '" + c.id + "' gives " + std::to_string(frames) +
                                  " frames; infoNCE needs more than the horizon and the negatives");
    }
  }
  PretrainResult result{CpcModel(config, derive_seed(options.seed, 2)), {}};
  CpcModel& model = result.model;
  AdamOptions adam_opts;
  adam_opts.lr = options.lr;
  adam_opts.weight_decay = options.weight_decay;
  Adam adam(model.parameters(), adam_opts);

  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size(), pass = 0;
  for (std::size_t step = 1; step <= options.steps; ++step) {
    adam.zero_grad();
    Tensor total;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        std::mt19937_64 rng(derive_seed(options.seed, 8, pass++));
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const AudioClip& clip = clips[order[cursor++]];
      const LatentSequence lat = model.forward(clip.samples);
      const Tensor loss = model.info_nce_loss(lat.z, lat.c, derive_seed(options.seed, 9, step, b));
      total = total.defined() ? total + loss : loss;
    }
    total = scale(total, 1.0 / static_cast<double>(options.batch_size));
    total.backward();
    adam.step();
    result.losses.push_back(total.item());
    if (options.on_step) options.on_step(step, total.item());
  }
  return result;
}

// ---- supervised stage ----------------------------------------------------------

namespace {

struct LfbeNorm {
  std::vector<double> mean, std;
};

Tensor lfbe_features(const AudioClip& clip, const LfbeConfig& cfg, bool standardize_input, const LfbeNorm& norm) {
  AudioClip input = clip;
  if (standardize_input) input.samples = standardize(clip.samples);
  const LfbeFrames f = compute_lfbe(input, cfg);
  std::vector<double> v = f.values;
  if (!norm.mean.empty()) {
    for (std::size_t t = 0; t < f.frames; ++t) {
      for (std::size_t b = 0; b < f.bins; ++b) v[t * f.bins + b] = (v[t * f.bins + b] - norm.mean[b]) / norm.std[b];
    }
  }
  return Tensor::from_data({f.frames, f.bins}, std::move(v));
}

/// Per-bin mean and population std over every frame of the training utterances.
LfbeNorm fit_lfbe_norm(const std::vector<Utterance>& data, const std::vector<std::size_t>& train,
                       const LfbeConfig& cfg, bool standardize_input) {
  const std::size_t bins = cfg.num_bins;
  std::vector<double> sum(bins, 0.0), sq(bins, 0.0);
  std::size_t frames = 0;
  const LfbeNorm none;
  for (std::size_t i : train) {
    const Tensor f = lfbe_features(data[i].clip, cfg, standardize_input, none);
    const auto v = f.data();
    for (std::size_t t = 0; t < f.size(0); ++t) {
      for (std::size_t b = 0; b < bins; ++b) sum[b] += v[t * bins + b];
    }
    frames += f.size(0);
  }
  LfbeNorm norm{std::vector<double>(bins), std::vector<double>(bins)};
  for (std::size_t b = 0; b < bins; ++b) norm.mean[b] = sum[b] / static_cast<double>(frames);
  for (std::size_t i : train) {
    const Tensor f = lfbe_features(data[i].clip, cfg, standardize_input, none);
    const auto v = f.data();
    for (std::size_t t = 0; t < f.size(0); ++t) {
      for (std::size_t b = 0; b < bins; ++b) sq[b] += (v[t * bins + b] - norm.mean[b]) * (v[t * bins + b] - norm.mean[b]);
    }
  }
  for (std::size_t b = 0; b < bins; ++b) {
    const double sd = std::sqrt(sq[b] / static_cast<double>(frames));
    norm.std[b] = sd > 0.0 ? sd : 1.0;
  }
  return norm;
}

using FeatureFn = std::function<Tensor(std::size_t index, bool train, std::uint64_t seed, Tensor* aux)>;

struct FitSpec {
  const ExperimentConfig* config = nullptr;
  const RunInputs* inputs = nullptr;
  EmotionRecognizer* recognizer = nullptr;
  FeatureFn features;
  std::vector<NamedTensor> extra_trainable;  // CPC parameters when trained jointly
  double aux_weight = 0.0;
  nlohmann::json checkpoint_config;
  std::vector<NamedTensor> checkpoint_tensors;
};

Tensor label_matrix(const std::vector<Utterance>& data, std::span<const std::size_t> idx) {
  std::vector<double> v;
  v.reserve(idx.size() * 3);
  for (std::size_t i : idx) {
    const auto a = data[i].labels->as_array();
    v.insert(v.end(), a.begin(), a.end());
  }
  return Tensor::from_data({idx.size(), 3}, std::move(v));
}

std::vector<Prediction> predict_indices(const FitSpec& spec, const std::vector<std::size_t>& idx) {
  const auto& data = *spec.inputs->labeled;
  std::vector<Prediction> out;
  out.reserve(idx.size());
  NoGradGuard no_grad;
  for (std::size_t i : idx) {
    const Tensor f = spec.features(i, false, 0, nullptr);
    const Tensor y = spec.recognizer->forward(f, false, 0);
    out.push_back({data[i].id, {y.data()[0], y.data()[1], y.data()[2]}, data[i].labels->as_array()});
  }
  return out;
}

void write_predictions(const fs::path& path, const std::vector<Prediction>& preds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& p : preds) {
    nlohmann::ordered_json row{{"id", p.id}, {"activation", p.pred[0]}, {"valence", p.pred[1]},
                               {"dominance", p.pred[2]}};
    out << row.dump() << '\n';
  }
}

std::vector<std::string> ids_of(const std::vector<Utterance>& data, const std::vector<std::size_t>& idx) {
  std::vector<std::string> ids;
  ids.reserve(idx.size());
  for (std::size_t i : idx) ids.push_back(data[i].id);
  return ids;
}

RunRecord fit(FitSpec& spec) {
  const ExperimentConfig& cfg = *spec.config;
  const RunInputs& in = *spec.inputs;
  const auto& data = *in.labeled;
  const SplitPlan& plan = in.plan;
  check_disjoint(data, plan);
  if (plan.train.size() < 2 || plan.val.size() < 2 || plan.test.size() < 2) {
    throw std::invalid_argument("fit: train, val and test need at least 2 utterances each");
  }
  for (const auto* part : {&plan.train, &plan.val, &plan.test}) {
    for (std::size_t i : *part) {
      if (!data[i].labels) throw std::invalid_argument("fit: utterance '" + data[i].id + "' has no labels");
    }
  }

  RunRecord record;
  record.setup = setup_name(cfg.setup);
  record.seed = in.seed;
  record.fold = plan.fold;
  record.train_ids = ids_of(data, plan.train);
  record.val_ids = ids_of(data, plan.val);
  record.test_ids = ids_of(data, plan.test);

  std::vector<NamedTensor> trainable = spec.recognizer->parameters();
  trainable.insert(trainable.end(), spec.extra_trainable.begin(), spec.extra_trainable.end());
  AdamOptions adam_opts;
  adam_opts.lr = cfg.lr;
  adam_opts.weight_decay = cfg.weight_decay;
  Adam adam(trainable, adam_opts);
  const auto& weights = spec.recognizer->config().loss_weights;

  const bool write = !in.out_dir.empty();
  std::ofstream epoch_log;
  fs::path ckpt_path;
  if (write) {
    fs::create_directories(in.out_dir);
    epoch_log.open(in.out_dir / "epochs.jsonl");
    if (!epoch_log) throw std::runtime_error("cannot write " + (in.out_dir / "epochs.jsonl").string());
    ckpt_path = in.out_dir / "best.ckpt";
    record.checkpoint = ckpt_path.string();
  }

  const Tensor val_labels = label_matrix(data, plan.val);
  std::vector<std::vector<double>> best_values;
  double best_loss = 0.0;
  auto snapshot = [&] {
    best_values.clear();
    for (const auto& p : trainable) best_values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  };

  std::vector<std::size_t> order = plan.train;
  for (std::size_t epoch = 0; epoch <= cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    if (epoch > 0) {
      std::mt19937_64 rng(derive_seed(in.seed, 5, epoch));
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<std::pair<std::size_t, std::size_t>> batches;  // [begin, end)
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
        batches.emplace_back(b, std::min(order.size(), b + cfg.batch_size));
      }
      // A trailing single utterance has no CCC; fold it into the previous batch.
      if (batches.size() > 1 && batches.back().second - batches.back().first == 1) {
        batches[batches.size() - 2].second = batches.back().second;
        batches.pop_back();
      }
      double loss_sum = 0.0;
      for (std::size_t bi = 0; bi < batches.size(); ++bi) {
        const auto [begin, end] = batches[bi];
        const std::span<const std::size_t> idx(order.data() + begin, end - begin);
        adam.zero_grad();
        const std::uint64_t dropout_seed = derive_seed(in.seed, 3, epoch, bi);
        std::vector<Tensor> preds;
        Tensor aux_sum;
        for (std::size_t k = 0; k < idx.size(); ++k) {
          Tensor aux;
          const Tensor f = spec.features(idx[k], true, derive_seed(in.seed, 4, epoch, idx[k]),
                                         spec.aux_weight > 0.0 ? &aux : nullptr);
          preds.push_back(spec.recognizer->forward(f, true, dropout_seed + k));
          if (aux.defined()) aux_sum = aux_sum.defined() ? aux_sum + aux : aux;
        }
        Tensor loss = ccc_loss(concat(preds, 0), label_matrix(data, idx), weights);
        if (aux_sum.defined()) loss = loss + scale(aux_sum, spec.aux_weight / static_cast<double>(idx.size()));
        loss.backward();
        adam.step();
        loss_sum += loss.item();
      }
      log.train_loss = loss_sum / static_cast<double>(batches.size());
    }

    const auto val_preds = predict_indices(spec, plan.val);
    std::vector<double> flat;
    std::vector<std::array<double, 3>> p3, y3;
    for (const auto& p : val_preds) {
      flat.insert(flat.end(), p.pred.begin(), p.pred.end());
      p3.push_back(p.pred);
      y3.push_back(p.label);
    }
    {
      NoGradGuard no_grad;
      log.val_loss = ccc_loss(Tensor::from_data({val_preds.size(), 3}, flat), val_labels, weights).item();
    }
    log.val_ccc_avg = evaluate(p3, y3).avg;
    record.curve.push_back(log);
    if (write) {
      epoch_log << nlohmann::json{{"epoch", log.epoch}, {"train_loss", log.train_loss}, {"val_loss", log.val_loss},
                                  {"val_ccc_avg", log.val_ccc_avg}}
                       .dump()
                << '\n';
      epoch_log.flush();
    }
    log_line(2, record.setup + " seed " + std::to_string(in.seed) + " epoch " + std::to_string(epoch) +
                    ": train " + std::to_string(log.train_loss) + " val " + std::to_string(log.val_loss));

    if (epoch == 0 || log.val_loss < best_loss) {
      best_loss = log.val_loss;
      record.best_epoch = epoch;
      snapshot();
      if (write) {
        nlohmann::json c = spec.checkpoint_config;
        c["epoch"] = epoch;
        save_checkpoint(ckpt_path, c, spec.checkpoint_tensors);
      }
    }
  }

  for (std::size_t i = 0; i < trainable.size(); ++i) {
    Tensor t = trainable[i].tensor;
    std::ranges::copy(best_values[i], t.mutable_data().begin());
  }
  record.val_loss = best_loss;
  record.predictions = predict_indices(spec, plan.test);
  std::vector<std::array<double, 3>> p3, y3;
  for (const auto& p : record.predictions) {
    p3.push_back(p.pred);
    y3.push_back(p.label);
  }
  record.test = evaluate(p3, y3);
  if (write) write_predictions(in.out_dir / "test_predictions.jsonl", record.predictions);
  log_line(1, record.setup + " seed " + std::to_string(in.seed) +
                  (plan.fold >= 0 ? " fold " + std::to_string(plan.fold) : std::string{}) + ": best epoch " +
                  std::to_string(record.best_epoch) + ", test CCC avg " + format_score(record.test.avg));
  return record;
}

nlohmann::json base_checkpoint_config(const ExperimentConfig& cfg, const RecognizerConfig& rcfg) {
  nlohmann::json lfbe;
  lfbe_to_json(lfbe, cfg.lfbe);
  return nlohmann::json{{"kind", "emotion"},
                        {"setup", setup_name(cfg.setup)},
                        {"recognizer", rcfg},
                        {"lfbe", lfbe},
                        {"standardize_waveform", cfg.standardize_waveform}};
}

void require_labeled(const RunInputs& in) {
  if (in.labeled == nullptr || in.labeled->empty()) throw std::invalid_argument("run: no labeled corpus");
}

RunRecord run_two_stage(const ExperimentConfig& cfg, const RunInputs& in, const std::vector<AudioClip>* clips) {
  std::optional<CpcModel> cpc;
  if (in.stage1 != nullptr) {
    cpc = in.stage1->clone();
  } else if (!cfg.cpc_checkpoint.empty()) {
    cpc = CpcModel::load(cfg.cpc_checkpoint);
  } else {
    PretrainOptions opts;
    opts.steps = cfg.pretrain_steps;
    opts.batch_size = cfg.pretrain_batch_size;
    opts.lr = cfg.pretrain_lr;
    opts.weight_decay = cfg.weight_decay;
    opts.seed = derive_seed(in.seed, 6);
    opts.on_step = [&](std::size_t step, double loss) {
      if (step % 25 == 0 || step == cfg.pretrain_steps) {
        log_line(2, "pretrain step " + std::to_string(step) + ": infoNCE " + std::to_string(loss));
      }
    };
    cpc = pretrain_cpc(cpc_for(cfg), *clips, opts).model;
  }
  if (!in.out_dir.empty()) {
    fs::create_directories(in.out_dir);
    cpc->save(in.out_dir / "cpc_stage1.ckpt");
  }
  const std::uint64_t stage1_sum = parameter_checksum(cpc->parameters());
  log_line(2, "stage-1 CPC checksum " + std::to_string(stage1_sum));

  RecognizerConfig rcfg = recognizer_for(cfg);
  rcfg.input_dim = cpc->config().gru_hidden;
  EmotionRecognizer rec(rcfg, derive_seed(in.seed, 1));
  const auto& data = *in.labeled;

  FitSpec spec;
  spec.config = &cfg;
  spec.inputs = &in;
  spec.recognizer = &rec;
  spec.checkpoint_config = base_checkpoint_config(cfg, rcfg);
  spec.checkpoint_config["cpc"] = cpc->config();
  spec.checkpoint_tensors = rec.parameters();
  for (auto& p : cpc->parameters()) spec.checkpoint_tensors.push_back(p);

  std::vector<Tensor> cached;
  if (cfg.finetune_cpc) {
    cpc->set_trainable(true);
    spec.extra_trainable = cpc->parameters();
    spec.features = [&](std::size_t i, bool train, std::uint64_t, Tensor*) {
      return train ? cpc->forward(data[i].clip.samples).c : cpc->extract_features(data[i].clip);
    };
  } else {
    cpc->set_trainable(false);
    cached.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) cached[i] = cpc->extract_features(data[i].clip);
    spec.features = [&](std::size_t i, bool, std::uint64_t, Tensor*) { return cached[i]; };
  }
  RunRecord record = fit(spec);
  record.cpc_checksum_stage1 = stage1_sum;
  record.cpc_checksum_final = parameter_checksum(cpc->parameters());
  if (!cfg.finetune_cpc && *record.cpc_checksum_final != stage1_sum) {
    throw std::logic_error("frozen CPC parameters changed during stage 2");
  }
  return record;
}

}  // namespace

RunRecord run_sup(const ExperimentConfig& cfg, const RunInputs& in) {
  require_labeled(in);
  const auto& data = *in.labeled;
  check_disjoint(data, in.plan);
  const RecognizerConfig rcfg = recognizer_for(cfg);
  EmotionRecognizer rec(rcfg, derive_seed(in.seed, 1));

  LfbeNorm norm;
  if (cfg.lfbe_normalization == "global") norm = fit_lfbe_norm(data, in.plan.train, cfg.lfbe, cfg.standardize_waveform);
  std::vector<Tensor> cached(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    cached[i] = lfbe_features(data[i].clip, cfg.lfbe, cfg.standardize_waveform, norm);
  }

  FitSpec spec;
  spec.config = &cfg;
  spec.inputs = &in;
  spec.recognizer = &rec;
  spec.features = [&](std::size_t i, bool, std::uint64_t, Tensor*) { return cached[i]; };
  spec.checkpoint_config = base_checkpoint_config(cfg, rcfg);
  spec.checkpoint_config["lfbe_normalization"] = cfg.lfbe_normalization;
  spec.checkpoint_tensors = rec.parameters();
  if (!norm.mean.empty()) {
    spec.checkpoint_tensors.push_back({"lfbe.mean", Tensor::from_data({1, norm.mean.size()}, norm.mean)});
    spec.checkpoint_tensors.push_back({"lfbe.std", Tensor::from_data({1, norm.std.size()}, norm.std)});
  }
  return fit(spec);
}

RunRecord run_joint_cpc(const ExperimentConfig& cfg, const RunInputs& in) {
  require_labeled(in);
  const auto& data = *in.labeled;
  CpcModel cpc(cpc_for(cfg), derive_seed(in.seed, 2));
  const RecognizerConfig rcfg = recognizer_for(cfg);
  EmotionRecognizer rec(rcfg, derive_seed(in.seed, 1));

  FitSpec spec;
  spec.config = &cfg;
  spec.inputs = &in;
  spec.recognizer = &rec;
  spec.extra_trainable = cpc.parameters();
  spec.aux_weight = cfg.joint_lambda;
  spec.features = [&](std::size_t i, bool train, std::uint64_t seed, Tensor* aux) {
    if (!train) return cpc.extract_features(data[i].clip);
    const LatentSequence lat = cpc.forward(data[i].clip.samples);
    if (aux != nullptr) *aux = cpc.info_nce_loss(lat.z, lat.c, seed);
    return lat.c;
  };
  spec.checkpoint_config = base_checkpoint_config(cfg, rcfg);
  spec.checkpoint_config["cpc"] = cpc.config();
  spec.checkpoint_tensors = rec.parameters();
  for (auto& p : cpc.parameters()) spec.checkpoint_tensors.push_back(p);
  return fit(spec);
}

RunRecord run_mini_cpc(const ExperimentConfig& cfg, const RunInputs& in) {
  require_labeled(in);
  // Stage 1 sees only the training split's audio; labels are not used.
  std::vector<AudioClip> clips;
  for (std::size_t i : in.plan.train) clips.push_back((*in.labeled)[i].clip);
  return run_two_stage(cfg, in, &clips);
}

RunRecord run_pre_cpc(const ExperimentConfig& cfg, const RunInputs& in) {
  require_labeled(in);
  std::vector<AudioClip> clips;
  if (in.stage1 == nullptr && cfg.cpc_checkpoint.empty()) {
    if (in.pretrain == nullptr || in.pretrain->empty()) throw std::invalid_argument("preCPC: no pretrain corpus");
    std::set<std::string> labeled_ids;
    for (const auto& u : *in.labeled) labeled_ids.insert(u.id);
    for (const auto& u : *in.pretrain) {
      if (labeled_ids.contains(u.id)) {
        throw std::logic_error("preCPC: pretrain utterance '" + u.id + "' also appears in the labeled corpus");
      }
      clips.push_back(u.clip);
    }
  }
  return run_two_stage(cfg, in, &clips);
}

RunRecord run_setup(const ExperimentConfig& cfg, const RunInputs& in) {
  switch (cfg.setup) {
    case Setup::Sup: return run_sup(cfg, in);
    case Setup::JointCpc: return run_joint_cpc(cfg, in);
    case Setup::MiniCpc: return run_mini_cpc(cfg, in);
    case Setup::PreCpc: return run_pre_cpc(cfg, in);
  }
  throw std::logic_error("unreachable setup");
}

std::vector<RunRecord> cross_validate(const ExperimentConfig& cfg, const std::vector<Utterance>& labeled,
                                      const std::vector<Utterance>* pretrain, std::uint64_t seed,
                                      const fs::path& out_dir) {
  if (cfg.cv_folds < 2) throw std::invalid_argument("cross_validate: cv_folds must be >= 2");
  const auto fold_of = assign_folds(labeled.size(), cfg.cv_folds, seed);

  std::optional<CpcModel> shared;
  if (cfg.setup == Setup::PreCpc && cfg.cpc_checkpoint.empty()) {
    if (pretrain == nullptr || pretrain->empty()) throw std::invalid_argument("preCPC: no pretrain corpus");
    std::vector<AudioClip> clips;
    for (const auto& u : *pretrain) clips.push_back(u.clip);
    PretrainOptions opts;
    opts.steps = cfg.pretrain_steps;
    opts.batch_size = cfg.pretrain_batch_size;
    opts.lr = cfg.pretrain_lr;
    opts.weight_decay = cfg.weight_decay;
    opts.seed = derive_seed(seed, 6);
    shared = pretrain_cpc(cpc_for(cfg), clips, opts).model;
  }

  std::vector<RunRecord> records;
  for (std::size_t f = 0; f < cfg.cv_folds; ++f) {
    RunInputs in;
    in.labeled = &labeled;
    in.pretrain = pretrain;
    in.stage1 = shared ? &*shared : nullptr;
    in.plan = fold_plan(fold_of, cfg.cv_folds, f);
    in.seed = seed;
    if (!out_dir.empty()) in.out_dir = out_dir / ("fold" + std::to_string(f));
    records.push_back(run_setup(cfg, in));
  }
  return records;
}

CccReport combine_folds(const std::vector<RunRecord>& folds, const std::string& ccc_mode) {
  if (folds.empty()) throw std::invalid_argument("combine_folds: no records");
  if (ccc_mode == "pooled") {
    std::vector<std::array<double, 3>> p, y;
    for (const auto& r : folds) {
      for (const auto& pr : r.predictions) {
        p.push_back(pr.pred);
        y.push_back(pr.label);
      }
    }
    return evaluate(p, y);
  }
  if (ccc_mode != "per_fold") throw std::invalid_argument("combine_folds: unknown mode '" + ccc_mode + "'");
  std::vector<CccReport> reports;
  for (const auto& r : folds) reports.push_back(r.test);
  return average_reports(reports);
}

std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  if (cfg.label_corpus.empty()) throw std::invalid_argument("config: label_corpus is required");
  const auto labeled = load_utterances(cfg.label_corpus, cfg.target_seconds, true);
  std::vector<Utterance> pretrain;
  if (cfg.setup == Setup::PreCpc && cfg.cpc_checkpoint.empty()) {
    pretrain = load_utterances(cfg.pretrain_corpus, cfg.target_seconds, false);
  }
  const fs::path records_dir = out_dir / "records";
  fs::create_directories(records_dir);
  std::vector<RunRecord> all;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string tag = setup_name(cfg.setup) + "_seed" + std::to_string(seed);
    std::vector<RunRecord> got;
    if (cfg.cv_folds == 0) {
      RunInputs in;
      in.labeled = &labeled;
      in.pretrain = &pretrain;
      in.plan = holdout_plan(labeled);
      in.seed = seed;
      in.out_dir = out_dir / "runs" / tag;
      got.push_back(run_setup(cfg, in));
    } else {
      got = cross_validate(cfg, labeled, &pretrain, seed, out_dir / "runs" / tag);
    }
    for (const auto& r : got) {
      const std::string name = tag + (r.fold >= 0 ? "_fold" + std::to_string(r.fold) : std::string{}) + ".json";
      std::ofstream out(records_dir / name);
      if (!out) throw std::runtime_error("cannot write " + (records_dir / name).string());
      out << nlohmann::json(r).dump(2) << '\n';
      all.push_back(r);
    }
  }
  return all;
}

std::vector<RunRecord> load_run_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("report: " + dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> records;
  for (const auto& f : files) {
    std::ifstream in(f);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("setup") || !j.contains("test")) continue;
    try {
      records.push_back(j.get<RunRecord>());
    } catch (const nlohmann::json::exception&) {
      throw std::runtime_error("report: malformed run record " + f.string());
    }
  }
  return records;
}

std::vector<ReportRow> summarize_records(const std::vector<RunRecord>& records, const std::string& ccc_mode) {
  if (records.empty()) throw std::invalid_argument("report: no run records");
  std::vector<ReportRow> rows;
  for (Setup s : {Setup::Sup, Setup::JointCpc, Setup::MiniCpc, Setup::PreCpc}) {
    const std::string name = setup_name(s);
    std::map<std::uint64_t, std::vector<RunRecord>> folds;
    std::vector<CccReport> per_run;
    for (const auto& r : records) {
      if (r.setup != name) continue;
      if (r.fold >= 0) folds[r.seed].push_back(r);
      else per_run.push_back(r.test);
    }
    for (const auto& [seed, group] : folds) per_run.push_back(combine_folds(group, ccc_mode));
    if (!per_run.empty()) rows.push_back({name, aggregate_runs(per_run)});
  }
  if (rows.empty()) throw std::invalid_argument("report: records name no known setup");
  return rows;
}

// ---- trained model ------------------------------------------------------------

TrainedModel TrainedModel::load(const fs::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const auto& c = ckpt.config;
  if (c.value("kind", std::string{}) != "emotion") {
    throw CheckpointError("checkpoint: " + path.string() + " holds no emotion model");
  }
  TrainedModel m;
  m.setup = parse_setup(c.at("setup").get<std::string>());
  m.recognizer = EmotionRecognizer(c.at("recognizer").get<RecognizerConfig>());
  restore_parameters(ckpt, m.recognizer.parameters());
  m.recognizer.set_trainable(false);
  m.lfbe = lfbe_from_json(c.at("lfbe"));
  m.standardize_waveform = c.value("standardize_waveform", true);
  if (c.contains("cpc")) {
    m.cpc.emplace(c.at("cpc").get<CpcConfig>());
    restore_parameters(ckpt, m.cpc->parameters());
    m.cpc->set_trainable(false);
  }
  if (m.setup == Setup::Sup && c.value("lfbe_normalization", std::string("none")) == "global") {
    const auto mean = ckpt.get("lfbe.mean").data();
    const auto sd = ckpt.get("lfbe.std").data();
    m.lfbe_mean.assign(mean.begin(), mean.end());
    m.lfbe_std.assign(sd.begin(), sd.end());
  }
  if (m.setup != Setup::Sup && !m.cpc) throw CheckpointError("checkpoint: " + path.string() + " lacks its CPC model");
  return m;
}

Tensor TrainedModel::features(const AudioClip& clip) const {
  if (setup == Setup::Sup) return lfbe_features(clip, lfbe, standardize_waveform, LfbeNorm{lfbe_mean, lfbe_std});
  return cpc->extract_features(clip);
}

std::vector<Prediction> TrainedModel::predict(const std::vector<Utterance>& data) const {
  std::vector<Prediction> out;
  out.reserve(data.size());
  NoGradGuard no_grad;
  for (const auto& u : data) {
    const Tensor y = recognizer.forward(features(u.clip), false, 0);
    Prediction p{u.id, {y.data()[0], y.data()[1], y.data()[2]}, {}};
    if (u.labels) p.label = u.labels->as_array();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace cpcser
