#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cpcser/cpc.hpp"
#include "cpcser/lfbe.hpp"
#include "cpcser/manifest.hpp"
#include "cpcser/metrics.hpp"
#include "cpcser/recognizer.hpp"
#include "json.hpp"

namespace cpcser {

enum class Setup { Sup, JointCpc, MiniCpc, PreCpc };

/// Table row names: "Sup", "jointCPC", "miniCPC", "preCPC".
std::string setup_name(Setup s);
/// Case-insensitive; throws std::invalid_argument on unknown names.
Setup parse_setup(const std::string& name);

struct ExperimentConfig {
  Setup setup = Setup::Sup;
  std::string label_corpus;     // manifest path
  std::string pretrain_corpus;  // manifest path; required by preCPC, forbidden for Sup
  std::string cpc_checkpoint;   // optional stage-1 checkpoint; skips pre-training
  std::size_t epochs = 50;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 8;
  std::size_t cv_folds = 0;  // 0: use the manifest's train/val/test split, 5: cross-validation
  std::size_t repeats = 5;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  double target_seconds = 10.0;
  bool standardize_waveform = true;  // also forwarded to the CPC front end

  std::size_t pretrain_steps = 300;
  std::size_t pretrain_batch_size = 8;
  double pretrain_lr = 2e-4;

  double joint_lambda = 1.0;   // jointCPC: ccc_loss + lambda * infoNCE
  bool finetune_cpc = false;   // miniCPC/preCPC: keep CPC trainable in stage 2
  std::string lfbe_normalization = "global";  // "global" (train-split CMVN) or "none"
  std::string ccc_mode = "per_fold";          // CV scoring: "per_fold" or "pooled"

  CpcConfig cpc;
  RecognizerConfig recognizer;
  LfbeConfig lfbe;

  /// Throws std::invalid_argument describing the first violated rule.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Unknown keys are errors.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// One labeled or unlabeled clip, already cut to the target length.
struct Utterance {
  std::string id;
  AudioClip clip;
  std::optional<EmotionLabels> labels;
  std::string split;
  std::string tag;
};

/// Reads and length-normalizes every manifest entry. With `require_labels`,
/// a missing label is an error naming the id.
std::vector<Utterance> load_utterances(const std::filesystem::path& manifest, double target_seconds,
                                       bool require_labels);
std::vector<Utterance> to_utterances(const std::vector<SyntheticUtterance>& corpus, double target_seconds);

/// Index sets into the labeled corpus.
struct SplitPlan {
  std::vector<std::size_t> train, val, test;
  int fold = -1;  // -1 for a fixed train/val/test split
};

/// Uses the "train", "val" and "test" split fields.
SplitPlan holdout_plan(const std::vector<Utterance>& data);

/// fold_of[i] for every utterance: a seeded shuffle dealt round-robin into k folds.
std::vector<std::size_t> assign_folds(std::size_t count, std::size_t k, std::uint64_t seed);
/// Test fold `fold`, validation fold `fold + 1 (mod k)`, training on the rest.
SplitPlan fold_plan(const std::vector<std::size_t>& fold_of, std::size_t k, std::size_t fold);

/// Throws std::logic_error naming an id that appears in two of the sets.
void check_disjoint(const std::vector<Utterance>& data, const SplitPlan& plan);

struct EpochLog {
  std::size_t epoch = 0;  // 0 is the untrained model
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_ccc_avg = 0.0;
};

struct Prediction {
  std::string id;
  std::array<double, 3> pred{};
  std::array<double, 3> label{};
};

struct RunRecord {
  std::string setup;
  std::uint64_t seed = 0;
  int fold = -1;
  std::size_t best_epoch = 0;
  double val_loss = 0.0;
  CccReport test;
  std::string checkpoint;
  std::vector<EpochLog> curve;
  std::vector<Prediction> predictions;
  std::vector<std::string> train_ids, val_ids, test_ids;
  std::optional<std::uint64_t> cpc_checksum_stage1;
  std::optional<std::uint64_t> cpc_checksum_final;
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

struct PretrainOptions {
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;
  /// Called after each step with (step index from 1, batch loss).
  std::function<void(std::size_t, double)> on_step;
};

struct PretrainResult {
  CpcModel model;
  std::vector<double> losses;  // one per step
};

/// infoNCE pre-training over clips visited in seeded shuffled order.
PretrainResult pretrain_cpc(const CpcConfig& config, const std::vector<AudioClip>& clips,
                            const PretrainOptions& options);

/// Inputs for one run besides the config. `out_dir` empty means nothing is written.
struct RunInputs {
  const std::vector<Utterance>* labeled = nullptr;
  const std::vector<Utterance>* pretrain = nullptr;  // preCPC only
  const CpcModel* stage1 = nullptr;                  // reuse a stage-1 model instead of pre-training
  SplitPlan plan;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
};

RunRecord run_sup(const ExperimentConfig& config, const RunInputs& in);
RunRecord run_joint_cpc(const ExperimentConfig& config, const RunInputs& in);
RunRecord run_mini_cpc(const ExperimentConfig& config, const RunInputs& in);
RunRecord run_pre_cpc(const ExperimentConfig& config, const RunInputs& in);
/// Dispatches on config.setup.
RunRecord run_setup(const ExperimentConfig& config, const RunInputs& in);

/// One record per fold for one seed. preCPC pre-trains once and reuses it across folds.
std::vector<RunRecord> cross_validate(const ExperimentConfig& config, const std::vector<Utterance>& labeled,
                                      const std::vector<Utterance>* pretrain, std::uint64_t seed,
                                      const std::filesystem::path& out_dir);

/// Combines the fold records of one seed per config.ccc_mode.
CccReport combine_folds(const std::vector<RunRecord>& folds, const std::string& ccc_mode);

/// All seeds of config (holdout or CV); records are written under out_dir/records.
std::vector<RunRecord> run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

/// Reads every *.json record under dir (recursively).
std::vector<RunRecord> load_run_records(const std::filesystem::path& dir);

/// One row per setup present, ordered Sup, jointCPC, miniCPC, preCPC. CV folds of
/// one seed are first combined per `ccc_mode`. Throws if `records` is empty.
std::vector<ReportRow> summarize_records(const std::vector<RunRecord>& records,
                                         const std::string& ccc_mode = "per_fold");

/// Loads checkpoints written by the harness and scores a labeled utterance set.
struct TrainedModel {
  Setup setup = Setup::Sup;
  std::optional<CpcModel> cpc;
  EmotionRecognizer recognizer;
  LfbeConfig lfbe;
  std::vector<double> lfbe_mean, lfbe_std;  // empty unless global normalization was used
  bool standardize_waveform = true;

  static TrainedModel load(const std::filesystem::path& checkpoint);
  Tensor features(const AudioClip& clip) const;
  std::vector<Prediction> predict(const std::vector<Utterance>& data) const;
};

/// Derives independent stream seeds from a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t a = 0, std::uint64_t b = 0);

}  // namespace cpcser
