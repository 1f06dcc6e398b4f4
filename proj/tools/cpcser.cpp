// cpcser: corpus synthesis, CPC pre-training, emotion training and reporting.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "cpcser/checkpoint.hpp"
#include "cpcser/embeddings.hpp"
#include "cpcser/harness.hpp"
#include "cpcser/lfbe.hpp"
#include "cpcser/log.hpp"
#include "cpcser/manifest.hpp"
#include "cpcser/metrics.hpp"
#include "cpcser/synth.hpp"

namespace fs = std::filesystem;
using namespace cpcser;

namespace {

struct Common {
  std::string config;
  std::string workdir = ".";
  std::optional<std::uint64_t> seed;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::path(workdir) / path;
  }

  ExperimentConfig load_config() const {
    if (config.empty()) return {};
    return load_experiment_config(resolve(config));
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_config) {
  if (with_config) cmd->add_option("--config", c.config, "Experiment config JSON (flags override it)");
  cmd->add_option("--workdir", c.workdir, "Root that relative paths are resolved against")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Seed for every stochastic choice of the command");
}

void print_report(const CccReport& r) {
  std::printf("n=%zu  CCC_avg %s  CCC_act %s  CCC_val %s  CCC_dom %s\n", r.n, format_score(r.avg).c_str(),
              format_score(r.act).c_str(), format_score(r.val).c_str(), format_score(r.dom).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CPC speech emotion toolkit"};
  app.name("cpcser");
  app.require_subcommand(1);
  Common common;

  // synth-corpus
  auto* synth = app.add_subcommand("synth-corpus", "Render a synthetic labeled or unlabeled corpus");
  SynthConfig synth_cfg;
  std::string synth_out = "corpus";
  bool unlabeled = false;
  add_common(synth, common, false);
  synth->add_option("--out", synth_out, "Output directory (audio/ and manifest.jsonl)")->capture_default_str();
  synth->add_option("--count", synth_cfg.count, "Number of utterances")->capture_default_str();
  synth->add_option("--families", synth_cfg.families, "1, or 2 for two envelope-rate families")
      ->capture_default_str();
  synth->add_option("--split-scheme", synth_cfg.split_scheme, "holdout, folds or none")->capture_default_str();
  synth->add_option("--min-seconds", synth_cfg.min_seconds, "Shortest clip length")->capture_default_str();
  synth->add_option("--max-seconds", synth_cfg.max_seconds, "Longest clip length")->capture_default_str();
  synth->add_option("--id-prefix", synth_cfg.id_prefix, "Utterance id prefix")->capture_default_str();
  synth->add_flag("--unlabeled", unlabeled, "Omit labels from the manifest");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "Pre-train a CPC model with infoNCE");
  std::string pre_manifest, pre_out = "cpc.ckpt";
  std::optional<std::size_t> pre_steps, pre_batch;
  std::optional<double> pre_lr, pre_seconds;
  add_common(pretrain, common, true);
  pretrain->add_option("--manifest", pre_manifest, "Audio manifest (labels ignored)")->required();
  pretrain->add_option("--out", pre_out, "Checkpoint path")->capture_default_str();
  pretrain->add_option("--steps", pre_steps, "Optimizer steps (config: pretrain_steps)");
  pretrain->add_option("--batch-size", pre_batch, "Clips per step (config: pretrain_batch_size)");
  pretrain->add_option("--lr", pre_lr, "Learning rate (config: pretrain_lr)");
  pretrain->add_option("--target-seconds", pre_seconds, "Clip length after cut or repeat (config: target_seconds)");

  // train
  auto* train = app.add_subcommand("train", "Run an experimental setup for every configured seed");
  std::string train_out = "experiment", setup_name_opt, label_corpus, pretrain_corpus, cpc_ckpt;
  std::optional<std::size_t> epochs, batch_size, cv_folds, pretrain_steps;
  std::optional<double> lr, target_seconds, joint_lambda;
  bool finetune = false;
  add_common(train, common, true);
  train->add_option("--out", train_out, "Output directory for runs/ and records/")->capture_default_str();
  train->add_option("--setup", setup_name_opt, "Sup, jointCPC, miniCPC or preCPC");
  train->add_option("--label-corpus", label_corpus, "Labeled manifest");
  train->add_option("--pretrain-corpus", pretrain_corpus, "Unlabeled manifest for preCPC");
  train->add_option("--cpc-checkpoint", cpc_ckpt, "Stage-1 CPC checkpoint; skips pre-training");
  train->add_option("--epochs", epochs, "Training epochs");
  train->add_option("--lr", lr, "Recognizer learning rate");
  train->add_option("--batch-size", batch_size, "Utterances per batch");
  train->add_option("--cv-folds", cv_folds, "0 for the manifest split, k for k-fold cross-validation");
  train->add_option("--target-seconds", target_seconds, "Clip length after cut or repeat");
  train->add_option("--pretrain-steps", pretrain_steps, "CPC pre-training steps");
  train->add_option("--joint-lambda", joint_lambda, "infoNCE weight in jointCPC");
  train->add_flag("--finetune-cpc", finetune, "Keep CPC trainable during stage 2");

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a trained checkpoint on a labeled manifest");
  std::string eval_ckpt, eval_manifest, eval_split = "test", eval_out;
  std::optional<double> eval_seconds;
  add_common(evaluate_cmd, common, true);
  evaluate_cmd->add_option("--checkpoint", eval_ckpt, "best.ckpt written by train")->required();
  evaluate_cmd->add_option("--manifest", eval_manifest, "Labeled manifest")->required();
  evaluate_cmd->add_option("--split", eval_split, "Split to score, or \"all\"")->capture_default_str();
  evaluate_cmd->add_option("--out", eval_out, "Write predictions as JSON lines");
  evaluate_cmd->add_option("--target-seconds", eval_seconds, "Clip length (config: target_seconds)");

  // extract-features
  auto* extract = app.add_subcommand("extract-features", "Write per-utterance feature matrices");
  std::string ext_ckpt, ext_manifest, ext_out = "features";
  bool ext_lfbe = false;
  std::optional<double> ext_seconds;
  add_common(extract, common, true);
  extract->add_option("--checkpoint", ext_ckpt, "CPC or emotion checkpoint (CPC contexts)");
  extract->add_flag("--lfbe", ext_lfbe, "Write log mel filterbank energies instead");
  extract->add_option("--manifest", ext_manifest, "Audio manifest")->required();
  extract->add_option("--out", ext_out, "Output directory")->capture_default_str();
  extract->add_option("--target-seconds", ext_seconds, "Clip length (config: target_seconds)");

  // export-embeddings
  auto* embed = app.add_subcommand("export-embeddings", "Export time-mean CPC context embeddings as CSV");
  std::string emb_ckpt, emb_manifest, emb_out = "embeddings.csv";
  std::optional<double> emb_seconds;
  add_common(embed, common, true);
  embed->add_option("--checkpoint", emb_ckpt,
                    "CPC checkpoint; without it a randomly initialized model from --config and --seed is used");
  embed->add_option("--manifest", emb_manifest, "Audio manifest")->required();
  embed->add_option("--out", emb_out, "CSV path")->capture_default_str();
  embed->add_option("--target-seconds", emb_seconds, "Clip length (config: target_seconds)");

  // report
  auto* report = app.add_subcommand("report", "Tabulate run records as mean ± std per setup");
  std::string rep_records, rep_out, rep_csv, rep_mode = "per_fold";
  add_common(report, common, false);
  report->add_option("--records", rep_records, "Directory searched for run record JSON files");
  report->add_option("--from-csv", rep_csv, "Re-render a previously written report CSV");
  report->add_option("--out", rep_out, "Write the report CSV here");
  report->add_option("--ccc-mode", rep_mode, "Cross-validation scoring: per_fold or pooled")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (char& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::fprintf(stderr, "cpcser: error: %s\n", msg.c_str());
    return 2;
  }

  try {
    const std::uint64_t seed = common.seed.value_or(0);
    if (*synth) {
      const fs::path dir = common.resolve(synth_out);
      const auto corpus = synth_corpus(synth_cfg, seed);
      const fs::path manifest = write_corpus(dir, corpus, !unlabeled);
      std::printf("wrote %zu utterances to %s\n", corpus.size(), manifest.string().c_str());
    } else if (*pretrain) {
      ExperimentConfig cfg = common.load_config();
      if (pre_steps) cfg.pretrain_steps = *pre_steps;
      if (pre_batch) cfg.pretrain_batch_size = *pre_batch;
      if (pre_lr) cfg.pretrain_lr = *pre_lr;
      if (pre_seconds) cfg.target_seconds = *pre_seconds;
      cfg.cpc.standardize_waveform = cfg.standardize_waveform;
      cfg.cpc.validate();
      const auto data = load_utterances(common.resolve(pre_manifest), cfg.target_seconds, false);
      std::vector<AudioClip> clips;
      for (const auto& u : data) clips.push_back(u.clip);
      const fs::path out = common.resolve(pre_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      std::ofstream loss_log(out.string() + ".losses.jsonl");
      PretrainOptions opts;
      opts.steps = cfg.pretrain_steps;
      opts.batch_size = cfg.pretrain_batch_size;
      opts.lr = cfg.pretrain_lr;
      opts.weight_decay = cfg.weight_decay;
      opts.seed = seed;
      opts.on_step = [&](std::size_t step, double loss) {
        loss_log << nlohmann::json{{"step", step}, {"info_nce", loss}}.dump() << '\n';
        if (step % 10 == 0 || step == opts.steps) log_line(1, "step " + std::to_string(step) + " infoNCE " + std::to_string(loss));
      };
      const PretrainResult result = pretrain_cpc(cfg.cpc, clips, opts);
      result.model.save(out);
      std::printf("final infoNCE %.6f, checkpoint %s\n", result.losses.back(), out.string().c_str());
    } else if (*train) {
      ExperimentConfig cfg = common.load_config();
      if (!setup_name_opt.empty()) cfg.setup = parse_setup(setup_name_opt);
      if (!label_corpus.empty()) cfg.label_corpus = label_corpus;
      if (!pretrain_corpus.empty()) cfg.pretrain_corpus = pretrain_corpus;
      if (!cpc_ckpt.empty()) cfg.cpc_checkpoint = cpc_ckpt;
      if (epochs) cfg.epochs = *epochs;
      if (lr) cfg.lr = *lr;
      if (batch_size) cfg.batch_size = *batch_size;
      if (cv_folds) cfg.cv_folds = *cv_folds;
      if (target_seconds) cfg.target_seconds = *target_seconds;
      if (pretrain_steps) cfg.pretrain_steps = *pretrain_steps;
      if (joint_lambda) cfg.joint_lambda = *joint_lambda;
      if (finetune) cfg.finetune_cpc = true;
      if (common.seed) {
        cfg.seeds = {*common.seed};
        cfg.repeats = 1;
      }
      if (cfg.label_corpus.empty()) throw std::invalid_argument("train: --label-corpus (or config label_corpus) is required");
      cfg.label_corpus = common.resolve(cfg.label_corpus).string();
      if (!cfg.pretrain_corpus.empty()) cfg.pretrain_corpus = common.resolve(cfg.pretrain_corpus).string();
      if (!cfg.cpc_checkpoint.empty()) cfg.cpc_checkpoint = common.resolve(cfg.cpc_checkpoint).string();
      const fs::path out = common.resolve(train_out);
      fs::create_directories(out);
      {
        std::ofstream resolved(out / "config.json");
        resolved << nlohmann::json(cfg).dump(2) << '\n';
      }
      const auto records = run_experiment(cfg, out);
      const auto rows = summarize_records(records, cfg.ccc_mode);
      std::fputs(render_table(rows).c_str(), stdout);
    } else if (*evaluate_cmd) {
      const ExperimentConfig cfg = common.load_config();
      const TrainedModel model = TrainedModel::load(common.resolve(eval_ckpt));
      auto data = load_utterances(common.resolve(eval_manifest), eval_seconds.value_or(cfg.target_seconds), true);
      if (eval_split != "all") {
        std::erase_if(data, [&](const Utterance& u) { return u.split != eval_split; });
        if (data.size() < 2) throw std::invalid_argument("evaluate: fewer than 2 utterances in split '" + eval_split + "'");
      }
      const auto preds = model.predict(data);
      std::vector<std::array<double, 3>> p, y;
      for (const auto& pr : preds) {
        p.push_back(pr.pred);
        y.push_back(pr.label);
      }
      print_report(cpcser::evaluate(p, y));
      if (!eval_out.empty()) {
        std::ofstream out(common.resolve(eval_out));
        if (!out) throw std::runtime_error("evaluate: cannot write " + eval_out);
        for (const auto& pr : preds) {
          out << nlohmann::ordered_json{{"id", pr.id}, {"activation", pr.pred[0]}, {"valence", pr.pred[1]},
                                        {"dominance", pr.pred[2]}}
                     .dump()
              << '\n';
        }
      }
    } else if (*extract) {
      const ExperimentConfig cfg = common.load_config();
      if (ext_lfbe == !ext_ckpt.empty()) throw std::invalid_argument("extract-features: give exactly one of --checkpoint or --lfbe");
      const auto data = load_utterances(common.resolve(ext_manifest), ext_seconds.value_or(cfg.target_seconds), false);
      const fs::path out = common.resolve(ext_out);
      fs::create_directories(out);
      std::optional<CpcModel> cpc;
      if (!ext_lfbe) {
        const Checkpoint ck = load_checkpoint(common.resolve(ext_ckpt));
        if (!ck.config.contains("cpc")) throw CheckpointError("extract-features: checkpoint holds no CPC model");
        cpc.emplace(ck.config.at("cpc").get<CpcConfig>());
        restore_parameters(ck, cpc->parameters());
      }
      for (const auto& u : data) {
        Tensor f;
        if (cpc) {
          f = cpc->extract_features(u.clip);
        } else {
          AudioClip clip = u.clip;
          if (cfg.standardize_waveform) clip.samples = standardize(clip.samples);
          const LfbeFrames lf = compute_lfbe(clip, cfg.lfbe);
          f = Tensor::from_data({lf.frames, lf.bins}, lf.values);
        }
        save_feature_matrix(out / (u.id + ".f32"), f.size(0), f.size(1),
                            std::vector<double>(f.data().begin(), f.data().end()));
      }
      std::printf("wrote %zu feature matrices to %s\n", data.size(), out.string().c_str());
    } else if (*embed) {
      const ExperimentConfig cfg = common.load_config();
      const auto data = load_utterances(common.resolve(emb_manifest), emb_seconds.value_or(cfg.target_seconds), false);
      std::optional<CpcModel> cpc;
      if (!emb_ckpt.empty()) {
        const Checkpoint ck = load_checkpoint(common.resolve(emb_ckpt));
        if (!ck.config.contains("cpc")) throw CheckpointError("export-embeddings: checkpoint holds no CPC model");
        cpc.emplace(ck.config.at("cpc").get<CpcConfig>());
        restore_parameters(ck, cpc->parameters());
      } else {
        CpcConfig c = cfg.cpc;
        c.standardize_waveform = cfg.standardize_waveform;
        cpc.emplace(c, derive_seed(seed, 2));
      }
      const auto emb = utterance_embeddings(*cpc, data);
      write_embeddings_csv(common.resolve(emb_out), data, emb);
      std::vector<std::string> tags;
      for (const auto& u : data) tags.push_back(u.tag);
      std::set<std::string> distinct(tags.begin(), tags.end());
      std::printf("wrote %zu embeddings to %s\n", data.size(), common.resolve(emb_out).string().c_str());
      if (distinct.size() >= 2 && !distinct.contains("")) {
        std::printf("nearest-centroid purity %.4f\n", nearest_centroid_purity(emb, tags));
      }
    } else if (*report) {
      std::vector<ReportRow> rows;
      if (!rep_csv.empty() == !rep_records.empty()) throw std::invalid_argument("report: give exactly one of --records or --from-csv");
      if (!rep_csv.empty()) {
        rows = read_report_csv(common.resolve(rep_csv));
        if (rows.empty()) throw std::invalid_argument("report: " + rep_csv + " has no rows");
      } else {
        const auto records = load_run_records(common.resolve(rep_records));
        if (records.empty()) throw std::invalid_argument("report: no run records under " + rep_records);
        rows = summarize_records(records, rep_mode);
      }
      std::fputs(render_table(rows).c_str(), stdout);
      if (!rep_out.empty()) write_report_csv(common.resolve(rep_out), rows);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::fprintf(stderr, "cpcser: error: %s\n", msg.c_str());
    return 1;
  }
  return 0;
}
