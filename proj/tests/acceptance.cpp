// Acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance [--expected-fail N]... [out_dir]   (default out_dir: acceptance_out)
// Exits nonzero if a criterion fails that was not listed with --expected-fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include "cpcser/checkpoint.hpp"
#include "cpcser/embeddings.hpp"
#include "cpcser/harness.hpp"
#include "cpcser/metrics.hpp"
#include "gradient_suite.hpp"

using namespace cpcser;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Desk-scale settings shared by the experiment criteria.
ExperimentConfig desk_config() {
  ExperimentConfig cfg;
  cfg.epochs = 30;
  cfg.lr = 1e-3;
  cfg.target_seconds = 2.0;
  cfg.pretrain_steps = 150;
  cfg.pretrain_lr = 1e-3;
  cfg.cpc.encoder_channels = 32;
  cfg.cpc.latent_dim = 32;
  cfg.cpc.gru_hidden = 64;
  cfg.recognizer.model_dim = 128;
  cfg.recognizer.heads = 8;
  cfg.recognizer.attn_dim = 16;
  return cfg;
}

struct Corpora {
  std::vector<Utterance> labeled, pretrain;
};

const Corpora& corpora() {
  static const Corpora c = [] {
    SynthConfig sc;
    sc.count = 100;
    sc.min_seconds = 2.0;
    sc.max_seconds = 4.0;
    Corpora out;
    out.labeled = to_utterances(synth_corpus(sc, 100), 2.0);
    sc.count = 400;
    sc.split_scheme = "none";
    sc.id_prefix = "pre";
    out.pretrain = to_utterances(synth_corpus(sc, 200), 2.0);
    return out;
  }();
  return c;
}

// ---- 1 ----------------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  const auto cases = cpcser::testing::run_gradient_suite();
  const double elapsed = seconds_since(t0);
  double worst_ratio = 0.0;
  std::string worst;
  std::size_t failed = 0;
  for (const auto& c : cases) {
    if (!(c.error < c.tolerance)) ++failed;
    if (c.error / c.tolerance > worst_ratio) {
      worst_ratio = c.error / c.tolerance;
      worst = c.name + fmt(" %.2e (tol %.0e)", c.error, c.tolerance);
    }
  }
  return {failed == 0 && elapsed < 120.0,
          fmt("%zu checks, %zu over tolerance, closest: ", cases.size(), failed) + worst + fmt(", %.1f s", elapsed)};
}

// ---- 2 ----------------------------------------------------------------------

double brute_force_nce(const CpcModel& model, const Tensor& z, const Tensor& c, const CandidateTable& table) {
  std::map<std::string, Tensor> p;
  for (const auto& nt : model.parameters()) p.emplace(nt.name, nt.tensor);
  const auto& cfg = model.config();
  double total = 0.0;
  for (std::size_t m = 1; m <= cfg.horizon; ++m) {
    const Tensor& w = p.at("cpc.head." + std::to_string(m) + ".weight");
    const Tensor& b = p.at("cpc.head." + std::to_string(m) + ".bias");
    for (std::size_t t = 0; t < table.anchors; ++t) {
      std::vector<double> pred(cfg.latent_dim);
      for (std::size_t d = 0; d < cfg.latent_dim; ++d) {
        double s = b.at(0, d);
        for (std::size_t h = 0; h < cfg.gru_hidden; ++h) s += c.at(t, h) * w.at(h, d);
        pred[d] = s;
      }
      const auto row = table.step(m).subspan(t * table.width, table.width);
      std::vector<double> logits;
      for (std::size_t j : row) {
        double s = 0.0;
        for (std::size_t d = 0; d < cfg.latent_dim; ++d) s += pred[d] * z.at(j, d);
        logits.push_back(s / cfg.temperature);
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double se = 0.0;
      for (double l : logits) se += std::exp(l - mx);
      total -= logits[0] - mx - std::log(se);
    }
  }
  return total / static_cast<double>(table.anchors * cfg.horizon);
}

Verdict nce_oracle() {
  CpcConfig cfg;  // k = 12, 50 negatives
  cfg.encoder_channels = 8;
  cfg.latent_dim = 8;
  cfg.gru_hidden = 10;
  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const CpcModel model(cfg, 100 + trial);
    const std::size_t len = 60 + rng() % 60;
    const Tensor z = cpcser::testing::random_tensor({len, cfg.latent_dim}, rng, -1, 1, false);
    const Tensor c = cpcser::testing::random_tensor({len, cfg.gru_hidden}, rng, -1, 1, false);
    const CandidateTable table = sample_candidates(len, cfg.horizon, cfg.negatives, rng());
    worst = std::max(worst, std::abs(model.info_nce_loss(z, c, table).item() - brute_force_nce(model, z, c, table)));
  }
  // identical latent rows make every candidate logit equal
  const CpcModel model(cfg, 7);
  const std::size_t len = 80;
  std::vector<double> row(cfg.latent_dim), zs;
  for (auto& v : row) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (std::size_t t = 0; t < len; ++t) zs.insert(zs.end(), row.begin(), row.end());
  const Tensor z = Tensor::from_data({len, cfg.latent_dim}, zs);
  const Tensor c = cpcser::testing::random_tensor({len, cfg.gru_hidden}, rng, -1, 1, false);
  const double equal = model.info_nce_loss(z, c, 3).item();
  const double gap = std::abs(equal - std::log(51.0));
  return {worst <= 1e-10 && gap <= 1e-15,
          fmt("max |loss - oracle| %.2e over 10 random cases; equal logits give %.17g vs ln 51 = %.17g", worst, equal,
              std::log(51.0))};
}

// ---- 3 ----------------------------------------------------------------------

Verdict shapes() {
  const CpcModel model;
  std::vector<double> wave(160000);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 0.3);
  for (auto& v : wave) v = g(rng);
  const Tensor z = model.encode(wave);
  bool ok = z.size(0) == 998 && z.size(1) == 128;
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 425 + rng() % 40000;
    long len = static_cast<long>(n);
    for (std::size_t i = 0; i < model.config().strides.size(); ++i) {
      const long f = static_cast<long>(model.config().filter_sizes[i]);
      len = len < f ? 0 : (len - f) / static_cast<long>(model.config().strides[i]) + 1;
    }
    if (model.config().frames_for(n) != static_cast<std::size_t>(len)) ++mismatches;
  }
  // also check the actual encoder on a few of the lengths
  for (std::size_t n : {425ul, 586ul, 1999ul, 16001ul}) {
    if (model.encode(std::span<const double>(wave.data(), n)).size(0) != model.config().frames_for(n)) ++mismatches;
  }
  ok = ok && mismatches == 0;
  return {ok, fmt("160000 samples -> [%zu x %zu]; formula vs unrolled lengths: %zu mismatches in 24", z.size(0),
                  z.size(1), mismatches)};
}

// ---- 4 ----------------------------------------------------------------------

Verdict ccc_oracle() {
  const std::vector<double> a{1, 2, 3}, rev{3, 2, 1}, dbl{2, 4, 6};
  const double e1 = std::abs(ccc(a, a) - 1.0), e2 = std::abs(ccc(a, rev) + 1.0), e3 = std::abs(ccc(a, dbl) - 8.0 / 22.0);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::size_t violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng() % 60;
    const double mix = u(rng), scale = std::exp(2 * u(rng)), shift = 3 * u(rng);
    std::vector<double> x(n), y(n);
    for (std::size_t k = 0; k < n; ++k) {
      x[k] = g(rng);
      y[k] = shift + scale * (mix * x[k] + (1 - std::abs(mix)) * g(rng));
    }
    if (std::abs(ccc(x, y) - ccc(y, x)) > 1e-12) ++violations;
    if (std::abs(ccc(x, x) - 1.0) > 1e-12) ++violations;
    if (std::abs(ccc(x, y)) > std::abs(pearson(x, y)) + 1e-12) ++violations;
  }
  const double worst = std::max({e1, e2, e3});
  return {worst <= 1e-12 && violations == 0,
          fmt("hand values off by at most %.1e; %zu property violations on 1000 pairs", worst, violations)};
}

// ---- 5 ----------------------------------------------------------------------

Verdict attention_invariants() {
  std::mt19937_64 rng(5);
  double row_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t len = 1 + rng() % 60, din = 1 + rng() % 16, d = 1 + rng() % 8;
    const Tensor c = cpcser::testing::random_tensor({len, din}, rng, -3, 3, false);
    const Tensor a = attention_weights(c, cpcser::testing::random_tensor({din, d}, rng, -1, 1, false),
                                       cpcser::testing::random_tensor({din, d}, rng, -1, 1, false));
    for (std::size_t t = 0; t < len; ++t) {
      double s = 0.0;
      for (std::size_t k = 0; k < len; ++k) s += a.at(t, k);
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
  }
  RecognizerConfig rc = desk_config().recognizer;
  rc.input_dim = 64;
  const EmotionRecognizer rec(rc, 6);
  const Tensor f = cpcser::testing::random_tensor({200, 64}, rng, -1, 1, false);
  const EmotionPrediction base = rec.predict(f);
  std::vector<std::size_t> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  double perm_err = 0.0;
  std::size_t bit_identical = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> v(f.numel());
    for (std::size_t r = 0; r < 200; ++r) std::copy_n(f.data().begin() + perm[r] * 64, 64, v.begin() + r * 64);
    const EmotionPrediction p = rec.predict(Tensor::from_data({200, 64}, std::move(v)));
    const double e = std::max({std::abs(p.activation - base.activation), std::abs(p.valence - base.valence),
                               std::abs(p.dominance - base.dominance)});
    perm_err = std::max(perm_err, e);
    bit_identical += e == 0.0;
  }
  return {row_err <= 1e-12 && perm_err <= 1e-12,
          fmt("max |row sum - 1| %.1e; 50 permutations: max prediction change %.1e (%zu bit-identical, the rest differ "
              "by summation order)",
              row_err, perm_err, bit_identical)};
}

// ---- 6 ----------------------------------------------------------------------

Verdict cpc_learnability() {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.count = 64;
  sc.min_seconds = 10.0;
  sc.max_seconds = 10.0;
  sc.split_scheme = "none";
  std::vector<AudioClip> clips;
  for (auto& u : synth_corpus(sc, 6)) clips.push_back(std::move(u.clip));
  const double target = std::log(51.0) - 0.5;
  PretrainOptions o;
  o.steps = 300;
  o.batch_size = 8;
  o.lr = 1e-3;
  o.seed = 6;
  std::size_t hit = 0;
  double first = 0.0, last = 0.0;
  struct Stop {};
  o.on_step = [&](std::size_t step, double loss) {
    if (step == 1) first = loss;
    last = loss;
    if (loss < target) {
      hit = step;
      throw Stop{};
    }
  };
  try {
    pretrain_cpc(desk_config().cpc, clips, o);
  } catch (const Stop&) {
  }
  const double elapsed = seconds_since(t0);
  return {hit > 0 && elapsed < 600.0,
          hit > 0 ? fmt("infoNCE %.3f -> %.3f < ln 51 - 0.5 = %.3f at step %zu (10 s clips, batch 8), %.0f s", first, last,
                        target, hit, elapsed)
                  : fmt("infoNCE %.3f -> %.3f after 300 steps, target %.3f not reached, %.0f s", first, last, target,
                        elapsed)};
}

// ---- 7 ----------------------------------------------------------------------

struct ExperimentResult {
  std::map<std::string, std::vector<RunRecord>> by_setup;
  double seconds = 0.0;
};

ExperimentResult& experiment(const fs::path& out) {
  static ExperimentResult result;
  static bool done = false;
  if (done) return result;
  done = true;
  const auto t0 = Clock::now();
  const auto& data = corpora();
  fs::create_directories(out / "records");
  for (cpcser::Setup s : {cpcser::Setup::Sup, cpcser::Setup::JointCpc, cpcser::Setup::MiniCpc, cpcser::Setup::PreCpc}) {
    ExperimentConfig cfg = desk_config();
    cfg.setup = s;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      RunInputs in;
      in.labeled = &data.labeled;
      in.pretrain = &data.pretrain;
      in.plan = holdout_plan(data.labeled);
      in.seed = seed;
      const std::string tag = setup_name(s) + "_seed" + std::to_string(seed);
      in.out_dir = out / "runs" / tag;
      RunRecord r = run_setup(cfg, in);
      std::ofstream(out / "records" / (tag + ".json")) << nlohmann::json(r).dump(2) << '\n';
      result.by_setup[setup_name(s)].push_back(std::move(r));
    }
  }
  result.seconds = seconds_since(t0);
  return result;
}

Verdict directional(const fs::path& out) {
  const ExperimentResult& ex = experiment(out);
  std::vector<RunRecord> all;
  for (const auto& [name, rs] : ex.by_setup) all.insert(all.end(), rs.begin(), rs.end());
  const auto rows = summarize_records(all);
  write_report_csv(out / "report.csv", rows);
  std::printf("%s", render_table(rows).c_str());
  std::map<std::string, MeanStd> avg;
  for (const auto& r : rows) avg[r.method] = r.summary.avg;
  auto pooled = [&](const std::string& a, const std::string& b) {
    return std::sqrt((avg[a].std * avg[a].std + avg[b].std * avg[b].std) / 2.0);
  };
  const bool vs_sup = avg["preCPC"].mean >= avg["Sup"].mean - pooled("preCPC", "Sup");
  const bool vs_mini = avg["preCPC"].mean >= avg["miniCPC"].mean - pooled("preCPC", "miniCPC");
  std::size_t wins = 0;
  std::string per_seed;
  for (std::size_t i = 0; i < 5; ++i) {
    const double d = ex.by_setup.at("preCPC")[i].test.avg - ex.by_setup.at("Sup")[i].test.avg;
    wins += d > 0.0;
    per_seed += fmt("%s%+.3f", i ? " " : "", d);
  }
  return {vs_sup && vs_mini && wins >= 4 && ex.seconds < 3600.0,
          fmt("CCC_avg preCPC %.3f, Sup %.3f, miniCPC %.3f, jointCPC %.3f; preCPC - Sup per seed [%s], %zu/5 > 0; "
              "%.0f s for all four setups",
              avg["preCPC"].mean, avg["Sup"].mean, avg["miniCPC"].mean, avg["jointCPC"].mean, per_seed.c_str(), wins,
              ex.seconds)};
}

// ---- 8 ----------------------------------------------------------------------

Verdict embedding_separability(const fs::path& out) {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.count = 80;
  sc.families = 2;
  sc.split_scheme = "none";
  sc.min_seconds = 2.0;
  sc.max_seconds = 2.0;
  sc.id_prefix = "fam";
  const auto data = to_utterances(synth_corpus(sc, 11), 2.0);
  std::vector<std::string> tags;
  std::vector<AudioClip> clips;
  for (const auto& u : data) {
    tags.push_back(u.tag);
    clips.push_back(u.clip);
  }
  const CpcConfig cfg = desk_config().cpc;
  PretrainOptions o;
  o.steps = 150;
  o.batch_size = 8;
  o.lr = 1e-3;
  o.seed = 5;
  const CpcModel init(cfg, derive_seed(o.seed, 2));  // the same initialization pretrain_cpc starts from
  const auto before = utterance_embeddings(init, data);
  const auto trained = pretrain_cpc(cfg, clips, o);
  const auto after = utterance_embeddings(trained.model, data);
  write_embeddings_csv(out / "embeddings_init.csv", data, before);
  write_embeddings_csv(out / "embeddings_pretrained.csv", data, after);
  const double p0 = nearest_centroid_purity(before, tags), p1 = nearest_centroid_purity(after, tags);
  return {p1 > 0.9 && p0 <= 0.7,
          fmt("nearest-centroid purity %.3f after 150 pre-training steps vs %.3f at the same random init (80 clips, "
              "final infoNCE %.3f), %.0f s",
              p1, p0, trained.losses.back(), seconds_since(t0))};
}

// ---- 9 ----------------------------------------------------------------------

Verdict determinism(const fs::path& out) {
  const ExperimentResult& ex = experiment(out);
  const auto& data = corpora();
  std::size_t mismatched = 0;
  std::string checked;
  for (cpcser::Setup s : {cpcser::Setup::Sup, cpcser::Setup::PreCpc}) {
    ExperimentConfig cfg = desk_config();
    cfg.setup = s;
    RunInputs in;
    in.labeled = &data.labeled;
    in.pretrain = &data.pretrain;
    in.plan = holdout_plan(data.labeled);
    in.seed = 0;
    nlohmann::json again = run_setup(cfg, in);
    nlohmann::json first = ex.by_setup.at(setup_name(s))[0];
    again.erase("checkpoint");
    first.erase("checkpoint");
    mismatched += again.dump() != first.dump();
    checked += (checked.empty() ? "" : ", ") + setup_name(s);
  }
  // save -> load -> save
  std::size_t files = 0, differing = 0;
  const fs::path dir = out / "roundtrip";
  fs::create_directories(dir);
  const fs::path pre = out / "runs" / "preCPC_seed0";
  for (const fs::path& src : {pre / "best.ckpt", pre / "cpc_stage1.ckpt", out / "runs" / "Sup_seed0" / "best.ckpt"}) {
    const Checkpoint ck = load_checkpoint(src);
    const fs::path a = dir / (src.parent_path().filename().string() + "_" + src.filename().string());
    save_checkpoint(a, ck.config, ck.tensors);
    const Checkpoint again = load_checkpoint(a);
    save_checkpoint(a.string() + ".2", again.config, again.tensors);
    differing += file_bytes(src) != file_bytes(a) || file_bytes(a) != file_bytes(a.string() + ".2");
    ++files;
  }
  const CpcModel m = CpcModel::load(pre / "cpc_stage1.ckpt");
  m.save(dir / "model.ckpt");
  differing += file_bytes(dir / "model.ckpt") != file_bytes(pre / "cpc_stage1.ckpt");
  ++files;
  return {mismatched == 0 && differing == 0,
          fmt("re-run of seed 0 (%s) bit-identical: %s; %zu checkpoints save -> load -> save, %zu differ",
              checked.c_str(), mismatched == 0 ? "yes" : "no", files, differing)};
}

// ---- 10 ---------------------------------------------------------------------

Verdict hygiene(const fs::path& out) {
  const ExperimentResult& ex = experiment(out);
  const auto& data = corpora();
  std::size_t leaks = 0, argmin_bad = 0, runs = 0;
  std::set<std::string> pretrain_ids;
  for (const auto& u : data.pretrain) pretrain_ids.insert(u.id);
  for (const auto& [name, rs] : ex.by_setup) {
    for (const auto& r : rs) {
      ++runs;
      std::set<std::string> seen;
      for (const auto* ids : {&r.train_ids, &r.val_ids, &r.test_ids}) {
        for (const auto& id : *ids) leaks += !seen.insert(id).second + pretrain_ids.contains(id);
      }
      std::size_t argmin = 0;
      for (std::size_t e = 1; e < r.curve.size(); ++e) {
        if (r.curve[e].val_loss < r.curve[argmin].val_loss) argmin = e;
      }
      argmin_bad += argmin != r.best_epoch || r.val_loss != r.curve[argmin].val_loss;
    }
  }
  // 5-fold cross-validation over the labeled corpus
  ExperimentConfig cfg = desk_config();
  cfg.cv_folds = 5;
  cfg.epochs = 2;
  const auto folds = cross_validate(cfg, data.labeled, nullptr, 0, {});
  std::map<std::string, int> test_count;
  for (const auto& r : folds) {
    for (const auto& id : r.test_ids) ++test_count[id];
    std::set<std::string> seen;
    for (const auto* ids : {&r.train_ids, &r.val_ids, &r.test_ids}) {
      for (const auto& id : *ids) leaks += !seen.insert(id).second;
    }
  }
  std::size_t bad_fold = folds.size() != 5;
  for (const auto& u : data.labeled) bad_fold += test_count[u.id] != 1;
  // the harness itself refuses an overlapping plan
  bool refused = false;
  SplitPlan plan = holdout_plan(data.labeled);
  plan.val.push_back(plan.test.front());
  try {
    check_disjoint(data.labeled, plan);
  } catch (const std::logic_error&) {
    refused = true;
  }
  return {leaks == 0 && argmin_bad == 0 && bad_fold == 0 && refused,
          fmt("%zu runs: %zu id leaks, %zu best epochs off the val-loss argmin; 5-fold CV over %zu utterances: %zu "
              "not in exactly one test fold; overlapping plan rejected: %s",
              runs, leaks, argmin_bad, data.labeled.size(), bad_fold, refused ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_out";
  std::set<std::size_t> expected_fail;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--expected-fail" && i + 1 < argc) {
      expected_fail.insert(std::stoul(argv[++i]));
    } else {
      out = arg;
    }
  }
  fs::create_directories(out);
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite},
      {"infoNCE oracle", nce_oracle},
      {"encoder shapes", shapes},
      {"CCC oracle", ccc_oracle},
      {"attention invariants", attention_invariants},
      {"CPC learnability", cpc_learnability},
      {"directional result", [&] { return directional(out); }},
      {"embedding separability", [&] { return embedding_separability(out); }},
      {"determinism and persistence", [&] { return determinism(out); }},
      {"harness hygiene", [&] { return hygiene(out); }},
  };
  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    unexpected += !v.pass && !expected_fail.contains(i + 1);
    std::printf("%s %zu %s: %s%s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), v.detail.c_str(),
                !v.pass && expected_fail.contains(i + 1) ? " [known failure]" : "");
    std::fflush(stdout);
  }
  return unexpected == 0 ? 0 : 1;
}
