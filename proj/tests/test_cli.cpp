#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "cpcser_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Result run(const std::string& args) {
  const fs::path out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
  const std::string cmd = std::string(CPCSER_BIN) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::set<std::string> long_flags(const std::string& text) {
  std::set<std::string> flags;
  const std::regex re("--[a-z][a-z-]*");
  for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator(); ++it) {
    flags.insert(it->str());
  }
  return flags;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const char* const kSubcommands[] = {"synth-corpus", "pretrain", "train", "evaluate",
                                    "extract-features", "export-embeddings", "report"};

void write_tiny_config(const fs::path& path) {
  std::ofstream out(path);
  out << R"({
  "epochs": 2, "lr": 0.003, "batch_size": 4, "target_seconds": 0.5,
  "pretrain_steps": 2, "pretrain_batch_size": 2,
  "cpc": {"encoder_channels": 4, "latent_dim": 4, "gru_hidden": 6, "horizon": 3, "negatives": 5},
  "recognizer": {"heads": 2, "attn_dim": 4, "model_dim": 8, "dense_hidden": 6}
})";
}

}  // namespace

TEST(Cli, EveryHelpFlagIsDocumentedInReadme) {
  const std::string readme = slurp(CPCSER_README);
  ASSERT_FALSE(readme.empty());
  for (const char* sub : kSubcommands) {
    const Result r = run(std::string(sub) + " --help");
    ASSERT_EQ(r.code, 0) << sub;
    const std::string header = std::string("### `cpcser ") + sub + "`";
    const auto begin = readme.find(header);
    ASSERT_NE(begin, std::string::npos) << "README lacks " << header;
    const auto end = readme.find("\n### ", begin + header.size());
    const std::string section = readme.substr(begin, end == std::string::npos ? std::string::npos : end - begin);
    const auto documented = long_flags(section);
    for (const auto& flag : long_flags(r.out)) {
      if (flag == "--help") continue;
      EXPECT_TRUE(documented.contains(flag)) << sub << " " << flag << " missing from README";
    }
    for (const auto& flag : documented) {
      EXPECT_TRUE(long_flags(r.out).contains(flag)) << sub << " README documents unknown " << flag;
    }
  }
}

TEST(Cli, UnknownFlagFailsWithOneLine) {
  const Result r = run("train --no-such-flag");
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(count_lines(r.err), 1u) << r.err;
  EXPECT_EQ(r.err.rfind("cpcser: error:", 0), 0u) << r.err;
  EXPECT_TRUE(r.out.empty());
}

TEST(Cli, MissingRequiredAndBadValues) {
  const Result a = run("pretrain");
  EXPECT_EQ(a.code, 2);
  EXPECT_EQ(count_lines(a.err), 1u) << a.err;
  const Result b = run("report --records " + (scratch() / "absent").string());
  EXPECT_EQ(b.code, 1);
  EXPECT_EQ(count_lines(b.err), 1u) << b.err;
  const Result c = run("train --setup nonsense --workdir " + scratch().string());
  EXPECT_NE(c.code, 0);
  EXPECT_EQ(count_lines(c.err), 1u) << c.err;
}

TEST(Cli, ExportEmbeddingsIsDeterministic) {
  const fs::path dir = scratch() / "emb";
  fs::create_directories(dir);
  write_tiny_config(dir / "tiny.json");
  ASSERT_EQ(run("synth-corpus --workdir " + dir.string() +
                " --out fam --count 8 --families 2 --min-seconds 0.5 --max-seconds 0.5 --seed 3")
                .code,
            0);
  const std::string common = "export-embeddings --workdir " + dir.string() +
                             " --config tiny.json --manifest fam/manifest.jsonl --target-seconds 0.5";
  const Result a = run(common + " --seed 5 --out a.csv");
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(run(common + " --seed 5 --out b.csv").code, 0);
  const std::string csv = slurp(dir / "a.csv");
  EXPECT_EQ(csv, slurp(dir / "b.csv"));

  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "id,e0,e1,e2,e3,e4,e5,activation,valence,dominance,tag");
  std::size_t rows = 0;
  for (std::string line; std::getline(lines, line);) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 10) << line;
  }
  EXPECT_EQ(rows, 8u);
  EXPECT_NE(a.out.find("purity"), std::string::npos) << a.out;
  ASSERT_EQ(run(common + " --seed 6 --out c.csv").code, 0);
  EXPECT_NE(csv, slurp(dir / "c.csv"));
}

TEST(Cli, TrainEvaluateReportRoundTrip) {
  const fs::path dir = scratch() / "train";
  fs::create_directories(dir);
  write_tiny_config(dir / "tiny.json");
  ASSERT_EQ(run("synth-corpus --workdir " + dir.string() + " --out lab --count 20 --min-seconds 0.5 --max-seconds 0.5")
                .code,
            0);
  const Result t = run("train --workdir " + dir.string() +
                       " --config tiny.json --setup Sup --label-corpus lab/manifest.jsonl --seed 1 --out exp");
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("Sup"), std::string::npos);
  ASSERT_TRUE(fs::exists(dir / "exp" / "config.json"));
  ASSERT_TRUE(fs::exists(dir / "exp" / "records" / "Sup_seed1.json"));

  const Result r = run("report --workdir " + dir.string() + " --records exp --out report.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  const Result back = run("report --workdir " + dir.string() + " --from-csv report.csv");
  ASSERT_EQ(back.code, 0) << back.err;
  EXPECT_EQ(r.out, back.out);

  const Result e = run("evaluate --workdir " + dir.string() +
                       " --checkpoint exp/runs/Sup_seed1/best.ckpt --manifest lab/manifest.jsonl --target-seconds 0.5"
                       " --out preds.jsonl");
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(count_lines(slurp(dir / "preds.jsonl")), 3u);
  // the report row and evaluate agree on the test CCC to three decimals
  std::smatch m;
  ASSERT_TRUE(std::regex_search(e.out, m, std::regex("avg (-?[0-9]*\\.[0-9]{3})"))) << e.out;
  const std::string eval_avg = m[1];
  EXPECT_NE(r.out.find(eval_avg), std::string::npos) << r.out << " vs " << e.out;
}

TEST(Cli, ExtractFeaturesWritesMatrices) {
  const fs::path dir = scratch() / "feat";
  fs::create_directories(dir);
  ASSERT_EQ(run("synth-corpus --workdir " + dir.string() + " --out c --count 3 --min-seconds 0.5 --max-seconds 0.5"
                " --split-scheme none --unlabeled")
                .code,
            0);
  const Result r = run("extract-features --workdir " + dir.string() +
                       " --lfbe --manifest c/manifest.jsonl --out f --target-seconds 0.5");
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir / "f")) n += e.path().extension() == ".f32";
  EXPECT_EQ(n, 3u);
  const Result both = run("extract-features --workdir " + dir.string() +
                          " --lfbe --checkpoint x.ckpt --manifest c/manifest.jsonl");
  EXPECT_NE(both.code, 0);
}
