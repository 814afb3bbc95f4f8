#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "plate/cli.hpp"
#include "plate/digest.hpp"

using namespace plate;
namespace fs = std::filesystem;

namespace {

struct Invocation {
  int code;
  std::string out, err;
};

Invocation plate_run(std::vector<std::string> args) {
  args.insert(args.begin(), "plate");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(std::ifstream(p)); }

// One small corpus and teacher shared by every test of the suite.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "plate_cli_suite";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const std::string config = (dir_ / "small.json").string();
    std::ofstream(config) << R"({"synth": {"min_sentences": 3, "max_sentences": 4, "min_words": 3, "max_words": 4,
                                   "vocab_size": 16, "markers": 2, "key_sentences": 1},
                                 "model": {"d_model": 16, "n_heads": 2, "ffn_dim": 32, "max_seq_len": 40},
                                 "train": {"steps": 12, "warmup_steps": 3, "batch_tokens": 200},
                                 "decode": {"beam_size": 2, "max_length": 8}})";
    ASSERT_EQ(plate_run({"synth", "--config", config, "--docs", "30", "--valid-docs", "4", "--test-docs", "4", "--out",
                         (dir_ / "data").string()})
                  .code,
              0);
    ASSERT_EQ(plate_run({"train", "--config", config, "--corpus", path("data/train.jsonl"), "--valid",
                         path("data/valid.jsonl"), "--out", path("teacher.bin")})
                  .code,
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string path(const std::string& rel) { return (dir_ / rel).string(); }
  static std::string config() { return path("small.json"); }

  static fs::path dir_;
};

fs::path CliTest::dir_;

}  // namespace

TEST_F(CliTest, SynthWritesSplitsAndManifest) {
  EXPECT_EQ(load_jsonl(path("data/train.jsonl")).size(), 30u);
  EXPECT_EQ(load_jsonl(path("data/test.jsonl")).size(), 4u);
  const auto m = read_json(path("data/manifest.json"));
  EXPECT_EQ(m["command"], "synth");
  EXPECT_EQ(m["config"]["synth"]["docs"], 30);
  EXPECT_EQ(m["config"]["synth"]["vocab_size"], 16);  // from the config file
  EXPECT_EQ(m["outputs"]["out"]["sha256"], cli::directory_digest(path("data")));
}

TEST_F(CliTest, FlagsOverrideTheConfigFile) {
  const auto r = plate_run({"train", "--config", config(), "--corpus", path("data/train.jsonl"), "--steps", "4",
                            "--warmup", "2", "--d-model", "8", "--out", path("override.bin")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = read_json(path("override.bin.manifest.json"));
  EXPECT_EQ(m["config"]["train"]["steps"], 4);
  EXPECT_EQ(m["config"]["train"]["batch_tokens"], 200);
  EXPECT_EQ(m["config"]["model"]["d_model"], 8);
  EXPECT_EQ(m["config"]["model"]["n_heads"], 2);
  EXPECT_EQ(load_model(path("override.bin")).config.d_model, 8u);
  EXPECT_EQ(m["inputs"]["corpus"]["sha256"], file_digest(path("data/train.jsonl")));
  EXPECT_EQ(m["outputs"]["out"]["sha256"], file_digest(path("override.bin")));
}

TEST_F(CliTest, UsageErrors) {
  auto r = plate_run({"pseudo", "--model", path("teacher.bin"), "--bogus", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos);
  r = plate_run({"pseudo", "--model", path("teacher.bin"), "--out", path("x.jsonl")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--corpus"), std::string::npos);
  r = plate_run({"pseudo", "--model", path("teacher.bin"), "--corpus", path("data/train.jsonl"), "--lambda", "2",
                 "--lambda-range", "1", "2", "--out", path("x.jsonl")});
  EXPECT_EQ(r.code, 2);
  r = plate_run({"frobnicate"});
  EXPECT_NE(r.code, 0);
  r = plate_run({});
  EXPECT_NE(r.code, 0);
  r = plate_run({"pseudo", "--model", path("missing.bin"), "--corpus", path("data/train.jsonl"), "--out",
                 path("x.jsonl")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing.bin"), std::string::npos);
  std::ofstream(path("bad.json")) << R"({"trian": {}})";
  r = plate_run({"synth", "--config", path("bad.json"), "--out", path("bad")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("trian"), std::string::npos);
}

TEST_F(CliTest, PseudoWithFixedLambda) {
  const auto r = plate_run({"pseudo", "--config", config(), "--model", path("teacher.bin"), "--corpus",
                            path("data/train.jsonl"), "--lambda", "2.0", "--out", path("p2.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto records = load_pseudo_jsonl(path("p2.jsonl"));
  ASSERT_EQ(records.size(), 30u);
  for (const auto& rec : records) EXPECT_EQ(rec.lambda, AttentionTemperatures::uniform(2.0));
  EXPECT_EQ(records.front().teacher_digest, file_digest(path("teacher.bin")));
}

TEST_F(CliTest, PseudoWithLambdaRangeAndOverrides) {
  const auto r = plate_run({"pseudo", "--config", config(), "--model", path("teacher.bin"), "--corpus",
                            path("data/train.jsonl"), "--lambda-range", "1.0", "2.0", "--lambda-enc", "1.0", "--out",
                            path("pr.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto records = load_pseudo_jsonl(path("pr.jsonl"));
  bool varied = false;
  for (const auto& rec : records) {
    EXPECT_EQ(rec.lambda.enc, 1.0);
    EXPECT_GE(rec.lambda.cross, 1.0);
    EXPECT_LE(rec.lambda.cross, 2.0);
    EXPECT_EQ(rec.lambda.dec, rec.lambda.cross);
    varied = varied || rec.lambda.cross != records.front().lambda.cross;
  }
  EXPECT_TRUE(varied);
}

TEST_F(CliTest, DistillEvalAnalyzeAndAttentionStats) {
  ASSERT_EQ(plate_run({"pseudo", "--config", config(), "--model", path("teacher.bin"), "--corpus",
                       path("data/train.jsonl"), "--lambda", "1.5", "--dump-attention", path("attn"), "--out",
                       path("p15.jsonl")})
                .code,
            0);
  std::ofstream(path("student.json")) << R"({"decoder_layers": 1})";
  auto r = plate_run({"distill", "--config", config(), "--teacher", path("teacher.bin"), "--student-config",
                      path("student.json"), "--init", "maximally_spaced", "--pseudo", path("p15.jsonl"), "--out",
                      path("student.bin")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_model(path("student.bin")).config.decoder_layers, 1u);

  r = plate_run({"eval", "--config", config(), "--model", path("student.bin"), "--corpus", path("data/test.jsonl"),
                 "--rouge-mode", "limited_recall", "--report", path("eval.json"), "--outputs", path("out.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto e = read_json(path("eval.json"));
  EXPECT_EQ(e["rouge"]["mode"], "limited_recall");
  EXPECT_EQ(e["documents"], 4);
  EXPECT_EQ(load_jsonl(path("out.jsonl")).size(), 4u);

  r = plate_run({"analyze", "--system", path("p15.jsonl"), "--corpus", path("data/train.jsonl"), "--attn",
                 path("attn"), "--report", path("analysis.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = read_json(path("analysis.json"));
  for (const char* key : {"avg_length", "median_length", "novel_ngrams", "copied_span_fraction", "leading_bias",
                          "attention"}) {
    EXPECT_TRUE(a.contains(key)) << key;
  }
  for (const char* n : {"1", "2", "3", "4"}) EXPECT_TRUE(a["novel_ngrams"].contains(n)) << n;

  r = plate_run({"attn-stats", "--attn", path("attn"), "--threshold", "0.15", "--bins", "5", "--csv",
                 path("hist.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream csv(path("hist.csv"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 6u);
}

TEST_F(CliTest, ReplayReproducesEveryOutput) {
  ASSERT_EQ(plate_run({"pseudo", "--config", config(), "--model", path("teacher.bin"), "--corpus",
                       path("data/train.jsonl"), "--lambda-range", "1", "2", "--sampler", "nucleus", "--top-p", "0.9",
                       "--dump-attention", path("rattn"), "--out", path("rp.jsonl")})
                .code,
            0);
  for (const auto& manifest : {path("data/manifest.json"), path("teacher.bin.manifest.json"),
                               path("rp.jsonl.manifest.json")}) {
    const auto r = plate_run({"replay", "--manifest", manifest, "--out-dir", path("replayed")});
    EXPECT_EQ(r.code, 0) << manifest << '\n' << r.out << r.err;
    EXPECT_EQ(r.out.find("DIFFERS"), std::string::npos);
  }
  EXPECT_EQ(file_digest(path("replayed/teacher.bin")), file_digest(path("teacher.bin")));
}

TEST_F(CliTest, ReplayRefusesChangedInputs) {
  fs::copy_file(path("data/train.jsonl"), path("copy.jsonl"), fs::copy_options::overwrite_existing);
  ASSERT_EQ(plate_run({"pseudo", "--config", config(), "--model", path("teacher.bin"), "--corpus", path("copy.jsonl"),
                       "--out", path("pc.jsonl")})
                .code,
            0);
  std::ofstream(path("copy.jsonl"), std::ios::app) << "\n";
  EXPECT_EQ(plate_run({"replay", "--manifest", path("pc.jsonl.manifest.json")}).code, 1);
}
