#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tabret/eval.hpp"
#include "tabret/io.hpp"
#include "tabret_cli/commands.hpp"

namespace tabret {
namespace {

namespace fs = std::filesystem;
using cli::ExitCode;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("tabret_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(std::vector<std::string> args) const {
    args.insert(args.begin(), "tabret");
    args.insert(args.begin() + 1, {"--log-level", "off"});
    return cli::run(args);
  }

  void synth(std::size_t tables = 40) const {
    ASSERT_EQ(run({"--seed", "3", "synth", "--out-dir", path("data"), "--tables", std::to_string(tables),
                   "--vocab", "300"}),
              ExitCode::kOk);
  }

  fs::path dir_;
};

TEST_F(CliTest, FullPipeline) {
  synth();
  ASSERT_EQ(run({"ingest", "--input", path("data/tables.jsonl"), "--out", path("corpus.jsonl")}), ExitCode::kOk);
  EXPECT_TRUE(fs::exists(path("corpus.jsonl.mapping.json")));
  ASSERT_EQ(run({"--seed", "3", "train", "--corpus", path("corpus.jsonl"), "--train", path("data/train.jsonl"),
                 "--dev", path("data/dev.jsonl"), "--out", path("model.ckpt"), "--history", path("history.jsonl"),
                 "--dim", "16", "--projection-dim", "16", "--epochs", "2", "--lr", "0.05", "--batch-size", "16"}),
            ExitCode::kOk);
  ASSERT_EQ(run({"build-index", "--corpus", path("corpus.jsonl"), "--checkpoint", path("model.ckpt"), "--out",
                 path("index.bin")}),
            ExitCode::kOk);
  ASSERT_EQ(run({"retrieve", "--index", path("index.bin"), "--checkpoint", path("model.ckpt"), "--questions",
                 path("data/test.jsonl"), "--out", path("rankings.jsonl"), "--k", "5"}),
            ExitCode::kOk);
  ASSERT_EQ(run({"eval", "--index", path("index.bin"), "--checkpoint", path("model.ckpt"), "--questions",
                 path("data/test.jsonl"), "--mapping", path("corpus.jsonl.mapping.json"), "--k", "1,5,20", "--out",
                 path("eval.json")}),
            ExitCode::kOk);
  const EvalReport r = eval_report_from_json(read_text_file(path("eval.json")));
  EXPECT_EQ(r.ks, (std::vector<std::size_t>{1, 5, 20}));
  EXPECT_LE(r.recall.at(1), r.recall.at(5));
  EXPECT_LE(r.recall.at(5), r.recall.at(20));
  const auto rankings = load_rankings(path("rankings.jsonl"));
  EXPECT_EQ(rankings.size(), load_questions(path("data/test.jsonl")).size());
  for (const auto& rk : rankings) EXPECT_EQ(rk.ranking.size(), 5u);

  EXPECT_EQ(run({"bench", "--index", path("index.bin"), "--checkpoint", path("model.ckpt"), "--questions",
                 path("data/test.jsonl"), "--repeats", "1", "--warmup", "0", "--out", path("latency.json")}),
            ExitCode::kOk);
  EXPECT_NE(read_text_file(path("latency.json")).find("p95_ms"), std::string::npos);
}

TEST_F(CliTest, FingerprintMismatchExitsThree) {
  synth(10);
  ASSERT_EQ(run({"ingest", "--input", path("data/tables.jsonl"), "--out", path("corpus.jsonl")}), ExitCode::kOk);
  ASSERT_EQ(run({"--seed", "1", "build-index", "--corpus", path("corpus.jsonl"), "--out", path("index.bin")}),
            ExitCode::kOk);
  EXPECT_EQ(run({"--seed", "2", "retrieve", "--index", path("index.bin"), "--questions", path("data/test.jsonl"),
                 "--out", path("r.jsonl")}),
            ExitCode::kFingerprintMismatch);
  EXPECT_EQ(run({"--seed", "1", "retrieve", "--index", path("index.bin"), "--questions", path("data/test.jsonl"),
                 "--out", path("r.jsonl")}),
            ExitCode::kOk);
}

TEST_F(CliTest, DuplicateIdExitsTwo) {
  std::ofstream(path("dup.jsonl")) << "{\"id\":\"x\",\"headers\":[\"a\"],\"rows\":[]}\n"
                                      "{\"id\":\"x\",\"headers\":[\"b\"],\"rows\":[]}\n";
  EXPECT_EQ(run({"ingest", "--input", path("dup.jsonl"), "--out", path("c.jsonl")}), ExitCode::kValidationFailure);
}

TEST_F(CliTest, MissingInputExitsOne) {
  EXPECT_EQ(run({"ingest", "--input", path("absent.jsonl"), "--out", path("c.jsonl")}), ExitCode::kIoFailure);
}

TEST_F(CliTest, IngestIsIdempotent) {
  synth(30);
  ASSERT_EQ(run({"ingest", "--input", path("data/tables.jsonl"), "--out", path("c1.jsonl")}), ExitCode::kOk);
  ASSERT_EQ(run({"ingest", "--input", path("c1.jsonl"), "--out", path("c2.jsonl")}), ExitCode::kOk);
  EXPECT_EQ(read_text_file(path("c1.jsonl")), read_text_file(path("c2.jsonl")));
  EXPECT_EQ(read_text_file(path("c1.jsonl.mapping.json")), read_text_file(path("c2.jsonl.mapping.json")));
}

TEST_F(CliTest, ConfigFileSuppliesDefaultsAndRejectsUnknownKeys) {
  synth(10);
  std::ofstream(path("ok.toml")) << "seed = 1\n";
  ASSERT_EQ(run({"--config", path("ok.toml"), "ingest", "--input", path("data/tables.jsonl"), "--out",
                 path("c.jsonl")}),
            ExitCode::kOk);
  std::ofstream(path("bad.toml")) << "no_such_flag = 3\n";
  EXPECT_EQ(run({"--config", path("bad.toml"), "ingest", "--input", path("data/tables.jsonl"), "--out",
                 path("c.jsonl")}),
            ExitCode::kValidationFailure);
}

TEST_F(CliTest, CheckpointExcludesPipelineFlags) {
  synth(10);
  ASSERT_EQ(run({"ingest", "--input", path("data/tables.jsonl"), "--out", path("c.jsonl")}), ExitCode::kOk);
  ASSERT_EQ(run({"train", "--corpus", path("c.jsonl"), "--train", path("data/train.jsonl"), "--dev",
                 path("data/dev.jsonl"), "--out", path("m.ckpt"), "--epochs", "0", "--dim", "8"}),
            ExitCode::kOk);
  EXPECT_EQ(run({"build-index", "--corpus", path("c.jsonl"), "--checkpoint", path("m.ckpt"), "--dim", "16",
                 "--out", path("i.bin")}),
            ExitCode::kValidationFailure);
}

TEST_F(CliTest, BadFlagValuesExitTwo) {
  EXPECT_EQ(run({"synth"}), ExitCode::kValidationFailure);
  EXPECT_EQ(run({"no-such-command"}), ExitCode::kValidationFailure);
  synth(10);
  ASSERT_EQ(run({"ingest", "--input", path("data/tables.jsonl"), "--out", path("c.jsonl")}), ExitCode::kOk);
  EXPECT_EQ(run({"build-index", "--corpus", path("c.jsonl"), "--out", path("i.bin"), "--mode", "sideways"}),
            ExitCode::kValidationFailure);
  EXPECT_EQ(run({"eval", "--corpus", path("c.jsonl"), "--questions", path("data/test.jsonl"), "--k", "0"}),
            ExitCode::kValidationFailure);
}

TEST_F(CliTest, ExplainWritesCoherenceJson) {
  synth(10);
  ASSERT_EQ(run({"ingest", "--input", path("data/tables.jsonl"), "--out", path("c.jsonl")}), ExitCode::kOk);
  const auto tables = load_corpus(path("c.jsonl"));
  ASSERT_EQ(run({"explain", "--corpus", path("c.jsonl"), "--table", tables.front().id, "--question",
                 "which team is it", "--out", path("coh.json")}),
            ExitCode::kOk);
  const std::string text = read_text_file(path("coh.json"));
  EXPECT_NE(text.find("tabret.coherence/1"), std::string::npos);
  EXPECT_NE(text.find("i2t"), std::string::npos);
}

}  // namespace
}  // namespace tabret
