#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome fal_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = fal::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Body lines of a table file, metadata stripped.
std::vector<std::string> rows(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("fal_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string config(const std::string& model_extra = "") {
    const fs::path p = dir_ / "run.yaml";
    std::ofstream(p) << "model:\n  variant: fal\n  n_layers: 3\n  hidden: 16\n  n_heads: 2\n  seq_len: 16\n"
                     << model_extra
                     << "train:\n  steps: 6\n  batch_size: 2\n  eval_interval: 3\n  eval_batches: 1\n"
                        "  warmup_steps: 2\n  lr: 0.001\n"
                        "data:\n  synthetic_bytes: 4000\n"
                        "analysis:\n  batch_size: 2\n  eval_batches: 1\n  plan: [all_connect]\n";
    return p.string();
  }

  fs::path dir_;
};

TEST_F(CliTest, TrainWritesCheckpointAndHistory) {
  const Outcome r = fal_run({"train", "--config", config(), "--out", (dir_ / "a").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "a" / "model.ckpt"));
  const auto hist = rows(dir_ / "a" / "history.csv");
  ASSERT_FALSE(hist.empty());
  EXPECT_EQ(hist.front(), "step,split,loss,ppl,lr");
  const std::string text = slurp(dir_ / "a" / "history.csv");
  EXPECT_NE(text.find("# config_hash: "), std::string::npos);
  EXPECT_NE(text.find("# tool: fal "), std::string::npos);
  EXPECT_NE(text.find("# seed: 0"), std::string::npos);
}

TEST_F(CliTest, UnknownVariantIsConfigError) {
  const std::string cfg = dir_ / "bad.yaml";
  std::ofstream(cfg) << "model:\n  variant: FOO\n";
  const Outcome r = fal_run({"train", "--config", cfg, "--out", dir_.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("model.variant"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir_ / "model.ckpt"));
}

TEST_F(CliTest, UnknownKeyAndBadFlagsAreConfigErrors) {
  const std::string cfg = dir_ / "bad.yaml";
  std::ofstream(cfg) << "train:\n  learning_rate: 0.1\n";
  Outcome r = fal_run({"train", "--config", cfg});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos) << r.err;
  EXPECT_EQ(fal_run({"train", "--precision", "16"}).code, 1);
  EXPECT_EQ(fal_run({"simulate", "--shards", "2,x"}).code, 1);
  EXPECT_EQ(fal_run({"frobnicate"}).code, 1);
  EXPECT_EQ(fal_run({}).code, 1);
}

TEST_F(CliTest, MissingFilesAreIoErrors) {
  EXPECT_EQ(fal_run({"train", "--config", (dir_ / "absent.yaml").string()}).code, 3);
  const Outcome r = fal_run({"eval", "--config", config(), "--checkpoint", (dir_ / "absent.ckpt").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("absent.ckpt"), std::string::npos);
  EXPECT_EQ(fal_run({"ablate", "--config", config()}).code, 3);
}

TEST_F(CliTest, TrainingIsReproducible) {
  const std::string cfg = config();
  ASSERT_EQ(fal_run({"train", "--config", cfg, "--out", (dir_ / "a").string()}).code, 0);
  ASSERT_EQ(fal_run({"train", "--config", cfg, "--out", (dir_ / "b").string()}).code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "history.csv"), slurp(dir_ / "b" / "history.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "model.ckpt"), slurp(dir_ / "b" / "model.ckpt"));
  ASSERT_EQ(fal_run({"train", "--config", cfg, "--seed", "5", "--out", (dir_ / "c").string()}).code, 0);
  EXPECT_NE(slurp(dir_ / "a" / "model.ckpt"), slurp(dir_ / "c" / "model.ckpt"));
  EXPECT_NE(slurp(dir_ / "c" / "history.csv").find("# seed: 5"), std::string::npos);
}

TEST_F(CliTest, SeedOverrideChangesConfigHash) {
  const std::string cfg = config();
  ASSERT_EQ(fal_run({"cost", "--config", cfg, "--out", (dir_ / "a").string()}).code, 0);
  ASSERT_EQ(fal_run({"cost", "--config", cfg, "--seed", "3", "--out", (dir_ / "b").string()}).code, 0);
  const auto hash_line = [](const std::string& text) { return text.substr(text.find("# config_hash:"), 34); };
  EXPECT_NE(hash_line(slurp(dir_ / "a" / "cost.csv")), hash_line(slurp(dir_ / "b" / "cost.csv")));
}

TEST_F(CliTest, SimulateReportsReductionCounts) {
  const std::string cfg = dir_ / "sim.yaml";
  std::ofstream(cfg) << "model:\n  n_layers: 12\n  hidden: 16\n  n_heads: 2\n  seq_len: 8\n  vocab: 32\n"
                        "simulate:\n  batch: 1\n";
  for (const auto& [variant, expected] : {std::pair{"preln", "24"}, std::pair{"fal", "13"}}) {
    const fs::path out = dir_ / variant;
    const Outcome r = fal_run({"simulate", "--config", cfg, "--variant", variant, "--shards", "2", "--out", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto table = rows(out / "simulate_summary.csv");
    ASSERT_EQ(table.size(), 2u);
    const std::string prefix = std::string(variant) + ",2," + expected + "," + expected + "," + expected + ",";
    EXPECT_EQ(table[1].rfind(prefix, 0), 0u) << table[1];
    EXPECT_EQ(table[1].substr(table[1].size() - 4), "pass");
    const std::string trace = slurp(out / ("trace_" + std::string(variant) + "_n2.jsonl"));
    EXPECT_EQ(trace.rfind("{\"meta\":", 0), 0u);
  }
}

TEST_F(CliTest, SimulateRejectsIndivisibleShards) {
  const Outcome r = fal_run({"simulate", "--config", config(), "--shards", "3", "--out", dir_.string()});
  EXPECT_EQ(r.code, 1) << r.err;
}

TEST_F(CliTest, CostTableCardinality) {
  const std::string cfg = dir_ / "cost.yaml";
  std::ofstream(cfg) << "hardware:\n  - {name: a, n_devices: 2}\n  - {name: b, n_devices: 4}\n"
                        "cost:\n  variants: [preln, fal, falplus]\n"
                        "  models:\n    - {name: small, n_layers: 4}\n    - {name: big, n_layers: 8, hidden: 128}\n";
  const Outcome r = fal_run({"cost", "--config", cfg, "--out", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto table = rows(dir_ / "cost.csv");
  EXPECT_EQ(table.size(), 1u + 2 * 2 * 3);
  EXPECT_EQ(table.front(), "config,hardware,variant,t_fwd,t_bwd,t_comm,t_codec,t_total,speedup");

  ASSERT_EQ(fal_run({"cost", "--config", cfg, "--format", "tsv", "--out", dir_.string()}).code, 0);
  const auto tsv = rows(dir_ / "cost.tsv");
  ASSERT_EQ(tsv.size(), table.size());
  EXPECT_EQ(tsv.front(), "config\thardware\tvariant\tt_fwd\tt_bwd\tt_comm\tt_codec\tt_total\tspeedup");
}

TEST_F(CliTest, AnalyzeAndAblateReadCheckpoint) {
  const std::string cfg = config();
  ASSERT_EQ(fal_run({"train", "--config", cfg, "--out", dir_.string()}).code, 0);
  const std::string ckpt = (dir_ / "model.ckpt").string();

  ASSERT_EQ(fal_run({"analyze", "--config", cfg, "--checkpoint", ckpt, "--out", dir_.string()}).code, 0);
  auto cka = rows(dir_ / "cka.csv");
  ASSERT_EQ(cka.size(), 3u);
  EXPECT_EQ(cka[1].rfind("1,2,", 0), 0u);
  EXPECT_EQ(cka[2].rfind("2,3,", 0), 0u);
  EXPECT_EQ(rows(dir_ / "grad_profile.csv").size(), 4u);
  EXPECT_EQ(rows(dir_ / "ln_ratio.csv").size(), 3u);

  ASSERT_EQ(fal_run({"ablate", "--config", cfg, "--checkpoint", ckpt, "--out", dir_.string()}).code, 0);
  const auto abl = rows(dir_ / "ablation.csv");
  ASSERT_EQ(abl.size(), 3u);
  EXPECT_EQ(abl[1].rfind("original,0,", 0), 0u);
  EXPECT_EQ(abl[1].substr(abl[1].size() - 2), ",0");
  EXPECT_EQ(abl[2].rfind("all_connect,0,", 0), 0u);

  ASSERT_EQ(fal_run({"eval", "--config", cfg, "--checkpoint", ckpt, "--precision", "64", "--out", dir_.string()}).code, 0);
  EXPECT_EQ(rows(dir_ / "eval.csv").size(), 2u);
}

TEST_F(CliTest, CorruptCheckpointIsIoError) {
  const fs::path ckpt = dir_ / "broken.ckpt";
  std::ofstream(ckpt) << "not a checkpoint";
  EXPECT_EQ(fal_run({"eval", "--config", config(), "--checkpoint", ckpt.string()}).code, 3);
}

}  // namespace
