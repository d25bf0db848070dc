#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#include "arrag/config.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using arrag::Json;
using arrag::testing::read_file;
using arrag::testing::TempDir;
using arrag::testing::write_file;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run_cli(const std::string& args) {
  const std::string cmd = std::string(ARRAG_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return o;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) o.out.append(buf.data(), n);
  const int status = pclose(p);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

// Two 96px images, one held out, so the training split holds a single 24x24 grid.
Json tiny_config(const TempDir& dir) {
  Json c;
  c["paths"] = {{"output_dir", dir.file("runs")}, {"corpus_dir", dir.file("corpus")},
                {"codebook", dir.file("cb.arcb")},   {"db", dir.file("db.arrg")},
                {"model", dir.file("model.artm")},   {"sfb", dir.file("sfb.arsf")}};
  c["corpus"] = {{"count", 2}, {"held_out", 1}};
  c["codebook"] = {{"size", 16}};
  c["model"] = {{"dim", 8}, {"layers", 2}, {"heads", 1}, {"ffn", 16}};
  c["train"] = {{"epochs", 1}, {"batch", 1}};
  return c;
}

std::string write_config(const TempDir& dir, const std::string& name, const Json& c) {
  const std::string path = dir.file(name);
  write_file(path, c.dump(2));
  return path;
}

std::string run_dir_of(const std::string& out) {
  const std::string marker = " to ";
  const auto pos = out.rfind(marker);
  if (pos == std::string::npos) return {};
  std::string dir = out.substr(pos + marker.size());
  while (!dir.empty() && (dir.back() == '\n' || dir.back() == '\r')) dir.pop_back();
  return dir;
}

class CliPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_ = write_config(dir_, "config.json", tiny_config(dir_));
    for (const char* step : {"synth", "build-codebook", "build-db", "train"}) {
      const Outcome o = run_cli("-c " + cfg_ + " " + step);
      ASSERT_EQ(o.code, 0) << step << ": " << o.out;
      if (std::string(step) == "build-db") db_out_ = o.out;
    }
  }

  TempDir dir_;
  std::string cfg_;
  std::string db_out_;
};

}  // namespace

TEST(Cli, DefaultConfigIsValidJson) {
  const Outcome o = run_cli("default-config");
  ASSERT_EQ(o.code, 0) << o.out;
  const auto cfg = arrag::config_from_json(Json::parse(o.out));
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run_cli("--definitely-not-a-flag").code, 2);
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("sweep --ddm --sfb").code, 2);
  EXPECT_EQ(run_cli("sweep").code, 2);
}

TEST(Cli, ConfigErrorsExitWithFour) {
  TempDir dir;
  Json c = tiny_config(dir);
  c["model"]["layers"] = 1;
  const Outcome o = run_cli("-c " + write_config(dir, "bad.json", c) + " synth");
  EXPECT_EQ(o.code, 4) << o.out;
  EXPECT_NE(o.out.find("code=4"), std::string::npos);

  write_file(dir.file("broken.json"), "{ not json");
  EXPECT_EQ(run_cli("-c " + dir.file("broken.json") + " synth").code, 4);

  Json unknown = tiny_config(dir);
  unknown["ddm"] = {{"lambada", 0.1}};
  EXPECT_EQ(run_cli("-c " + write_config(dir, "unknown.json", unknown) + " synth").code, 4);
}

TEST(Cli, MissingFilesExitWithFive) {
  TempDir dir;
  EXPECT_EQ(run_cli("-c " + dir.file("absent.json") + " synth").code, 5);
  const std::string cfg = write_config(dir, "config.json", tiny_config(dir));
  const Outcome o = run_cli("-c " + cfg + " build-codebook");
  EXPECT_EQ(o.code, 5) << o.out;
  EXPECT_FALSE(fs::exists(dir.file("runs"))) << "no run directory before inputs are validated";
}

TEST_F(CliPipeline, BuildDbIndexesEveryCellOfTheTrainingImage) {
  EXPECT_NE(db_out_.find("records 576\n"), std::string::npos) << db_out_;
}

TEST_F(CliPipeline, RunDirectoriesHoldTheResolvedConfig) {
  std::size_t runs = 0;
  for (const auto& entry : fs::directory_iterator(dir_.file("runs"))) {
    ++runs;
    const fs::path cfg = entry.path() / "config.json";
    ASSERT_TRUE(fs::exists(cfg)) << entry.path();
    EXPECT_NO_THROW(arrag::config_from_json(Json::parse(read_file(cfg.string()))).validate());
  }
  EXPECT_EQ(runs, 4u);
}

TEST_F(CliPipeline, GenerationIsDeterministicAcrossInvocations) {
  const Outcome a = run_cli("-c " + cfg_ + " generate --mode ddm --seed 4");
  ASSERT_EQ(a.code, 0) << a.out;
  const std::string first = read_file(run_dir_of(a.out) + "/image_000.tokens.txt");
  const std::string first_ppm = read_file(run_dir_of(a.out) + "/image_000.ppm");
  const Outcome b = run_cli("-c " + cfg_ + " generate --mode ddm --seed 4");
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(run_dir_of(a.out), run_dir_of(b.out));
  EXPECT_FALSE(first.empty());
  EXPECT_EQ(first, read_file(run_dir_of(b.out) + "/image_000.tokens.txt"));
  EXPECT_EQ(first_ppm, read_file(run_dir_of(b.out) + "/image_000.ppm"));
}

TEST_F(CliPipeline, ZeroLambdaDdmMatchesBaseByteForByte) {
  Json c = tiny_config(dir_);
  c["ddm"] = {{"lambda", 0.0}};
  const std::string cfg0 = write_config(dir_, "lambda0.json", c);
  for (const char* seed : {"0", "7"}) {
    const Outcome base = run_cli("-c " + cfg0 + " generate --mode base --seed " + seed);
    const Outcome ddm = run_cli("-c " + cfg0 + " generate --mode ddm --seed " + seed);
    ASSERT_EQ(base.code, 0) << base.out;
    ASSERT_EQ(ddm.code, 0) << ddm.out;
    ASSERT_NE(run_dir_of(base.out), run_dir_of(ddm.out));
    EXPECT_EQ(read_file(run_dir_of(base.out) + "/image_000.ppm"), read_file(run_dir_of(ddm.out) + "/image_000.ppm"));
    EXPECT_EQ(read_file(run_dir_of(base.out) + "/image_000.tokens.txt"),
              read_file(run_dir_of(ddm.out) + "/image_000.tokens.txt"));
  }
}

TEST_F(CliPipeline, ForeignCodebookExitsWithSeven) {
  Json c = tiny_config(dir_);
  c["codebook"]["proj_seed"] = 5;
  c["paths"]["codebook"] = dir_.file("other.arcb");
  const std::string other = write_config(dir_, "other.json", c);
  ASSERT_EQ(run_cli("-c " + other + " build-codebook").code, 0);
  const Outcome o = run_cli("-c " + other + " generate --mode ddm");
  EXPECT_EQ(o.code, 7) << o.out;
  EXPECT_NE(o.out.find("kind=hash-mismatch"), std::string::npos);
}

TEST_F(CliPipeline, OutOfRangePromptExitsWithThree) {
  EXPECT_EQ(run_cli("-c " + cfg_ + " generate --prompt-id 9").code, 3);
}

TEST_F(CliPipeline, CorruptDatabaseExitsWithSix) {
  const std::string bytes = read_file(dir_.file("db.arrg"));
  write_file(dir_.file("db.arrg"), bytes.substr(0, bytes.size() / 2));
  const Outcome o = run_cli("-c " + cfg_ + " generate --mode ddm");
  EXPECT_EQ(o.code, 6) << o.out;
}
