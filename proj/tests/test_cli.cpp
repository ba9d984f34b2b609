#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "fetalsleep/container.hpp"
#include "fetalsleep/edf.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("fsn_cli_" + std::to_string(::getpid()));
    fs::create_directories(root_);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static Outcome cli(const std::string& args) {
    const auto err = root_ / "stderr.txt";
    const std::string cmd = "cd '" + root_.string() + "' && env -u FSN_OUTPUT_ROOT '" FSN_BINARY "' " + args +
                            " > /dev/null 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
  }

  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, ReIngestIsDeterministic) {
  ASSERT_EQ(cli("-o adult synth --domain adult --subjects 2 --hours 0.25 --format edf --seed 4").code, 0);
  const std::string in = "adult/A01-PSG.edf adult/A02-PSG.edf --hypnogram adult/A01-Hypnogram.edf adult/A02-Hypnogram.edf";
  ASSERT_EQ(cli("-o ing1 ingest " + in).code, 0);
  ASSERT_EQ(cli("-o ing2 ingest " + in).code, 0);
  for (const char* f : {"A01.fsr", "A01.labels", "A02.fsr", "A02.labels"})
    EXPECT_EQ(slurp(root_ / "ing1" / f), slurp(root_ / "ing2" / f)) << f;
  const auto manifest = slurp(root_ / "ing1" / "ingest.manifest.json");
  EXPECT_NE(manifest.find("\"complete\""), std::string::npos);
}

TEST_F(Cli, CorruptHeaderNamesOffset) {
  ASSERT_EQ(cli("-o bad synth --domain adult --subjects 1 --hours 0.1 --format edf --seed 5").code, 0);
  auto bytes = fsn::container::read_file(root_ / "bad" / "A01-PSG.edf");
  bytes[236] = 'z';  // record count field
  fsn::container::write_file(root_ / "bad" / "A01-PSG.edf", bytes);
  const auto r = cli("-o badout ingest bad/A01-PSG.edf");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("offset 236"), std::string::npos) << r.err;
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("synth --domain fetal").code, 1);  // seed required
  EXPECT_EQ(cli("-o x synth --domain moon --seed 1").code, 1);
}

TEST_F(Cli, FinetuneEvaluateAndDeterminism) {
  ASSERT_EQ(cli("-o fet synth --domain fetal --subjects 6 --hours 0.7 --seed 3").code, 0);
  const std::string train = "finetune --input fet --seed 1 --max-epochs 2 --patience 2";
  ASSERT_EQ(cli("-o ft1 " + train).code, 0);
  ASSERT_EQ(cli("-o ft2 -j 2 " + train).code, 0);
  EXPECT_EQ(slurp(root_ / "ft1" / "results.csv"), slurp(root_ / "ft2" / "results.csv"));
  EXPECT_EQ(slurp(root_ / "ft1" / "folds" / "F03.ckpt"), slurp(root_ / "ft2" / "folds" / "F03.ckpt"));

  ASSERT_EQ(cli("-o ev evaluate --input fet --folds ft1/folds").code, 0);
  std::istringstream csv(slurp(root_ / "ev" / "results.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("model,pretrain,input,strategy,fold,accuracy,macro_f1", 0), 0u);
  int folds = 0, summary = 0;
  while (std::getline(csv, line)) (line.find("mean ± std") != std::string::npos ? summary : folds)++;
  EXPECT_EQ(folds, 6);
  EXPECT_EQ(summary, 1);
  // held-out scoring reproduces the training run's numbers
  EXPECT_EQ(slurp(root_ / "ev" / "results.csv"), slurp(root_ / "ft1" / "results.csv"));
}

TEST_F(Cli, FailedStageLeavesStaleManifest) {
  fs::create_directories(root_ / "nothing");
  EXPECT_EQ(cli("-o psdout psd --input nothing").code, 2);
  EXPECT_NE(slurp(root_ / "psdout" / "psd.manifest.json").find("\"stale\""), std::string::npos);
}
