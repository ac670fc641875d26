#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "shaplora/cli.hpp"
#include "shaplora/io.hpp"
#include "support.hpp"

using namespace shaplora;
using namespace shaplora::testing;
namespace fs = std::filesystem;

namespace {

struct Cli {
  int code;
  std::string out;
  std::string err;
};

Cli run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("shaplora_cli_") +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    PipelineConfig c = small_pipeline(2);
    c.stage1.max_epochs = 1;
    c.stage2.max_epochs = 1;
    write_file_atomic(config(), config_text(c));
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string config() const { return (dir_ / "tiny.json").string(); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, PipelineWritesArtifacts) {
  const Cli r = run({"pipeline", "--config", config(), "--out", path("run")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* f : {"config.json", "curves_stage1.csv", "importance.csv",
                        "importance.meta.json", "allocation.txt", "stage1.ckpt",
                        "curves_stage2.csv", "stage2.ckpt", "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  }
  const AllocationConfig alloc = load_allocation(dir_ / "run" / "allocation.txt");
  EXPECT_EQ(alloc.total_kept(), 7);
  EXPECT_EQ(load_checkpoint(dir_ / "run" / "stage2.ckpt").total_ranks(), 7);
  EXPECT_EQ(load_importance(dir_ / "run" / "importance.csv").scores.size(), 14u);

  // Append-only: a second run into the same directory needs --force.
  const std::string before = read_file(dir_ / "run" / "allocation.txt");
  const Cli again = run({"pipeline", "--config", config(), "--out", path("run")});
  EXPECT_EQ(again.code, kExitRuntime);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  const Cli forced = run({"pipeline", "--config", config(), "--out", path("run"), "--force"});
  EXPECT_EQ(forced.code, kExitOk) << forced.err;
  EXPECT_EQ(read_file(dir_ / "run" / "allocation.txt"), before);
}

TEST_F(CliTest, StagesComposeAndScorePrune) {
  ASSERT_EQ(run({"stage1", "--config", config(), "--out", path("s1")}).code, kExitOk);
  EXPECT_FALSE(fs::exists(dir_ / "s1" / "stage2.ckpt"));
  const Cli s2 = run({"stage2", "--run-dir", path("s1")});
  ASSERT_EQ(s2.code, kExitOk) << s2.err;
  EXPECT_TRUE(fs::exists(dir_ / "s1" / "stage2_summary.json"));

  const std::string ckpt = path("s1/stage1.ckpt");
  const Cli sc = run({"score", "--config", config(), "--checkpoint", ckpt, "--method",
                      "magnitude", "--out", path("sc")});
  ASSERT_EQ(sc.code, kExitOk) << sc.err;
  EXPECT_EQ(load_importance(dir_ / "sc" / "importance.csv").method, ScoringMethod::magnitude);

  const Cli pr = run({"prune", "--config", config(), "--checkpoint", ckpt, "--importance",
                      path("sc/importance.csv"), "--r-target", "5", "--out", path("pr")});
  ASSERT_EQ(pr.code, kExitOk) << pr.err;
  EXPECT_EQ(load_checkpoint(dir_ / "pr" / "pruned.ckpt").total_ranks(), 5);

  const Cli ex = run({"export", "--config", config(), "--out", path("ex")});
  ASSERT_EQ(ex.code, kExitOk) << ex.err;
  EXPECT_EQ(parse_dataset_rows(read_file(dir_ / "ex" / "dev.txt")).size(), 32u);
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"pipeline"}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  write_file_atomic(dir_ / "bad.json", R"({"nonsense": true})");
  EXPECT_EQ(run({"pipeline", "--config", path("bad.json"), "--out", path("x")}).code,
            kExitConfig);
  write_file_atomic(dir_ / "big.json", R"({"r_target": 999})");
  EXPECT_EQ(run({"stage1", "--config", path("big.json"), "--out", path("x")}).code, kExitConfig);
  write_file_atomic(dir_ / "junk.ckpt", "not a checkpoint");
  EXPECT_EQ(run({"score", "--config", config(), "--checkpoint", path("junk.ckpt"), "--out",
                 path("x")})
                .code,
            kExitRuntime);
}
