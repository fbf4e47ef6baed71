#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(NIMG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("nimg_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, TrainMergeSampleAnalyze) {
  std::ofstream(dir / "run.ini") << "[train]\nsteps = 8\ncheckpoint_every = 2\nbatch_s256 = 2\neval_size = 2\n";
  ASSERT_EQ(run("train --config " + p("run.ini") + " --out " + p("run")), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "ckpt_8.nimg"));
  EXPECT_TRUE(fs::exists(dir / "run" / "config.ini"));
  EXPECT_EQ(slurp(dir / "run" / "loss.csv").substr(0, 5), "step,");

  ASSERT_EQ(run("merge --checkpoints " + p("run") + " --merge-profile geometric --window 3 --beta 0.9 --out " + p("m")), 0);
  const auto report = slurp(dir / "m" / "merge_report.csv");
  EXPECT_EQ(report.substr(0, report.find('\n')), "index,step,c_j,w_j");
  EXPECT_TRUE(fs::exists(dir / "m" / "merged.nimg"));

  ASSERT_EQ(run("sample --config " + p("run.ini") + " --checkpoint " + p("m/merged.nimg") +
                " --steps 6 --capture-routing --out " + p("s")),
            0);
  EXPECT_TRUE(fs::exists(dir / "s" / "sample.pgm"));
  ASSERT_EQ(run("analyze --routing " + p("s/routing.jsonl") + " --out " + p("a")), 0);
  EXPECT_TRUE(fs::exists(dir / "a" / "allocation.pgm"));
  EXPECT_TRUE(fs::exists(dir / "a" / "diversity.csv"));
}

TEST_F(Cli, BucketPlanAndEpsimCheck) {
  ASSERT_EQ(run("bucket-plan --stage s256 --out " + p("b")), 0);
  const auto plan = slurp(dir / "b" / "bucket_plan.csv");
  EXPECT_NE(plan.find("\n256,128,"), std::string::npos);
  EXPECT_NE(plan.find("\n192,256,"), std::string::npos);
  EXPECT_EQ(run("epsim-check --out " + p("e")), 0);
  EXPECT_TRUE(fs::exists(dir / "e" / "trace.csv"));
  // A tolerance no computation can meet forces an equivalence failure.
  EXPECT_NE(run("epsim-check --devices 2 --experts 4 --tol -1"), 0);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("train --stage s2048"), 1);
  std::ofstream(dir / "bad.ini") << "[train]\nbogus = 1\n";
  EXPECT_EQ(run("train --config " + p("bad.ini")), 1);
  EXPECT_EQ(run("epsim-check --devices 3 --experts 4"), 1);
  std::ofstream(dir / "junk.jsonl") << "not json\n";
  EXPECT_EQ(run("analyze --routing " + p("junk.jsonl")), 2);
  EXPECT_EQ(run("frobnicate"), 1);
}
