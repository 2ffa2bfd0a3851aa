#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "widecaps.hpp"

using namespace widecaps;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(WIDECAPS_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return o;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) o.out.append(buf, n);
  const int status = pclose(p);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("widecaps_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    RunConfig cfg;
    cfg.model = gradsuite::toy_model_config();
    cfg.train.epochs = 2;
    cfg.train.batch_size = 10;
    cfg.train.initial_lr = 0.05;
    cfg.data.train_size = 40;
    cfg.data.test_size = 20;
    cfg.seed = 3;
    cfg.out_dir = (dir_ / "unused").string();
    std::ofstream(dir_ / "tiny.json") << serialize(cfg);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string config() { return (dir_ / "tiny.json").string(); }
  static inline fs::path dir_;
};

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto o = run("--help");
  EXPECT_EQ(o.code, 0);
  for (const char* sub : {"train", "eval", "gradcheck", "routing-demo", "ablate"})
    EXPECT_NE(o.out.find(sub), std::string::npos) << sub;
}

TEST(Cli, ParseErrorsExitTwo) {
  EXPECT_EQ(run("routing-demo --frobnicate 3").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("train").code, 2);  // missing --config
  EXPECT_EQ(run("routing-demo --n lots").code, 2);
}

TEST(Cli, RuntimeErrorsExitOne) {
  const auto o = run("train --config /no/such/config.json");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.out.find("error:"), std::string::npos);
  EXPECT_EQ(run("routing-demo --variant dynamic").code, 1);
  EXPECT_EQ(run("gradcheck --module optics").code, 1);
  EXPECT_EQ(run("eval --checkpoint /no/such/ck.json --data synthetic:blobs").code, 1);
}

TEST(Cli, GradcheckPasses) {
  const auto o = run("gradcheck");
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_NE(o.out.find("PASS"), std::string::npos);
  EXPECT_EQ(o.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run("gradcheck --module routing --seed 5").code, 0);
}

TEST(Cli, RoutingDemoSingleInputIsUniform) {
  const auto o = run("routing-demo --n 1 --classes 4 --k 3");
  EXPECT_EQ(o.code, 0) << o.out;
  std::istringstream in(o.out);
  std::string line;
  int seen = 0;
  while (std::getline(in, line)) {
    const auto at = line.find("x_hat ");
    if (at == std::string::npos || line.rfind("sum", 0) == 0) continue;
    EXPECT_NEAR(std::stod(line.substr(at + 6)), 0.25, 1e-9) << line;
    ++seen;
  }
  EXPECT_EQ(seen, 4);
}

TEST(Cli, RoutingDemoMatchesPairwiseOracle) {
  for (const char* v : {"modified", "original"}) {
    const auto o = run(std::string("routing-demo --n 12 --k 5 --classes 3 --seed 9 --variant ") + v);
    EXPECT_EQ(o.code, 0) << o.out;
    EXPECT_NE(o.out.find("max |b_hat - oracle|"), std::string::npos) << o.out;
  }
  // only the softmax variant normalizes across classes
  EXPECT_NE(run("routing-demo --n 12 --k 5 --classes 3 --seed 9").out.find("sum x_hat 1.000000000"),
            std::string::npos);
}

TEST(Cli, PrintConfigParsesBack) {
  const auto o = run("print-config --preset desk");
  EXPECT_EQ(o.code, 0);
  EXPECT_EQ(serialize(parse_run_config(o.out)), o.out);
  EXPECT_EQ(run("print-config --preset huge").code, 1);
}

TEST_F(CliRun, TrainTwiceGivesIdenticalMetrics) {
  const fs::path a = dir_ / "a", b = dir_ / "b";
  const auto ra = run("train --config " + config() + " --out " + a.string());
  ASSERT_EQ(ra.code, 0) << ra.out;
  ASSERT_EQ(run("train --config " + config() + " --out " + b.string()).code, 0);
  const std::string csv = slurp(a / "metrics.csv");
  EXPECT_EQ(csv, slurp(b / "metrics.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss,accuracy,lr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(slurp(a / "checkpoint.json.bin"), slurp(b / "checkpoint.json.bin"));
  EXPECT_NO_THROW(load_run_config((a / "config.json").string()));

  const fs::path c = dir_ / "c";
  ASSERT_EQ(run("train --config " + config() + " --seed 4 --out " + c.string()).code, 0);
  EXPECT_NE(csv, slurp(c / "metrics.csv"));
}

TEST_F(CliRun, EvalReproducesTheLastTestEpoch) {
  const fs::path a = dir_ / "e";
  ASSERT_EQ(run("train --config " + config() + " --out " + a.string()).code, 0);
  const auto o = run("eval --checkpoint " + (a / "checkpoint.json").string() +
                     " --data synthetic:blobs --count 20 --data-seed 7");
  ASSERT_EQ(o.code, 0) << o.out;
  EXPECT_NE(o.out.find("samples 20"), std::string::npos) << o.out;
  const std::string csv = slurp(a / "metrics.csv");
  std::string last = csv.substr(0, csv.size() - 1);
  last = last.substr(last.rfind('\n') + 1);
  // epoch,loss,accuracy,lr -> accuracy column is test accuracy
  std::stringstream row(last);
  std::string field;
  std::vector<std::string> cols;
  while (std::getline(row, field, ',')) cols.push_back(field);
  ASSERT_EQ(cols.size(), 4u);
  EXPECT_NE(o.out.find("accuracy " + cols[2]), std::string::npos) << o.out << " vs " << last;
}

TEST_F(CliRun, AblateRunsSelectedRungs) {
  const auto o = run("ablate --config " + config() + " --ladder v1,v5 --epochs 1");
  ASSERT_EQ(o.code, 0) << o.out;
  EXPECT_NE(o.out.find("\nv1 "), std::string::npos) << o.out;
  EXPECT_NE(o.out.find("\nv5 "), std::string::npos) << o.out;
  EXPECT_EQ(o.out.find("\nv3 "), std::string::npos);
  EXPECT_EQ(run("ablate --config " + config() + " --ladder v9").code, 1);
}
