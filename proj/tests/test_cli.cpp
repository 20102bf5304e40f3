#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "hardcon/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run_cli(const std::string& args) {
  const std::string cmd = std::string(HARDCON_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("hardcon_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path config(const std::string& name, const std::string& text) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, MalformedConfigExitsTwoWithoutOutputs) {
  const fs::path cfg = config("bad.cfg", "experiment = spheres\nbogus = 1\n");
  const fs::path out = dir_ / "out";
  EXPECT_EQ(run_cli("run " + cfg.string() + " --out-dir " + out.string()).code, hardcon::kExitConfig);
  EXPECT_FALSE(fs::exists(out));
  const fs::path cfg2 = config("bad2.cfg", "experiment = spheres\niterations = -3\n");
  EXPECT_EQ(run_cli("run " + cfg2.string() + " --out-dir " + out.string()).code, hardcon::kExitConfig);
  EXPECT_FALSE(fs::exists(out));
  EXPECT_EQ(run_cli("run " + (dir_ / "missing.cfg").string()).code, hardcon::kExitConfig);
  EXPECT_EQ(run_cli("frobnicate").code, hardcon::kExitConfig);
}

TEST_F(Cli, ZeroIterationsWritesHeaderAndInitialRow) {
  const fs::path cfg = config("zero.cfg", "experiment = spheres\nmethod = hard_sgd\ndim = 50\niterations = 0\n");
  const fs::path out = dir_ / "out";
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out-dir " + out.string()).code, 0);
  const std::string csv = slurp(out / "metrics.csv");
  EXPECT_EQ(line_count(out / "metrics.csv"), 2u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), hardcon::kMetricsHeader);
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 2), "0,");
  EXPECT_TRUE(fs::exists(out / "resolved_config"));
  EXPECT_TRUE(fs::exists(out / "summary"));
  EXPECT_TRUE(fs::exists(out / "checkpoint.bin"));
}

TEST_F(Cli, PairedRunWritesTwoTracesOfConfiguredLength) {
  const fs::path cfg =
      config("paired.cfg", "experiment = spheres\ndim = 100\niterations = 30\nn_active = 10\nsoft_lr = 3e-4\n");
  const fs::path out = dir_ / "out";
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out-dir " + out.string()).code, 0);
  for (const char* name : {"metrics_hard.csv", "metrics_soft.csv"}) {
    const auto trace = hardcon::read_metrics_csv(out / name);
    std::size_t iters = 0;
    for (const auto& r : trace.rows) iters += r.iter > 0;
    EXPECT_EQ(iters, 30u) << name;
  }
  const auto summary = nlohmann::json::parse(slurp(out / "summary"));
  EXPECT_EQ(summary["status"], "ok");
  EXPECT_TRUE(summary.contains("comparison_hard_vs_soft"));
  // The resolved config reproduces the run.
  const hardcon::ExperimentConfig re = hardcon::load_config(out / "resolved_config");
  EXPECT_EQ(re.train.epochs, 30u);
  EXPECT_EQ(re.soft_lr, 3e-4);
}

TEST_F(Cli, TunesSoftLrWhenUnset) {
  const fs::path cfg = config("tune.cfg", "experiment = spheres\ndim = 50\niterations = 10\nn_active = 5\n");
  const fs::path out = dir_ / "out";
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out-dir " + out.string()).code, 0);
  const hardcon::ExperimentConfig re = hardcon::load_config(out / "resolved_config");
  ASSERT_TRUE(re.soft_lr.has_value());
  const auto& g = hardcon::default_soft_lr_grid();
  EXPECT_NE(std::find(g.begin(), g.end(), *re.soft_lr), g.end());
}

TEST_F(Cli, RerunIsByteIdentical) {
  const fs::path cfg = config("det.cfg", "experiment = spheres\nmethod = soft_sgd\nlr = 1e-4\ndim = 80\niterations = 25\n");
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out-dir " + (dir_ / "a").string()).code, 0);
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out-dir " + (dir_ / "b").string()).code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "metrics.csv"), slurp(dir_ / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "checkpoint.bin"), slurp(dir_ / "b" / "checkpoint.bin"));
  ASSERT_EQ(run_cli("run " + cfg.string() + " --seed 9 --out-dir " + (dir_ / "c").string()).code, 0);
  EXPECT_NE(slurp(dir_ / "a" / "metrics.csv"), slurp(dir_ / "c" / "metrics.csv"));
}

TEST_F(Cli, CompareWithItselfGivesUnitRatios) {
  const fs::path cfg = config("c.cfg", "experiment = spheres\nmethod = hard_sgd\ndim = 60\niterations = 20\nn_active = 5\n");
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out-dir " + (dir_ / "a").string()).code, 0);
  const std::string csv = (dir_ / "a" / "metrics.csv").string();
  const Result r = run_cli("compare " + csv + " " + csv);
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["violation_difference"], 0.0);
  EXPECT_EQ(j["violation_ratio"], 1.0);
  EXPECT_EQ(j["smoothness_ratio"], 1.0);
  EXPECT_EQ(j["degradation_ratio"], 1.0);
}

TEST_F(Cli, CompareRejectsDifferentLengths) {
  const fs::path a = config("a.cfg", "experiment = spheres\nmethod = hard_sgd\ndim = 60\niterations = 20\n");
  const fs::path b = config("b.cfg", "experiment = spheres\nmethod = hard_sgd\ndim = 60\niterations = 15\n");
  ASSERT_EQ(run_cli("run " + a.string() + " --out-dir " + (dir_ / "a").string()).code, 0);
  ASSERT_EQ(run_cli("run " + b.string() + " --out-dir " + (dir_ / "b").string()).code, 0);
  const Result r =
      run_cli("compare " + (dir_ / "a" / "metrics.csv").string() + " " + (dir_ / "b" / "metrics.csv").string());
  EXPECT_EQ(r.code, hardcon::kExitConfig);
}

TEST_F(Cli, CompareFlagsSoftAsSmootherOnSpheres) {
  const fs::path cfg = config("p.cfg", "experiment = spheres\ndim = 2000\niterations = 100\nsoft_lr = 3e-4\n");
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out-dir " + (dir_ / "p").string()).code, 0);
  const Result r = run_cli("compare " + (dir_ / "p" / "metrics_hard.csv").string() + " " +
                           (dir_ / "p" / "metrics_soft.csv").string());
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["smoother"], "b");
  // Recompute the hard/soft smoothness ratio from the traces; rows are indexed by iteration.
  auto delta_std = [&](const char* name) {
    const auto t = hardcon::read_metrics_csv(dir_ / "p" / name);
    const std::size_t start = j["window_start"].get<std::size_t>();
    std::vector<double> d;
    for (std::size_t i = std::max<std::size_t>(start, 1); i < t.rows.size(); ++i)
      d.push_back(t.rows[i].metrics.median_violation - t.rows[i - 1].metrics.median_violation);
    double m = 0.0;
    for (double x : d) m += x;
    m /= static_cast<double>(d.size());
    double v = 0.0;
    for (double x : d) v += (x - m) * (x - m);
    return std::sqrt(v / static_cast<double>(d.size() - 1));
  };
  EXPECT_NEAR(j["smoothness_ratio"].get<double>(), delta_std("metrics_hard.csv") / delta_std("metrics_soft.csv"),
              1e-6 * j["smoothness_ratio"].get<double>());
}

TEST_F(Cli, SolveCheckRuns) {
  const fs::path cfg = config("s.cfg", "experiment = solve_check\ndim = 40\nrank = 30\ncond = 1e4\n");
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out-dir " + (dir_ / "s").string()).code, 0);
  EXPECT_GE(line_count(dir_ / "s" / "metrics.csv"), 2u);
  const auto summary = nlohmann::json::parse(slurp(dir_ / "s" / "summary"));
  EXPECT_TRUE(summary.contains("status"));
}

TEST_F(Cli, DivergenceExitsThreeAndKeepsCheckpoint) {
  const fs::path cfg =
      config("div.cfg", "experiment = spheres\nmethod = soft_sgd\nlr = 1e30\ndim = 30\niterations = 50\n");
  const fs::path out = dir_ / "out";
  EXPECT_EQ(run_cli("run " + cfg.string() + " --out-dir " + out.string()).code, hardcon::kExitNumerical);
  EXPECT_TRUE(fs::exists(out / "checkpoint.bin"));
  const auto summary = nlohmann::json::parse(slurp(out / "summary"));
  EXPECT_EQ(summary["status"], "numerical_failure");
  // Every logged cell is finite.
  const auto trace = hardcon::read_metrics_csv(out / "metrics.csv");
  for (const auto& r : trace.rows) {
    EXPECT_TRUE(std::isfinite(r.metrics.risk));
    EXPECT_TRUE(std::isfinite(r.step_norm));
  }
}

TEST_F(Cli, OutRootEnvironmentVariable) {
  const fs::path cfg = config("envrun.cfg", "experiment = spheres\nmethod = hard_sgd\ndim = 20\niterations = 1\n");
  const std::string cmd = std::string(hardcon::kOutRootEnv) + "=" + (dir_ / "root").string() + " " +
                          std::string(HARDCON_CLI_PATH) + " run " + cfg.string() + " 2>/dev/null";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(dir_ / "root" / "envrun" / "metrics.csv"));
}

TEST(Config, StrictParsing) {
  using hardcon::ConfigError;
  EXPECT_THROW(hardcon::parse_config("dim = 5\n"), ConfigError);
  EXPECT_THROW(hardcon::parse_config("experiment = spheres\ndim = 5\ndim = 6\n"), ConfigError);
  EXPECT_THROW(hardcon::parse_config("experiment = spheres\nepochs = 5\n"), ConfigError);
  EXPECT_THROW(hardcon::parse_config("experiment = spheres\ndim\n"), ConfigError);
  EXPECT_THROW(hardcon::parse_config("experiment = spheres\nlr = fast\n"), ConfigError);
  try {
    hardcon::parse_config("experiment = spheres\n# c\nnope = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos);
  }
  const auto c = hardcon::parse_config("experiment = toy_pose\nhidden = 16,8\nepochs = 2 # short\n");
  EXPECT_EQ(c.toy.hidden, (std::vector<std::size_t>{16, 8}));
  EXPECT_EQ(c.train.epochs, 2u);
  EXPECT_EQ(hardcon::parse_config(hardcon::resolved_config_text(c)).toy.hidden, c.toy.hidden);
}
