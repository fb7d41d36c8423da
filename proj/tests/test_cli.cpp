#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cli_app.hpp"

using namespace msmv;
using namespace msmv::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "msmv_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> directory_contents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = slurp(e.path());
  return out;
}

int run(const std::string& sub, const fs::path& out, std::vector<std::string> overrides = {}, unsigned threads = 1,
        const std::string& seed = "", const std::string& config = "") {
  Invocation inv;
  inv.subcommand = sub;
  inv.out_dir = out.string();
  inv.overrides = std::move(overrides);
  inv.threads = threads;
  inv.seed = seed;
  inv.config_path = config;
  std::ostringstream log;
  return execute(inv, log);
}

// Small invariant-measure run: seconds at most.
const std::vector<std::string> kSmallInvariant = {"invariant.burn_in=2", "invariant.collect=2", "invariant.n_particles=256"};

}  // namespace

TEST(Config, DefaultsAreFullyExpanded) {
  const Config c = load_config("avg-rate", "", {});
  EXPECT_EQ(c.number("model.k"), 1.0);
  EXPECT_EQ(c.number("model.m"), 0.25);
  EXPECT_EQ(c.count("run.n_particles"), 2048u);
  EXPECT_EQ(c.number("grid.rho_fast"), 20.0);
  EXPECT_EQ(c.number("scale.p"), 2.0);
  EXPECT_EQ(c.list("rate.eps_grid").size(), 6u);
}

TEST(Config, UnknownKeyNamesKeyAndLine) {
  const fs::path dir = scratch("unknown_key");
  std::ofstream(dir / "bad.cfg") << "# comment\nscale.eps = 0.1\n\nscale.epsilom = 0.2\n";
  try {
    load_config("simulate", (dir / "bad.cfg").string(), {});
    FAIL() << "expected a configuration error";
  } catch (const ConfigurationError& e) {
    EXPECT_EQ(e.key(), "scale.epsilom");
    EXPECT_EQ(e.line(), 4u);
    EXPECT_NE(std::string(e.what()).find("epsilom"), std::string::npos);
  }
  EXPECT_THROW(load_config("simulate", "", {"epsilom=1"}), ConfigurationError);
}

TEST(Config, MalformedValuesAndMissingFilesAreErrors) {
  const fs::path dir = scratch("malformed");
  std::ofstream(dir / "dup.cfg") << "scale.eps = 0.1\nscale.eps = 0.2\n";
  std::ofstream(dir / "noeq.cfg") << "scale.eps 0.1\n";
  EXPECT_THROW(load_config("simulate", (dir / "dup.cfg").string(), {}), ConfigurationError);
  EXPECT_THROW(load_config("simulate", (dir / "noeq.cfg").string(), {}), ConfigurationError);
  EXPECT_THROW(load_config("simulate", (dir / "missing.cfg").string(), {}), ConfigurationError);
  const Config c = load_config("simulate", "", {"scale.eps=abc", "run.seed=-4"});
  EXPECT_THROW(c.number("scale.eps"), ConfigurationError);
  EXPECT_THROW(c.u64("run.seed"), ConfigurationError);
}

TEST(Config, InlineOverridesWinOverFileValues) {
  const fs::path dir = scratch("override");
  std::ofstream(dir / "a.cfg") << "scale.eps = 0.1\nrun.seed = 5\n";
  const Config c = load_config("simulate", (dir / "a.cfg").string(), {"scale.eps=0.2"});
  EXPECT_EQ(c.number("scale.eps"), 0.2);
  EXPECT_EQ(c.u64("run.seed"), 5u);
}

TEST(Config, EmitThenParseRoundTrips) {
  for (const auto& sub : subcommands()) {
    const Config a = load_config(sub, "", {"scale.eps=0.03125", "rate.eps_grid=0.5,0.25,0.125,0.0625"});
    Config b(default_values(sub));
    b.merge_text(a.emit(), "emitted");
    EXPECT_TRUE(a == b) << sub;
    EXPECT_EQ(a.emit(), b.emit()) << sub;
    EXPECT_EQ(a.hash_hex(), b.hash_hex()) << sub;
  }
}

TEST(Cli, ExitStatusEncodesAcceptance) {
  EXPECT_EQ(run("audit", scratch("exit0"), {"audit.probes=64"}), 0);
  std::vector<std::string> strict = kSmallInvariant;
  strict.push_back("invariant.var_tol=0");
  EXPECT_EQ(run("invariant-measure", scratch("exit1"), strict), 1);
  const fs::path bad = scratch("exit2");
  EXPECT_EQ(run("simulate", bad, {"simulate.process=teleport"}), 2);
  const auto report = nlohmann::json::parse(slurp(bad / "report.json"));
  EXPECT_EQ(report["error"]["kind"], "configuration");
  EXPECT_EQ(report["error"]["key"], "simulate.process");
  EXPECT_FALSE(report["passed"].get<bool>());
}

TEST(Cli, UnknownKeyIsSerializedIntoTheReport) {
  const fs::path dir = scratch("unknown_report");
  std::ofstream(dir / "bad.cfg") << "scale.epsilom = 0.2\n";
  EXPECT_EQ(run("audit", dir / "out", {}, 1, "", (dir / "bad.cfg").string()), 2);
  const auto report = nlohmann::json::parse(slurp(dir / "out" / "report.json"));
  EXPECT_EQ(report["error"]["key"], "scale.epsilom");
  EXPECT_EQ(report["error"]["line"], 1);
}

TEST(Cli, RerunsWithTheSameSeedAreByteIdentical) {
  const std::vector<std::string> o = {"scale.eps=0.25", "run.n_particles=64", "grid.h=0.0125", "grid.record_dt=0.125"};
  const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
  EXPECT_EQ(run("simulate", a, o, 1, "7"), 0);
  EXPECT_EQ(run("simulate", b, o, 1, "7"), 0);
  const auto ca = directory_contents(a), cb = directory_contents(b);
  EXPECT_EQ(ca, cb);
  EXPECT_TRUE(ca.count("trajectories.csv"));
  const fs::path c = scratch("rerun_c");
  EXPECT_EQ(run("simulate", c, o, 1, "8"), 0);
  EXPECT_NE(directory_contents(c).at("trajectories.csv"), ca.at("trajectories.csv"));
}

TEST(Cli, ThreadCountDoesNotChangeOutputs) {
  const fs::path a = scratch("threads_1"), b = scratch("threads_4");
  const int status = run("invariant-measure", a, kSmallInvariant, 1, "3");
  EXPECT_NE(status, 2);
  EXPECT_EQ(run("invariant-measure", b, kSmallInvariant, 4, "3"), status);
  EXPECT_EQ(directory_contents(a), directory_contents(b));
}

TEST(Cli, ReportReproducesFromItsEmbeddedConfig) {
  const fs::path a = scratch("embedded_a"), b = scratch("embedded_b");
  const int status = run("invariant-measure", a, kSmallInvariant, 1, "11");
  EXPECT_NE(status, 2);
  const auto report = nlohmann::json::parse(slurp(a / "report.json"));
  std::ofstream(b / "embedded.cfg") << report["config_text"].get<std::string>();
  EXPECT_EQ(run("invariant-measure", b / "out", {}, 1, "", (b / "embedded.cfg").string()), status);
  EXPECT_EQ(directory_contents(a), directory_contents(b / "out"));
}

TEST(Cli, CsvFilesCarryHashAndSeedHeader) {
  const fs::path a = scratch("header");
  EXPECT_EQ(run("audit", a, {"audit.probes=64"}, 1, "9"), 0);
  const auto report = nlohmann::json::parse(slurp(a / "report.json"));
  const std::string csv = slurp(a / "audit.csv");
  const std::string first = csv.substr(0, csv.find('\n'));
  EXPECT_EQ(first, "# config_hash=" + report["config_hash"].get<std::string>() + " seed=9");
  EXPECT_NE(csv.find("lip_b1s1_hat,lip_b2s2_hat,beta1_hat"), std::string::npos);
  EXPECT_TRUE(report["anchors"].contains("margin"));
}

TEST(Cli, NumbersUseSeventeenSignificantDigits) {
  EXPECT_EQ(OutputDir::num(0.1), "0.10000000000000001");
  EXPECT_EQ(OutputDir::num(2.0), "2");
}

TEST(Cli, OutputsStayInsideTheOutputDirectory) {
  const OutputDir out(scratch("escape"), "0", 0);
  EXPECT_THROW(out.csv("../x.csv", {"a"}, {}), ConfigurationError);
  EXPECT_THROW(out.text("sub/x.txt", ""), ConfigurationError);
}

TEST(Cli, ArgumentErrorsExitWithTwo) {
  const std::string out = scratch("args").string();
  std::vector<std::string> args = {"msmv_cli", "audit", "--threads", "0", "--out", out};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  EXPECT_EQ(run_cli(static_cast<int>(argv.size()), argv.data()), 2);
}
