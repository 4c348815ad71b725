#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dspm/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dspm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dspm::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) : path_(fs::temp_directory_path() / ("dspm_cli_" + tag)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string operator/(const std::string& s) const { return (path_ / s).string(); }

 private:
  fs::path path_;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream(path) << text;
}

// Tiny pipeline: 2 scenes of 32×32, 2 training steps.
struct Pipeline {
  std::string train_csv, eval_json;
};

Pipeline run_pipeline(const TempDir& t, int seed) {
  const std::string s = std::to_string(seed);
  EXPECT_EQ(cli({"synth", "--out", t / "data", "--seed", s, "--scenes", "2", "--width", "32", "--height", "32"}).code, 0);
  write_text(t / "cfg.txt", "m0=8\nsteps=2\nepochs=1\nseed=" + s + "\n");
  const CliResult tr = cli({"train", "--data", t / "data", "--config", t / "cfg.txt", "--out", t / "model.ckpt"});
  EXPECT_EQ(tr.code, 0) << tr.err;
  EXPECT_EQ(cli({"infer", "--data", t / "data", "--ckpt", t / "model.ckpt", "--out", t / "pred"}).code, 0);
  const CliResult ev = cli({"eval", "--data", t / "data", "--pred", t / "pred", "--json"});
  EXPECT_EQ(ev.code, 0) << ev.err;
  return {tr.out, ev.out};
}

}  // namespace

TEST(Cli, HelpOnEverySubcommandExitsZero) {
  EXPECT_EQ(cli({"--help"}).code, 0);
  for (const char* sub : {"synth", "train", "infer", "fuse", "eval", "gradcheck"}) {
    const CliResult r = cli({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << sub;
  }
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"bogus"}).code, 2);
  EXPECT_EQ(cli({"synth"}).code, 2);
  EXPECT_EQ(cli({"synth", "--out", "x", "--no-such-flag"}).code, 2);
  EXPECT_EQ(cli({"eval", "--data", "/nonexistent/dir", "--pred", "/nonexistent/dir"}).code, 2);
}

TEST(Cli, BadConfigIsUsageError) {
  TempDir t("badcfg");
  ASSERT_EQ(cli({"synth", "--out", t / "data", "--scenes", "1", "--width", "32", "--height", "32"}).code, 0);
  write_text(t / "cfg.txt", "m9=3\n");
  const CliResult r = cli({"train", "--data", t / "data", "--config", t / "cfg.txt", "--out", t / "m.ckpt"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown key"), std::string::npos);
}

TEST(Cli, RuntimeFailureExitsOne) {
  TempDir t("runtime");
  ASSERT_EQ(cli({"synth", "--out", t / "data", "--scenes", "1", "--width", "32", "--height", "32"}).code, 0);
  write_text(t / "bad.ckpt", "not a checkpoint");
  EXPECT_EQ(cli({"infer", "--data", t / "data", "--ckpt", t / "bad.ckpt", "--out", t / "pred"}).code, 1);
}

TEST(Cli, SettingsAndSeedArePrinted) {
  TempDir t("settings");
  const CliResult r = cli({"synth", "--out", t / "data", "--seed", "7", "--scenes", "1", "--width", "32", "--height", "32"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("seed=7"), std::string::npos);
}

TEST(Cli, SeedSevenPipelineEmitsAllMetrics) {
  TempDir t("seed7");
  const Pipeline p = run_pipeline(t, 7);
  EXPECT_EQ(p.train_csv.rfind("step,L_depth,L_NLL,L_total\n1,", 0), 0u) << p.train_csv;
  const auto j = nlohmann::json::parse(p.eval_json);
  for (const char* k : {"mae", "acc", "comp", "overall"}) {
    ASSERT_TRUE(j.contains(k)) << k;
    EXPECT_TRUE(j[k].is_number()) << k;
  }
  EXPECT_TRUE(fs::exists(t / "model.ckpt.cfg"));
  EXPECT_TRUE(fs::exists(fs::path(t / "pred") / "scene_000" / "depths" / (dspm::view_name(0) + ".pfm")));

  const CliResult table = cli({"eval", "--data", t / "data", "--pred", t / "pred"});
  EXPECT_EQ(table.code, 0);
  EXPECT_NE(table.out.find("Overall"), std::string::npos) << table.out;

  EXPECT_EQ(cli({"fuse", "--data", t / "data", "--pred", t / "pred", "--out", t / "ply"}).code, 0);
  EXPECT_TRUE(fs::exists(fs::path(t / "ply") / "scene_000.ply"));

  EXPECT_EQ(cli({"infer", "--data", t / "data", "--ckpt", t / "model.ckpt", "--out", t / "dbg", "--dump-flow",
                 "--dump-uncertainty"})
                .code,
            0);
  const fs::path dbg = fs::path(t / "dbg") / "scene_000";
  bool flow = false, sigma = false;
  for (const auto& e : fs::recursive_directory_iterator(dbg)) {
    const std::string n = e.path().filename().string();
    flow = flow || n.find("_0.pfm") != std::string::npos;
    sigma = sigma || n.find("_sigma.pfm") != std::string::npos;
  }
  EXPECT_TRUE(flow);
  EXPECT_TRUE(sigma);
}

TEST(Cli, IdenticalSeedsAreBitIdentical) {
  TempDir a("det_a"), b("det_b");
  const Pipeline pa = run_pipeline(a, 3), pb = run_pipeline(b, 3);
  EXPECT_EQ(pa.train_csv, pb.train_csv);
  EXPECT_EQ(pa.eval_json, pb.eval_json);
  EXPECT_EQ(slurp(a / "model.ckpt"), slurp(b / "model.ckpt"));
}

TEST(Cli, GradcheckFailsOnInjectedFault) {
  const CliResult ok = cli({"gradcheck", "--instances", "1", "--filter", "leaky"});
  EXPECT_EQ(ok.code, 0) << ok.out;
  const CliResult bad = cli({"gradcheck", "--instances", "1", "--filter", "broken", "--inject-fault"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}
