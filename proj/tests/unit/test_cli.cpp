#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <unistd.h>

#include "tdt_cli/commands.hpp"

using namespace tdt;
using namespace tdt::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "tdt");
  std::ostringstream out, err;
  int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// Every file in a directory except the wall-clock sidecar.
std::map<std::string, std::string> deterministic_files(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename() != "timing.json") files[e.path().filename().string()] = slurp(e.path());
  return files;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("tdt_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);

    data::TaskSpec spec;
    spec.n_classes = 2;
    spec.keywords_per_class = 3;
    spec.keywords_per_example = 1;
    spec.vocab_size = 60;
    spec.min_len = 3;
    spec.max_len = 6;
    write_json_file((root_ / "spec.json").string(), data::to_json(spec));

    model::ModelConfig m;
    m.d_model = 16;
    m.n_layers = 1;
    m.n_heads = 2;
    m.d_ff = 32;
    m.max_len = 8;
    train::TrainConfig t;
    t.total_steps = 60;
    t.warmup_steps = 10;
    t.batch_size = 16;
    t.lr = 3e-3;
    t.eval_interval = 30;
    write_json_file((root_ / "train.json").string(),
                    json{{"model", model::to_json(m)}, {"train", train::to_json(t)}});

    auto g = run({"generate", "--spec", (root_ / "spec.json").string(), "--seed", "3", "--n-train", "300",
                  "--n-dev", "60", "--n-test", "80", "--n-anti", "80", "--out", data_dir()});
    ASSERT_EQ(g.code, 0) << g.err;
    auto tr = run({"train", "--config", (root_ / "train.json").string(), "--data", data_dir(), "--out",
                   (root_ / "tdt_run").string()});
    ASSERT_EQ(tr.code, 0) << tr.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string data_dir() { return (root_ / "data").string(); }
  static std::string checkpoint() { return (root_ / "tdt_run" / "checkpoint.json").string(); }
  static std::string dir(const std::string& name) { return (root_ / name).string(); }

  static fs::path root_;
};

fs::path CliTest::root_;

}  // namespace

TEST_F(CliTest, GenerateWritesSplitsAndManifest) {
  for (auto name : {"train.jsonl", "dev.jsonl", "test_iid.jsonl", "test_antispurious.jsonl", "manifest.json",
                    "config_snapshot.json"})
    EXPECT_TRUE(fs::is_regular_file(fs::path(data_dir()) / name)) << name;
  auto manifest = read_json_file((fs::path(data_dir()) / "manifest.json").string());
  EXPECT_EQ(manifest["seed"], 3);
  EXPECT_EQ(manifest["files"]["train.jsonl"]["examples"], 300);
  EXPECT_EQ(line_count(fs::path(data_dir()) / "test_antispurious.jsonl"), 80u);
}

TEST_F(CliTest, GenerateWithMissingSpecLeavesNoOutput) {
  auto r = run({"generate", "--spec", dir("no_such_spec.json"), "--out", dir("gen_missing")});
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(r.err.empty());
  EXPECT_FALSE(fs::exists(dir("gen_missing")));
}

TEST_F(CliTest, GenerateIsDeterministic) {
  auto r = run({"generate", "--spec", (root_ / "spec.json").string(), "--seed", "3", "--n-train", "300", "--n-dev",
                "60", "--n-test", "80", "--n-anti", "80", "--out", dir("gen_again")});
  ASSERT_EQ(r.code, 0) << r.err;
  auto a = read_json_file((fs::path(data_dir()) / "manifest.json").string());
  auto b = read_json_file(dir("gen_again") + "/manifest.json");
  EXPECT_EQ(a["files"], b["files"]);
  EXPECT_EQ(deterministic_files(data_dir()), deterministic_files(dir("gen_again")));
}

TEST_F(CliTest, GenerateRejectsInvalidSpec) {
  auto r = run({"generate", "--rho", "1.5", "--out", dir("gen_bad")});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("rho"), std::string::npos);
}

TEST_F(CliTest, TrainWritesArtifacts) {
  for (auto name : {"checkpoint.json", "run_record.json", "metrics.csv", "timing.json", "config_snapshot.json"})
    EXPECT_TRUE(fs::is_regular_file(root_ / "tdt_run" / name)) << name;
  auto record = read_json_file(dir("tdt_run") + "/run_record.json");
  EXPECT_EQ(record["label"], "tdt");
  EXPECT_EQ(line_count(root_ / "tdt_run" / "metrics.csv"), 61u);
  auto snap = read_json_file(dir("tdt_run") + "/config_snapshot.json");
  EXPECT_EQ(snap["model"]["vocab_size"], 60);
  EXPECT_EQ(snap["model"]["n_classes"], 2);
}

TEST_F(CliTest, ZeroWeightsLabelRunVanilla) {
  auto r = run({"train", "--config", (root_ / "train.json").string(), "--data", data_dir(), "--alpha", "0", "--beta",
                "0", "--steps", "5", "--warmup", "0", "--out", dir("vanilla_run")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_json_file(dir("vanilla_run") + "/run_record.json")["label"], "vanilla");
}

TEST_F(CliTest, NegativeMarginIsValidationError) {
  auto r = run({"train", "--data", data_dir(), "--margin", "-1", "--out", dir("bad_margin")});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("margin"), std::string::npos);
}

TEST_F(CliTest, TrainWithoutDataIsError) {
  auto r = run({"train", "--data", dir("nowhere"), "--out", dir("no_data")});
  EXPECT_NE(r.code, 0);
}

TEST_F(CliTest, EvalReportsAccuracy) {
  auto r = run({"eval", "--checkpoint", checkpoint(), "--data", data_dir(), "--split", "test_iid", "--out",
                dir("eval")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(root_ / "eval" / "predictions.csv"), 81u);
  auto e = read_json_file(dir("eval") + "/eval.json");
  EXPECT_GE(e["accuracy"].get<double>(), 0.0);
  EXPECT_LE(e["accuracy"].get<double>(), 1.0);
}

TEST_F(CliTest, DropCurveHasSevenRowsPerOrder) {
  auto r = run({"analyze", "--checkpoint", checkpoint(), "--data", data_dir(), "--drop-curve", "--rates",
                "0,0.1,0.2,0.3,0.4,0.5,0.6", "--out", dir("drop")});
  ASSERT_EQ(r.code, 0) << r.err;
  auto csv = slurp(root_ / "drop" / "drop_curve.csv");
  std::size_t desc = 0, asc = 0;
  std::stringstream ss(csv);
  for (std::string line; std::getline(ss, line);) {
    desc += line.ends_with(",descending");
    asc += line.ends_with(",ascending");
  }
  EXPECT_EQ(desc, 7u);
  EXPECT_EQ(asc, 7u);
}

TEST_F(CliTest, PerturbReportsTenAccuraciesPerRate) {
  auto r = run({"analyze", "--checkpoint", checkpoint(), "--data", data_dir(), "--perturb", "--rates", "0.1..0.5",
                "--n", "10", "--out", dir("perturb")});
  ASSERT_EQ(r.code, 0) << r.err;
  auto csv = slurp(root_ / "perturb" / "perturb_report.csv");
  std::map<std::string, int> per_rate;
  std::stringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "rate,seed,accuracy");
  while (std::getline(ss, line)) ++per_rate[line.substr(0, line.find(','))];
  ASSERT_EQ(per_rate.size(), 5u);
  for (const auto& [rate, n] : per_rate) EXPECT_EQ(n, 10) << rate;
}

TEST_F(CliTest, UnknownAnalysisListsValidNames) {
  auto r = run({"analyze", "--checkpoint", checkpoint(), "--data", data_dir(), "--analysis", "saliency", "--out",
                dir("unknown")});
  EXPECT_EQ(r.code, kExitUsage);
  for (const auto& name : kAnalysisNames) EXPECT_NE(r.err.find(name), std::string::npos) << name;
}

TEST_F(CliTest, MissingCheckpointIsError) {
  auto r = run({"analyze", "--checkpoint", dir("nope.json"), "--data", data_dir(), "--histogram", "--out",
                dir("no_ckpt")});
  EXPECT_NE(r.code, 0);
}

TEST_F(CliTest, AllAnalysesRunTogether) {
  auto r = run({"analyze", "--checkpoint", checkpoint(), "--data", data_dir(), "--histogram", "--export-reprs",
                "--domain-eval", "--mapping", "1,0", "--out", dir("all")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(root_ / "all" / "representations.csv"), 1 + 3 * 80u);
  EXPECT_TRUE(fs::is_regular_file(root_ / "all" / "histogram.csv"));
  EXPECT_TRUE(fs::is_regular_file(root_ / "all" / "domain_eval.json"));
}

TEST_F(CliTest, GradcheckPassesQuickly) {
  auto t0 = std::chrono::steady_clock::now();
  auto r = run({"gradcheck", "--out", dir("gc")});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_LT(secs, 60.0);
  auto report = read_json_file(dir("gc") + "/gradcheck.json");
  EXPECT_LT(report["max_rel_error"].get<double>(), 1e-4);
  EXPECT_NE(r.out.find("layer0"), std::string::npos);
}

TEST_F(CliTest, GradcheckHardNotesStraightThrough) {
  auto r = run({"gradcheck", "--variant", "hard", "--coords", "2", "--out", dir("gc_hard")});
  EXPECT_NE(r.out.find("straight-through"), std::string::npos);
  EXPECT_NE(r.out.find("unchecked"), std::string::npos);
}

TEST_F(CliTest, GradcheckStepIsConfigurable) {
  auto r = run({"gradcheck", "--h", "1e-3", "--coords", "2", "--out", dir("gc_h")});
  auto report = read_json_file(dir("gc_h") + "/gradcheck.json");
  EXPECT_EQ(report["h"], 1e-3);
  EXPECT_NE(r.out.find("max rel error"), std::string::npos);
  EXPECT_EQ(r.code == 0, report["max_rel_error"].get<double>() < 1e-4);
}

TEST_F(CliTest, ReplayFromSnapshotIsByteIdentical) {
  ASSERT_EQ(run({"eval", "--checkpoint", checkpoint(), "--data", data_dir(), "--out", dir("eval")}).code, 0);
  ASSERT_EQ(run({"analyze", "--checkpoint", checkpoint(), "--data", data_dir(), "--perturb", "--n", "3", "--out",
                 dir("perturb")}).code,
            0);
  const std::vector<std::pair<std::string, std::string>> runs = {
      {"generate", data_dir()}, {"train", dir("tdt_run")}, {"eval", dir("eval")}, {"analyze", dir("perturb")}};
  for (const auto& [cmd, original] : runs) {
    const auto replay = dir("replay_" + cmd);
    auto r = run({cmd, "--config", original + "/config_snapshot.json", "--out", replay});
    ASSERT_EQ(r.code, 0) << cmd << ": " << r.err;
    EXPECT_EQ(deterministic_files(original), deterministic_files(replay)) << cmd;
  }
}

TEST_F(CliTest, ConfigForOtherCommandIsRejected) {
  auto r = run({"eval", "--config", dir("tdt_run") + "/config_snapshot.json", "--out", dir("wrong_cmd")});
  EXPECT_EQ(r.code, kExitUsage);
}

TEST(GridScript, LaunchesTwelveRuns) {
  auto tmp = fs::temp_directory_path() / "tdt_grid_test";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  auto fake = tmp / "fake_tdt.sh";
  {
    std::ofstream f(fake);
    f << "#!/usr/bin/env bash\necho \"$@\" >> " << (tmp / "calls.txt").string() << "\n";
  }
  fs::permissions(fake, fs::perms::owner_all);
  const std::string cmd = "TDT_BIN=" + fake.string() + " bash " TDT_GRID_SCRIPT " data " + (tmp / "runs").string() +
                          " --steps 5 > /dev/null";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  auto calls = slurp(tmp / "calls.txt");
  EXPECT_EQ(std::count(calls.begin(), calls.end(), '\n'), 12);
  EXPECT_NE(calls.find("--margin 2 --alpha 4 --beta 0.5 --steps 5"), std::string::npos);
  EXPECT_NE(calls.find("--margin 0 --alpha 0.5 --beta 1"), std::string::npos);
  fs::remove_all(tmp);
}
