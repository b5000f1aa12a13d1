#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tdcss/checkpoint.hpp"
#include "tdcss/data.hpp"
#include "test_util.hpp"

using namespace tdcss;
using tdcss::testing::TempDir;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

/// Runs the CLI with `args` (shell-quoted by the caller) in `dir`.
Result run_cli(const std::string& args, const TempDir& dir) {
  const std::string err_path = dir.file("stderr.txt");
  const std::string cmd = "cd '" + dir.path().string() + "' && '" + std::string(TDCSS_CLI_PATH) + "' " + args +
                          " 2> '" + err_path + "'";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream e(err_path);
  r.err.assign(std::istreambuf_iterator<char>(e), std::istreambuf_iterator<char>());
  return r;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

const std::string kSmall =
    "--set num_seen=5 --set num_unseen=2 --set semantic_dim=4 --set feature_dim=8 --set task_signal_dim=3 "
    "--set nuisance_dim=3 --set samples_per_class=40";
const std::string kQuick = "--set batches_stage1=2 --set batches_stage2=2 --set batch_size=16 --set eval_every=1";

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  TempDir dir("cli_none");
  EXPECT_EQ(run_cli("", dir).code, 2);
  EXPECT_EQ(run_cli("frobnicate", dir).code, 2);
  EXPECT_EQ(run_cli("--help", dir).code, 0);
}

TEST(Cli, GenDataIsLoadableAndDeterministic) {
  TempDir dir("cli_gen");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " --seed 7 -o a.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("gen-data " + kSmall + " --seed 7 -o b.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("gen-data " + kSmall + " --seed 8 -o c.zslb", dir).code, 0);
  EXPECT_EQ(read_bytes(dir.file("a.zslb")), read_bytes(dir.file("b.zslb")));
  EXPECT_NE(read_bytes(dir.file("a.zslb")), read_bytes(dir.file("c.zslb")));
  const auto b = load_bundle(dir.file("a.zslb"));
  EXPECT_EQ(b.num_seen(), 5u);
  EXPECT_EQ(b.num_rows(), 7u * 40u);
  EXPECT_NE(read_text(dir.file("a.zslb.config")).find("config_hash = "), std::string::npos);
}

TEST(Cli, MalformedConfigKeyExitsTwoNamingTheKey) {
  TempDir dir("cli_badkey");
  auto r = run_cli("gen-data --set no_such_knob=3 -o x.zslb", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no_such_knob"), std::string::npos) << r.err;

  std::ofstream(dir.file("bad.conf")) << "epochs = 10\nlambda_mine = lots\n";
  r = run_cli("gen-data -c bad.conf -o x.zslb", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("lambda_mine"), std::string::npos) << r.err;

  r = run_cli("train --ablate wings", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ablation"), std::string::npos) << r.err;
}

TEST(Cli, MissingBundleExitsTwo) {
  TempDir dir("cli_missing");
  const auto r = run_cli("train -b nowhere.zslb -o run", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nowhere.zslb"), std::string::npos) << r.err;
}

TEST(Cli, TrainEvalAndJson) {
  TempDir dir("cli_train");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  const auto t = run_cli("train -b d.zslb -o run --epochs 2 " + kQuick, dir);
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(t.out.empty());
  EXPECT_NE(t.err.find("epoch 2"), std::string::npos);

  // one JSON line per evaluated epoch
  std::istringstream lines(read_text(dir.file("run/metrics.jsonl")));
  std::string line;
  std::vector<nlohmann::json> recs;
  while (std::getline(lines, line)) recs.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(recs.size(), 2u);
  for (const char* k : {"epoch", "u", "s", "H", "per_class", "split", "seed", "config_hash"})
    EXPECT_TRUE(recs[1].contains(k)) << k;
  EXPECT_EQ(recs[1]["epoch"], 2);

  const auto e = run_cli("eval -k run/checkpoint.tdck -b d.zslb --json", dir);
  ASSERT_EQ(e.code, 0) << e.err;
  const auto j = nlohmann::json::parse(e.out);
  EXPECT_EQ(j["config_hash"], recs[1]["config_hash"]);
  EXPECT_DOUBLE_EQ(j["H"].get<double>(), recs[1]["H"].get<double>());
  const auto final_metrics = nlohmann::json::parse(read_text(dir.file("run/final_metrics.json")));
  EXPECT_DOUBLE_EQ(final_metrics["u"].get<double>(), j["u"].get<double>());

  const auto table = run_cli("eval -k run/checkpoint.tdck -b d.zslb", dir);
  EXPECT_EQ(table.code, 0);
  EXPECT_NE(table.out.find("H = "), std::string::npos);
}

TEST(Cli, CorruptCheckpointExitsTwoWithChecksum) {
  TempDir dir("cli_crc");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("train -b d.zslb -o run --epochs 1 " + kQuick, dir).code, 0);
  auto bytes = read_bytes(dir.file("run/checkpoint.tdck"));
  bytes[bytes.size() / 2] ^= 0x10;
  std::ofstream(dir.file("bad.tdck"), std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  const auto r = run_cli("eval -k bad.tdck -b d.zslb", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("checksum"), std::string::npos) << r.err;
}

TEST(Cli, DimensionMismatchExitsTwo) {
  TempDir dir("cli_dims");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("gen-data " + kSmall + " --set feature_dim=9 -o wide.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("train -b d.zslb -o run --epochs 1 " + kQuick, dir).code, 0);
  const auto r = run_cli("eval -k run/checkpoint.tdck -b wide.zslb", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("features"), std::string::npos) << r.err;
}

TEST(Cli, NumericFailureExitsThreeWithEpochContext) {
  TempDir dir("cli_nan");
  auto b = generate_synthetic([] {
    SynthConfig s;
    s.num_seen = 5;
    s.num_unseen = 2;
    s.semantic_dim = 4;
    s.feature_dim = 8;
    s.task_signal_dim = 3;
    s.nuisance_dim = 3;
    s.samples_per_class = 40;
    return s;
  }());
  b.features.row(0).setConstant(std::numeric_limits<float>::infinity());  // a seen row
  b.features.row(1).setConstant(std::numeric_limits<float>::infinity());
  b.features.row(2).setConstant(std::numeric_limits<float>::infinity());
  save_bundle(b, dir.file("inf.zslb"));
  const auto r = run_cli("train -b inf.zslb -o run --epochs 3 --set batch_size=200 --set batches_stage1=1 "
                         "--set batches_stage2=1",
                         dir);
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("epoch 1"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("batch"), std::string::npos) << r.err;
}

TEST(Cli, ResumeReproducesUninterruptedRun) {
  TempDir dir("cli_resume");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("train -b d.zslb -o full --epochs 4 " + kQuick, dir).code, 0);
  ASSERT_EQ(run_cli("train -b d.zslb -o half --epochs 2 " + kQuick, dir).code, 0);
  const auto r = run_cli("train -o resumed --resume half/checkpoint.tdck --epochs 4", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_bytes(dir.file("full/checkpoint.tdck")), read_bytes(dir.file("resumed/checkpoint.tdck")));
}

TEST(Cli, AblateAndShotsFlagsReachTheConfig) {
  TempDir dir("cli_flags");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("train -b d.zslb -o run --epochs 1 --ablate cps --fszu-shots 2 " + kQuick, dir).code, 0);
  const auto cfg = read_text(dir.file("run/config.txt"));
  EXPECT_NE(cfg.find("ablation = cps"), std::string::npos);
  EXPECT_NE(cfg.find("fszu_shots = 2"), std::string::npos);
  const auto rec = nlohmann::json::parse(read_text(dir.file("run/metrics.jsonl")));
  EXPECT_FALSE(rec["stage1"].contains("center_ce"));
  EXPECT_FALSE(rec["stage1"].contains("di"));
  EXPECT_TRUE(rec["stage2"].empty());
}

TEST(Cli, FullScaleSwitchesWidths) {
  TempDir dir("cli_full");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("train -b d.zslb -o run --paper-scale --epochs 1 --set eval_every=0 " + kQuick, dir).code, 0);
  const auto ck = load_checkpoint(dir.file("run/checkpoint.tdck"));
  EXPECT_EQ(ck.state.model.dims.extractor_dim, ModelDims::paper(8, 4).extractor_dim);
  EXPECT_NE(ck.config_echo.find("scale = paper"), std::string::npos);
}

TEST(Cli, AblationSweepHasTwelveRowsAndFourMedians) {
  TempDir dir("cli_sweep");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  const auto r =
      run_cli("sweep -b d.zslb --ablations full,tfd,eps,cps --seeds 3 --set epochs=1 -o s.csv " + kQuick, dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = parse_csv(read_text(dir.file("s.csv")));
  ASSERT_EQ(rows.size(), 1u + 12u + 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"setting", "seed", "u", "s", "H", "config_hash"}));

  // medians recomputed from the parsed rows match the printed ones exactly
  std::map<std::string, std::vector<double>> h_by_cell;
  for (std::size_t i = 1; i <= 12; ++i) h_by_cell[rows[i][0]].push_back(std::stod(rows[i][4]));
  EXPECT_EQ(h_by_cell.size(), 4u);
  for (std::size_t i = 13; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][1], "median");
    auto v = h_by_cell.at(rows[i][0]);
    std::sort(v.begin(), v.end());
    EXPECT_EQ(std::stod(rows[i][4]), v[1]) << rows[i][0];
  }
  for (const char* name : {"full", "no_tfd", "no_eps", "no_cps"}) EXPECT_TRUE(h_by_cell.count(name)) << name;
}

TEST(Cli, ShotSweepMirrorsTheFewShotTable) {
  TempDir dir("cli_fszu");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  const auto r = run_cli("sweep -b d.zslb --shots all,10,5,2 --seeds 1 --set epochs=1 -o f.csv " + kQuick, dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = parse_csv(read_text(dir.file("f.csv")));
  ASSERT_EQ(rows.size(), 1u + 4u + 4u);
  std::vector<std::string> names;
  for (std::size_t i = 5; i < rows.size(); ++i) names.push_back(rows[i][0]);
  EXPECT_EQ(names, (std::vector<std::string>{"shots=all", "shots=10", "shots=5", "shots=2"}));
}

TEST(Cli, ExportEmbeddingsWritesEveryKind) {
  TempDir dir("cli_export");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " -o d.zslb", dir).code, 0);
  ASSERT_EQ(run_cli("train -b d.zslb -o run --epochs 1 " + kQuick, dir).code, 0);
  const auto r = run_cli("export-embeddings -k run/checkpoint.tdck -b d.zslb --count 32 -o e.csv", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = read_text(dir.file("e.csv"));
  EXPECT_EQ(text.rfind("# config_hash = ", 0), 0u);
  const auto rows = parse_csv(text);
  std::map<std::string, std::size_t> kinds;
  for (std::size_t i = 1; i < rows.size(); ++i) ++kinds[rows[i][1]];
  EXPECT_EQ(kinds["center"], 32u);
  EXPECT_EQ(kinds["edge"], 32u);
  EXPECT_EQ(kinds["real"], kinds["h_ind"]);
}

TEST(Cli, GoldenCheckpointReproducesCommittedMetrics) {
  TempDir dir("cli_golden");
  const std::string fx = TDCSS_FIXTURE_DIR;
  const auto r = run_cli("eval -k '" + fx + "/golden.tdck' -b '" + fx + "/golden.zslb' --json", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, read_text(fx + "/golden_metrics.json"));
}
