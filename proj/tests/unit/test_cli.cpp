#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "worldlm/report.hpp"

namespace worldlm {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::main(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("worldlm_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

// Small enough to run in well under a second per invocation.
std::vector<std::string> fast(std::vector<std::string> args, const std::string& rounds = "2") {
  for (const char* a : {"--rounds", "", "--override", "trainer.local_steps=2", "--override", "model.embed_dim=4",
                        "--override", "nodes.CC.tokens=400", "--override", "nodes.PBC.tokens=400"}) {
    args.emplace_back(*a ? a : rounds);
  }
  return args;
}

TEST(Cli, NoSubcommandFails) { EXPECT_NE(run_cli({}).code, 0); }

TEST(Cli, MissingPresetNamed) {
  const auto r = run_cli({"run", "--preset", "nonesuch"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nonesuch"), std::string::npos) << r.err;
}

TEST(Cli, InvalidConfigIsLineAnchored) {
  const auto dir = scratch("badcfg");
  fs::create_directories(dir);
  write_text(dir / "bad.json", "{\n  \"rounds\": 2,\n  \"model\": {\"embed_dimm\": 4}\n}\n");
  const auto r = run_cli({"run", "--config", (dir / "bad.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.json:3:"), std::string::npos) << r.err;
}

TEST(Cli, BadOverrideFails) {
  EXPECT_EQ(run_cli({"run", "--preset", "fig2", "--override", "model.nope=1"}).code, 2);
}

TEST(Cli, RunWritesTwelveRoundsDeterministically) {
  const auto a = scratch("run_a"), b = scratch("run_b");
  const auto r1 = run_cli(fast({"run", "--preset", "fig2", "--method", "worldlm", "--seed", "1", "--out", a.string()}, "12"));
  ASSERT_EQ(r1.code, 0) << r1.err;
  const auto r2 = run_cli(fast({"run", "--preset", "fig2", "--method", "worldlm", "--seed", "1", "--workers", "3",
                                "--out", b.string()}, "12"));
  ASSERT_EQ(r2.code, 0) << r2.err;
  const auto metrics = read_text(a / "metrics.csv");
  EXPECT_EQ(metrics, read_text(b / "metrics.csv"));
  const auto rows = parse_metrics_csv(metrics);
  EXPECT_EQ(std::ranges::max(rows, {}, &MetricRow::round).round, 11);
  EXPECT_TRUE(fs::exists(a / "manifest.json"));
}

TEST(Cli, CompareIdenticalPlansHasUnitRatio) {
  const auto dir = scratch("cmp");
  const auto r = run_cli(fast({"compare", "--preset", "fig2", "--methods", "worldlm,worldlm", "--out", dir.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = parse_compare_tsv(read_text(dir / "summary.tsv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[1].ratio, 1.0);
  EXPECT_EQ(rows[0].seeds, 1u);
}

TEST(Cli, CompareAcceptsSeedList) {
  const auto dir = scratch("cmp_seeds");
  const auto r = run_cli(fast({"compare", "--preset", "iid", "--methods", "flat_fl,local", "--seed", "1,2", "--out",
                               dir.string()}, "1"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = parse_compare_tsv(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].seeds, 2u);
  EXPECT_DOUBLE_EQ(rows[0].ratio, 1.0);
}

TEST(Cli, AblateNoneHasZeroDelta) {
  const auto dir = scratch("abl");
  const auto r = run_cli(fast({"ablate", "--preset", "fig2", "--axis", "none", "--out", dir.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto table = read_text(dir / "paired.tsv");
  std::istringstream in(table);
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  EXPECT_EQ(line.substr(line.rfind('\t') + 1), "0") << table;
}

TEST(Cli, AblateRejectsUnknownAxis) {
  EXPECT_NE(run_cli({"ablate", "--preset", "fig2", "--axis", "colour"}).code, 0);
}

TEST(Cli, PresetDumpParsesBack) {
  const auto r = run_cli({"preset", "dp-cc-wk"});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(parse_config(r.out), preset("dp-cc-wk"));
}

}  // namespace
}  // namespace worldlm
