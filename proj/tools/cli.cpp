#include "cli.hpp"

#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "worldlm/config.hpp"
#include "worldlm/report.hpp"

namespace worldlm::cli {

namespace {

struct PlanOptions {
  std::string preset;
  std::string config_path;
  std::string method = "worldlm";
  int rounds = -1;
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  std::string out_dir;
  std::vector<std::string> overrides;
};

void add_plan_flags(CLI::App* cmd, PlanOptions& o, bool multi_seed) {
  cmd->add_option("--preset", o.preset, "Built-in experiment (fig2, fig2-swapped, iid, dp-cc-wk, dp-pbc-pba)");
  cmd->add_option("--config", o.config_path, "Experiment JSON file");
  cmd->add_option("--rounds", o.rounds, "Rounds K (overrides the config)")->check(CLI::PositiveNumber);
  if (multi_seed) {
    cmd->add_option("--seed", o.seeds, "Seeds; repeat or comma-separate")->delimiter(',');
  } else {
    cmd->add_option("--seed", o.seeds, "Seed (overrides the config)")->expected(1);
  }
  cmd->add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--out", o.out_dir, "Output directory");
  cmd->add_option("--override", o.overrides, "key=value applied to the config (repeatable)");
}

ExperimentConfig resolve_config(const PlanOptions& o) {
  if (o.preset.empty() == o.config_path.empty()) throw std::invalid_argument("give exactly one of --preset or --config");
  ExperimentConfig cfg = o.preset.empty() ? load_config(o.config_path) : preset(o.preset);
  if (!o.config_path.empty() && cfg.data.kind == "text") {
    // Text paths are relative to the config file.
    const auto base = std::filesystem::path(o.config_path).parent_path();
    for (auto& n : cfg.nodes) {
      if (!n.text.empty() && std::filesystem::path(n.text).is_relative()) n.text = (base / n.text).string();
    }
  }
  for (const auto& ov : o.overrides) apply_override(cfg, ov);
  if (o.rounds > 0) cfg.rounds = o.rounds;
  if (cfg.rounds < 1) throw std::invalid_argument("rounds must be at least 1");
  return cfg;
}

std::vector<NodeId> data_leaves(const ExperimentSetup& s) {
  std::vector<NodeId> out;
  for (NodeId id : s.tree.leaves()) {
    if (s.shards.contains(id)) out.push_back(id);
  }
  return out;
}

struct SeedRun {
  std::uint64_t seed;
  std::vector<double> leaf_ppl;
};

SeedRun run_one(ExperimentConfig cfg, const std::string& method, std::uint64_t seed, const PlanOptions& o,
                const std::filesystem::path& dir, const std::map<std::string, std::string>& extra) {
  cfg.seed = seed;
  const ExperimentSetup setup = build_setup(cfg, o.workers);
  const RunResult result = run_method(setup, method);
  if (!dir.empty()) write_run(dir, result, {method, cfg, o.overrides, o.workers, extra}, setup);
  SeedRun sr{seed, {}};
  for (const auto& r : final_rows(result.metrics, "test", data_leaves(setup))) sr.leaf_ppl.push_back(r.perplexity);
  return sr;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << std::fixed << v;
  return ss.str();
}

int cmd_run(const PlanOptions& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  const auto seed = o.seeds.empty() ? cfg.seed : o.seeds.front();
  const std::filesystem::path dir = o.out_dir.empty() ? std::filesystem::path("runs") / (cfg.id + "-" + o.method)
                                                      : std::filesystem::path(o.out_dir);
  const auto sr = run_one(cfg, o.method, seed, o, dir, {});
  const auto s = summarize(sr.leaf_ppl);
  out << o.method << " on " << cfg.id << " (seed " << seed << ", " << cfg.rounds << " rounds): leaf test perplexity "
      << fmt(s.mean) << " +/- " << fmt(s.std) << "\n";
  out << "wrote " << (dir / "metrics.csv").string() << "\n";
  return 0;
}

int cmd_compare(const PlanOptions& o, const std::vector<std::string>& methods, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  const auto seeds = o.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : o.seeds;
  const std::filesystem::path dir = o.out_dir.empty() ? std::filesystem::path("runs") / (cfg.id + "-compare")
                                                      : std::filesystem::path(o.out_dir);
  std::vector<CompareRow> rows;
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    std::vector<double> pooled;
    for (auto seed : seeds) {
      const auto run_dir = dir / (std::to_string(mi) + "-" + methods[mi]) / ("seed-" + std::to_string(seed));
      const auto sr = run_one(cfg, methods[mi], seed, o, run_dir, {});
      pooled.insert(pooled.end(), sr.leaf_ppl.begin(), sr.leaf_ppl.end());
    }
    const auto s = summarize(pooled);
    rows.push_back({methods[mi], seeds.size(), s.mean, s.std, 1.0});
  }
  for (auto& r : rows) r.ratio = r.mean / rows.front().mean;
  const std::string table = compare_tsv(rows);
  write_text(dir / "summary.tsv", table);
  out << table;
  return 0;
}

void toggle(ExperimentConfig& cfg, const std::string& axis) {
  if (axis == "none") return;
  if (axis == "residuals") {
    cfg.residual.nu = 0;
  } else if (axis == "attention") {
    cfg.attention.enabled = false;
  } else if (axis == "swap") {
    cfg.data.swap_small_leaves = !cfg.data.swap_small_leaves;
  } else if (axis == "dp") {
    // DP on the first sibling group made only of leaves.
    const auto tree = build_tree(cfg);
    for (NodeId id : tree.ids()) {
      const auto kids = tree.children_of(id);
      if (kids.empty() || !std::ranges::all_of(kids, [&](NodeId c) { return tree.is_leaf(c); })) continue;
      for (NodeId c : kids) {
        for (auto& n : cfg.nodes) {
          if (n.name == tree.node(c).name) n.dp = true;
        }
      }
      return;
    }
    throw std::invalid_argument("dp ablation: no internal node with only leaf children");
  } else {
    throw std::invalid_argument("unknown ablation axis \"" + axis + "\"");
  }
}

int cmd_ablate(const PlanOptions& o, const std::string& axis, std::ostream& out) {
  const ExperimentConfig base = resolve_config(o);
  ExperimentConfig toggled = base;
  toggle(toggled, axis);
  const auto seeds = o.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : o.seeds;
  const std::filesystem::path dir = o.out_dir.empty() ? std::filesystem::path("runs") / (base.id + "-ablate-" + axis)
                                                      : std::filesystem::path(o.out_dir);
  std::string table = "seed\tbaseline_leaf_ppl\ttoggled_leaf_ppl\tdelta\n";
  for (auto seed : seeds) {
    const auto tag = "seed-" + std::to_string(seed);
    const auto a = run_one(base, o.method, seed, o, dir / "baseline" / tag, {{"ablation_axis", axis}, {"arm", "baseline"}});
    const auto b = run_one(toggled, o.method, seed, o, dir / "toggled" / tag, {{"ablation_axis", axis}, {"arm", "toggled"}});
    const double ma = summarize(a.leaf_ppl).mean;
    const double mb = summarize(b.leaf_ppl).mean;
    std::ostringstream line;
    line.precision(9);
    line << seed << "\t" << ma << "\t" << mb << "\t" << (mb - ma) << "\n";
    table += line.str();
  }
  write_text(dir / "paired.tsv", table);
  out << "axis: " << axis << "\n" << table;
  return 0;
}

}  // namespace

int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical federated language-model training simulator"};
  app.require_subcommand(1);

  PlanOptions run_opts;
  auto* run = app.add_subcommand("run", "Run one method on one experiment");
  add_plan_flags(run, run_opts, false);
  run->add_option("--method", run_opts.method, "worldlm, flat_fl, local or centralized")
      ->check(CLI::IsMember(method_names()));

  PlanOptions cmp_opts;
  std::vector<std::string> methods = method_names();
  auto* cmp = app.add_subcommand("compare", "Run several methods and summarize final leaf perplexity");
  add_plan_flags(cmp, cmp_opts, true);
  cmp->add_option("--methods", methods, "Methods to compare; the first is the ratio reference")
      ->delimiter(',')
      ->check(CLI::IsMember(method_names()));

  PlanOptions abl_opts;
  std::string axis;
  auto* abl = app.add_subcommand("ablate", "Paired runs with one axis toggled");
  add_plan_flags(abl, abl_opts, true);
  abl->add_option("--method", abl_opts.method, "Method to ablate")->check(CLI::IsMember(method_names()));
  abl->add_option("--axis", axis, "residuals, attention, dp, swap or none")
      ->required()
      ->check(CLI::IsMember({"residuals", "attention", "dp", "swap", "none"}));

  std::string preset_name;
  auto* dump = app.add_subcommand("preset", "Print a built-in experiment as JSON");
  dump->add_option("name", preset_name, "Preset name")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*run) return cmd_run(run_opts, out);
    if (*cmp) return cmd_compare(cmp_opts, methods, out);
    if (*abl) return cmd_ablate(abl_opts, axis, out);
    if (*dump) {
      out << config_to_json(preset(preset_name));
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace worldlm::cli
