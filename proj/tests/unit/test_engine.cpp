#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "worldlm/engine.hpp"
#include "worldlm/report.hpp"

namespace worldlm {
namespace {

TrainerConfig tiny_trainer(int steps = 5) {
  TrainerConfig t;
  t.local_steps = steps;
  t.batch_size = 8;
  t.schedule = {0.05, 1e-2, 200};
  return t;
}

ModelConfig tiny_model(std::size_t keys = 1) {
  ModelConfig m;
  m.vocab_size = 8;
  m.embed_dim = 4;
  m.num_blocks = 2;
  m.expansion_ratio = 2;
  m.key_block_count = keys;
  m.context_len = 2;
  return m;
}

/// Leaves draw from distinct clustered sources; internal nodes get the
/// budget-weighted mixture of their leaves.
ExperimentSetup tiny_setup(FederationTree tree, std::size_t keys, int rounds, std::size_t leaf_tokens = 400) {
  ExperimentSetup s;
  s.seed = 11;
  s.rounds = rounds;
  s.model = tiny_model(keys);
  s.tree = std::move(tree);
  const auto leaves = s.tree.leaves();
  const auto sources = make_clustered_sources(2, (leaves.size() + 1) / 2, 0.8, s.model.vocab_size, 5);
  std::map<NodeId, MixtureSpec> assignment;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    assignment[leaves[i]] = {{{static_cast<int>(i), 1.0, leaf_tokens}}};
  }
  HierarchyDataOptions opts;
  opts.min_eval_tokens = 64;
  auto shards = build_hierarchy_dataset(s.tree, sources, assignment, 3, opts);
  for (auto& [id, shard] : shards) {
    if (s.tree.node(id).trains_locally || s.tree.is_leaf(id)) s.shards.emplace(id, std::move(shard));
  }
  return s;
}

ExperimentSetup fedavg_setup(int rounds) {
  auto s = tiny_setup(star_tree(4, tiny_trainer(), false), 0, rounds);
  s.server = {1.0, 0.0};
  return s;
}

TEST(Engine, DepthOneWithoutKeysIsFedAvg) {
  const auto s = fedavg_setup(5);
  ASSERT_EQ(stage_count(s), 1);
  const auto engine = Engine(s).run();
  const auto reference = oracle::fedavg_reference(s, 5);
  EXPECT_EQ(encode_payload(engine.final_models.at(kRootId)), encode_payload(reference));
  const auto flat = run_flat_fl(s, 5);
  EXPECT_EQ(encode_payload(flat.final_models.at(kRootId)), encode_payload(reference));
}

TEST(Engine, ZeroRoundsIsInitialModel) {
  auto s = tiny_setup(fig2_tree(tiny_trainer()), 1, 0);
  const auto r = Engine(s).run();
  EXPECT_TRUE(r.metrics.empty());
  const auto init = init_model(s.model, derive_seed(s.seed, Stream::init));
  for (const auto& [id, m] : r.final_models) EXPECT_EQ(m, init) << "node " << id;
}

TEST(Engine, ThreeStagesOfSevenNodesPerRound) {
  const int rounds = 12;
  const auto s = tiny_setup(fig2_tree(tiny_trainer(2)), 1, rounds);
  EXPECT_EQ(stage_count(s), 3);
  const auto r = Engine(s).run();
  for (const std::string split : {"val", "test"}) {
    const auto n = std::ranges::count_if(r.metrics, [&](const MetricRow& m) { return m.split == split; });
    EXPECT_EQ(n, rounds * 3 * 7) << split;
  }
  EXPECT_EQ(r.timing.size(), static_cast<std::size_t>(rounds * 3));
}

TEST(Engine, ChildrenStartFromParentBackbone) {
  auto s = tiny_setup(fig2_tree(tiny_trainer(3)), 1, 3);
  s.workers = 1;
  Engine engine(s);
  int checked = 0;
  engine.set_observer([&](const EngineEvent& e) {
    if (e.kind != EngineEvent::Kind::entered || e.node == kRootId) return;
    const NodeId parent = *engine.setup().tree.node(e.node).parent;
    EXPECT_EQ(e.backbone, engine.state(parent).round_backbone) << "node " << e.node << " round " << e.round;
    ++checked;
  });
  engine.run();
  EXPECT_EQ(checked, 3 * 6);
}

TEST(Engine, KeysStayPersonal) {
  const auto s = tiny_setup(fig2_tree(tiny_trainer(3)), 1, 2);
  const auto r = Engine(s).run();
  const auto part = make_partition(s.model);
  EXPECT_NE(keys_of(r.final_models.at(3), part), keys_of(r.final_models.at(5), part));
}

TEST(Engine, WorkerCountDoesNotChangeResults) {
  auto s = tiny_setup(fig2_tree(tiny_trainer(3)), 1, 3);
  s.dp.enabled_nodes = {3, 4};
  s.workers = 1;
  const auto one = Engine(s).run();
  s.workers = 4;
  const auto four = Engine(s).run();
  EXPECT_EQ(metrics_csv(one.metrics), metrics_csv(four.metrics));
  EXPECT_EQ(attention_csv(one.attention), attention_csv(four.attention));
  EXPECT_EQ(residual_csv(one.residuals), residual_csv(four.residuals));
  EXPECT_EQ(dp_csv(one.dp), dp_csv(four.dp));
}

TEST(Engine, ZeroSigmaInfiniteBoundMatchesNonDp) {
  auto s = tiny_setup(fig2_tree(tiny_trainer(3)), 1, 1);
  const auto plain = Engine(s).run();
  s.dp.sigma = 0.0;
  s.dp.initial_bound = std::numeric_limits<double>::infinity();
  s.dp.enabled_nodes = {3, 4};
  const auto dp = Engine(s).run();
  EXPECT_EQ(metrics_csv(plain.metrics), metrics_csv(dp.metrics));
  EXPECT_EQ(dp.dp.size(), 2u);
}

TEST(Engine, DpLogFollowsMedianBound) {
  auto s = tiny_setup(fig2_tree(tiny_trainer(3)), 1, 3);
  s.dp.enabled_nodes = {3, 4};
  const auto r = Engine(s).run();
  ASSERT_EQ(r.dp.size(), 6u);
  EXPECT_DOUBLE_EQ(r.dp[0].bound, 1.0);
  EXPECT_DOUBLE_EQ(r.dp[0].noise_std, 0.5);
  for (int k = 1; k < 3; ++k) {
    const double expected = 0.5 * (r.dp[2 * (k - 1)].pre_clip_norm + r.dp[2 * (k - 1) + 1].pre_clip_norm);
    EXPECT_NEAR(r.dp[2 * k].bound, expected, 1e-12 * expected);
    EXPECT_NEAR(r.dp[2 * k].noise_std, 0.5 * expected, 1e-12 * expected);
  }
}

TEST(Engine, NuZeroEmitsNoResiduals) {
  auto s = tiny_setup(fig2_tree(tiny_trainer(2)), 1, 4);
  s.residual.threshold = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(Engine(s).run().residuals.empty());
  s.residual.nu = 0;
  EXPECT_TRUE(Engine(s).run().residuals.empty());
}

TEST(Engine, ResidualsNeverLandInOriginSubtree) {
  auto s = tiny_setup(fig2_tree(tiny_trainer(2)), 1, 6);
  s.residual.threshold = std::numeric_limits<double>::infinity();
  const auto r = Engine(s).run();
  for (const auto& row : r.residuals) {
    if (row.landed_at < 0) continue;
    EXPECT_NE(row.landed_at, row.origin);
    EXPECT_NE(*s.tree.node(row.landed_at).parent, *s.tree.node(row.origin).parent);
  }
}

TEST(Baselines, RoundsScaleWithStageCount) {
  const auto s = tiny_setup(fig2_tree(tiny_trainer(2)), 1, 2);
  for (const std::string method : {"flat_fl", "local", "centralized"}) {
    const auto r = run_method(s, method);
    const auto last = std::ranges::max(r.metrics, {}, &MetricRow::round).round;
    EXPECT_EQ(last, 2 * 3 - 1) << method;
    EXPECT_EQ(r.metrics.front().method, method);
  }
  EXPECT_THROW(run_method(s, "nope"), std::invalid_argument);
}

TEST(Baselines, LocalEvaluatesLeavesOnly) {
  const auto s = tiny_setup(fig2_tree(tiny_trainer(2)), 1, 1);
  const auto r = run_local(s, 1);
  for (const auto& m : r.metrics) EXPECT_TRUE(s.tree.is_leaf(m.node));
}

TEST(Baselines, LocalTrainingOnTinyShardOverfits) {
  // 80 training tokens and many passes: held-out perplexity eventually rises.
  auto s = tiny_setup(star_tree(1, tiny_trainer(40)), 1, 1, 80);
  const auto r = run_local(s, 30);
  const auto series = round_series(r.metrics, 1, "test");
  EXPECT_GT(series.back(), *std::ranges::min_element(series));
}

TEST(Baselines, CentralizedLearns) {
  const auto s = tiny_setup(star_tree(2, tiny_trainer(20)), 1, 1);
  const auto r = run_centralized(s, 4);
  const auto series = round_series(r.metrics, 1, "test");
  const auto init = evaluate(s.model, init_model(s.model, derive_seed(s.seed, Stream::init)), s.shards.at(1).test);
  EXPECT_LT(series.back(), init.perplexity);
}

TEST(Summaries, PopulationStd) {
  const auto s = summarize({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.std, std::sqrt(1.25));
  EXPECT_EQ(s.count, 4u);
}

TEST(Summaries, FinalRowsPickLastStage) {
  std::vector<MetricRow> rows{{"e", "m", 1, 0, 0, "test", 0, 10},
                              {"e", "m", 1, 1, 0, "test", 0, 8},
                              {"e", "m", 1, 1, 2, "test", 0, 6},
                              {"e", "m", 2, 1, 2, "test", 0, 4},
                              {"e", "m", 2, 1, 2, "val", 0, 99}};
  const auto s = final_summary(rows, "test", {1, 2});
  EXPECT_DOUBLE_EQ(s.mean, 5.0);
  EXPECT_EQ(round_series(rows, 1, "test"), (std::vector<double>{10, 6}));
}

TEST(ParallelFor, RethrowsAndCoversAllIndices) {
  std::vector<int> hit(100, 0);
  parallel_for(100, 8, [&](std::size_t i) { hit[i]++; });
  EXPECT_EQ(std::ranges::count(hit, 1), 100);
  EXPECT_THROW(parallel_for(10, 4, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("x");
               }),
               std::runtime_error);
}

}  // namespace
}  // namespace worldlm
