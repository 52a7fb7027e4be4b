#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "test_util.hpp"
#include "worldlm/datagen.hpp"

namespace worldlm {
namespace {

MarkovSource make_source(std::size_t V, std::vector<double> transition) {
  MarkovSource s;
  s.vocab = V;
  s.transition = std::move(transition);
  s.initial.assign(V, 1.0 / static_cast<double>(V));
  return s;
}

MarkovSource random_source(std::size_t V, Rng& rng) {
  std::gamma_distribution<double> g(0.5, 1.0);
  std::vector<double> t(V * V);
  for (std::size_t i = 0; i < V; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < V; ++j) z += t[i * V + j] = g(rng) + 1e-3;
    for (std::size_t j = 0; j < V; ++j) t[i * V + j] /= z;
  }
  return make_source(V, t);
}

double mean_row_tv(const MarkovSource& a, const MarkovSource& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.vocab; ++i) s += total_variation(a.row(i), b.row(i));
  return s / static_cast<double>(a.vocab);
}

TEST(ClusteredSources, ZeroDivergenceGivesIdenticalSources) {
  const auto src = make_clustered_sources(2, 2, 0.0, 16, 7);
  ASSERT_EQ(src.size(), 4u);
  for (const auto& s : src) EXPECT_EQ(s.transition, src[0].transition);
}

TEST(ClusteredSources, FullDivergenceSeparatesClusters) {
  const auto src = make_clustered_sources(2, 2, 1.0, 16, 8);
  const double intra = (mean_row_tv(src[0], src[1]) + mean_row_tv(src[2], src[3])) / 2;
  const double inter =
      (mean_row_tv(src[0], src[2]) + mean_row_tv(src[0], src[3]) + mean_row_tv(src[1], src[2]) +
       mean_row_tv(src[1], src[3])) / 4;
  EXPECT_GT(inter, intra);
}

TEST(ClusteredSources, RowsAreStochastic) {
  for (double div : {0.0, 0.3, 0.8, 1.0}) {
    for (const auto& s : make_clustered_sources(3, 2, div, 12, 9)) {
      for (std::size_t i = 0; i < s.vocab; ++i) {
        const auto row = s.row(i);
        EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
        for (double p : row) EXPECT_GE(p, 0.0);
      }
    }
  }
}

TEST(ClusteredSources, CrossClusterGapGrowsWithDivergence) {
  // Average (cross-entropy under the other cluster's source) - (own entropy).
  auto gap = [](double div) {
    const auto src = make_clustered_sources(2, 1, div, 16, 10);
    return 0.5 * (cross_entropy_rate(src[0], src[1]) - entropy_rate(src[0]) + cross_entropy_rate(src[1], src[0]) -
                  entropy_rate(src[1]));
  };
  double prev = gap(0.0);
  EXPECT_NEAR(prev, 0.0, 1e-12);
  for (double div : {0.2, 0.4, 0.6, 0.8, 1.0}) {
    const double g = gap(div);
    EXPECT_GE(g, prev - 1e-12) << "divergence " << div;
    prev = g;
  }
}

TEST(EntropyRate, UniformIsLogV) {
  EXPECT_NEAR(entropy_rate(make_source(5, std::vector<double>(25, 0.2))), std::log(5.0), 1e-12);
}

TEST(EntropyRate, DeterministicCycleIsZero) {
  std::vector<double> t(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) t[i * 4 + (i + 1) % 4] = 1.0;
  EXPECT_NEAR(entropy_rate(make_source(4, t)), 0.0, 1e-12);
}

TEST(EntropyRate, MatchesMonteCarloEstimate) {
  auto rng = testing::test_rng(30);
  const auto src = random_source(8, rng);
  const auto tokens = sample_tokens(src, 1'000'000, rng);
  double nll = 0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) nll -= std::log(src.prob(tokens[i], tokens[i + 1]));
  nll /= static_cast<double>(tokens.size() - 1);
  EXPECT_LT(testing::rel_err(nll, entropy_rate(src)), 0.005);
}

TEST(EntropyRate, PeriodicChainFailsToConverge) {
  // Bipartite: 0 -> {1, 2}, {1, 2} -> 0. From uniform the power iteration oscillates.
  const std::vector<double> t{0, 0.5, 0.5, 1, 0, 0, 1, 0, 0};
  EXPECT_THROW(entropy_rate(make_source(3, t)), ConvergenceError);
}

TEST(MarkovPerplexity, TrueModelMatchesEntropyRate) {
  auto rng = testing::test_rng(31);
  const auto src = make_clustered_sources(1, 1, 0.5, 32, 5).front();
  const TokenSplit split{{sample_tokens(src, 100'000, rng)}};
  EXPECT_LT(testing::rel_err(markov_perplexity(src, split), std::exp(entropy_rate(src))), 0.01);
}

struct Fig2Data {
  FederationTree tree = fig2_tree();
  std::vector<MarkovSource> sources = make_clustered_sources(2, 2, 0.8, 16, 3);
  std::map<NodeId, MixtureSpec> assignment{{3, {{{0, 1.0, 8000}}}},
                                           {4, {{{1, 1.0, 2000}}}},
                                           {5, {{{2, 1.0, 8000}}}},
                                           {6, {{{3, 1.0, 2000}}}}};
};

TEST(HierarchyDataset, ParentWeightsProportionalToBudgets) {
  Fig2Data f;
  const auto shards = build_hierarchy_dataset(f.tree, f.sources, f.assignment, 1);
  const auto& internet = shards.at(1).provenance.components;
  ASSERT_EQ(internet.size(), 2u);
  EXPECT_NEAR(internet[0].weight, 0.8, 1e-12);
  EXPECT_NEAR(internet[1].weight, 0.2, 1e-12);
  EXPECT_EQ(internet[0].token_budget, 8000u);
  const auto& root = shards.at(0).provenance.components;
  ASSERT_EQ(root.size(), 4u);
  EXPECT_NEAR(root[0].weight, 0.4, 1e-12);
  EXPECT_NEAR(root[3].weight, 0.1, 1e-12);
  EXPECT_EQ(shards.at(4).train.total_tokens(), 2000u);
  EXPECT_EQ(shards.at(0).train.total_tokens(), 20000u);
}

TEST(HierarchyDataset, SingleLeafParentUsesLeafSpec) {
  FederationTree tree = star_tree(1);
  const auto sources = make_clustered_sources(1, 2, 0.5, 8, 4);
  const std::map<NodeId, MixtureSpec> assignment{{1, {{{1, 1.0, 500}}}}};
  const auto shards = build_hierarchy_dataset(tree, sources, assignment, 2);
  EXPECT_EQ(shards.at(0).provenance, shards.at(1).provenance);
}

TEST(HierarchyDataset, SwapExchangesSmallLeavesAcrossFederations) {
  Fig2Data f;
  const auto swapped = swap_smallest_leaves(f.tree, f.assignment);
  EXPECT_EQ(swapped.at(4).components[0].source_id, 3);
  EXPECT_EQ(swapped.at(6).components[0].source_id, 1);
  EXPECT_EQ(swapped.at(3), f.assignment.at(3));
  const auto shards = build_hierarchy_dataset(f.tree, f.sources, swapped, 1);
  // "internet" now mixes CC with the medical-cluster small source.
  EXPECT_EQ(shards.at(1).provenance.components[1].source_id, 3);
}

TEST(HierarchyDataset, UnassignedLeafIsAnError) {
  Fig2Data f;
  f.assignment.erase(5);
  EXPECT_THROW(build_hierarchy_dataset(f.tree, f.sources, f.assignment, 1), std::invalid_argument);
}

TEST(HierarchyDataset, DeterministicAndSplitsIndependent) {
  Fig2Data f;
  const auto a = build_hierarchy_dataset(f.tree, f.sources, f.assignment, 5);
  const auto b = build_hierarchy_dataset(f.tree, f.sources, f.assignment, 5);
  for (const auto& [id, shard] : a) {
    EXPECT_EQ(shard.train, b.at(id).train);
    EXPECT_EQ(shard.test, b.at(id).test);
    // Separate RNG streams: the leading 64-grams of train/val/test differ.
    const auto& tr = shard.train.segments[0];
    const auto& va = shard.val.segments[0];
    const auto& te = shard.test.segments[0];
    EXPECT_FALSE(std::equal(te.begin(), te.begin() + 64, tr.begin()));
    EXPECT_FALSE(std::equal(te.begin(), te.begin() + 64, va.begin()));
    EXPECT_FALSE(shard.val.empty());
  }
}

std::filesystem::path write_file(const std::string& name, const std::string& bytes) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path, std::ios::binary) << bytes;
  return path;
}

TEST(TextShard, EmptyFileRejected) {
  VocabMap vocab(64);
  EXPECT_THROW(load_text_shard(write_file("worldlm_empty.txt", ""), vocab), InputError);
  EXPECT_THROW(load_text_shard("/nonexistent/worldlm.txt", vocab), InputError);
}

TEST(TextShard, HundredBytesSplitNinetyFiveFive) {
  std::string text;
  for (int i = 0; i < 100; ++i) text.push_back(static_cast<char>('a' + i % 7));
  VocabMap vocab(64);
  const auto shard = load_text_shard(write_file("worldlm_100.txt", text), vocab);
  EXPECT_EQ(shard.train.total_tokens(), 90u);
  EXPECT_EQ(shard.val.total_tokens(), 5u);
  EXPECT_EQ(shard.test.total_tokens(), 5u);
}

TEST(TextShard, DetokenizeRoundTrip) {
  const std::string text = "the quick brown fox jumps over the lazy dog, again and again.\n";
  std::string all;
  for (int i = 0; i < 5; ++i) all += text;
  VocabMap vocab(64);
  const auto shard = load_text_shard(write_file("worldlm_rt.txt", all), vocab);
  std::vector<std::uint8_t> bytes;
  for (const TokenSplit* s : {&shard.train, &shard.val, &shard.test}) {
    const auto part = detokenize(*s, vocab);
    bytes.insert(bytes.end(), part.begin(), part.end());
  }
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), all);
}

TEST(TextShard, VocabOverflowRejected) {
  std::string text;
  for (int i = 0; i < 200; ++i) text.push_back(static_cast<char>(i));
  VocabMap vocab(16);
  EXPECT_THROW(load_text_shard(write_file("worldlm_overflow.txt", text), vocab), InputError);
}

TEST(ShardFiles, RoundTrip) {
  Fig2Data f;
  const auto shards = build_hierarchy_dataset(f.tree, f.sources, f.assignment, 9);
  const auto dir = std::filesystem::temp_directory_path() / "worldlm_shards";
  save_shard(shards.at(1), dir, "internet");
  const auto back = load_shard(dir, "internet");
  EXPECT_EQ(back.train, shards.at(1).train);
  EXPECT_EQ(back.val, shards.at(1).val);
  EXPECT_EQ(back.test, shards.at(1).test);
  EXPECT_EQ(back.provenance, shards.at(1).provenance);
}

}  // namespace
}  // namespace worldlm
