#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "test_util.hpp"
#include "worldlm/model.hpp"

namespace worldlm {
namespace {

using testing::test_rng;

ModelConfig small_cfg(std::size_t V = 16, std::size_t d = 8, std::size_t H = 2, std::size_t exp = 4,
                      std::size_t n = 4, std::size_t keys = 1) {
  ModelConfig c;
  c.vocab_size = V;
  c.embed_dim = d;
  c.num_blocks = H;
  c.expansion_ratio = exp;
  c.context_len = n;
  c.key_block_count = keys;
  return c;
}

TokenBatch random_batch(const ModelConfig& cfg, std::size_t rows, Rng& rng) {
  std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
  TokenBatch b{rows, cfg.context_len + 1, {}};
  for (std::size_t i = 0; i < rows * b.width; ++i) b.tokens.push_back(static_cast<Token>(tok(rng)));
  return b;
}

// Straightforward re-implementation of the forward pass, by parameter name.
double oracle_loss(const ModelConfig& cfg, const ParamSet& p, const TokenBatch& batch) {
  const std::size_t d = cfg.embed_dim, n = cfg.context_len, V = cfg.vocab_size, e = cfg.hidden_dim();
  auto W = [&](const std::string& name) { return p.at(name).data; };
  const auto embed = W("embed");
  double total = 0.0;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const Token* row = batch.row(r);
    std::vector<double> x;
    for (std::size_t pos = 0; pos < n; ++pos) {
      for (std::size_t k = 0; k < d; ++k) x.push_back(embed[row[pos] * d + k]);
    }
    auto affine = [](const std::vector<float>& w, const std::vector<float>& b, const std::vector<double>& in,
                     std::size_t out_dim) {
      std::vector<double> out(out_dim);
      for (std::size_t o = 0; o < out_dim; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < in.size(); ++i) s += static_cast<double>(w[o * in.size() + i]) * in[i];
        out[o] = s;
      }
      return out;
    };
    std::vector<double> h = affine(W("proj.weight"), W("proj.bias"), x, d);
    for (std::size_t blk = 0; blk < cfg.num_blocks; ++blk) {
      const std::string pre = "block" + std::to_string(blk) + ".";
      auto a = affine(W(pre + "fc1.weight"), W(pre + "fc1.bias"), h, e);
      for (auto& v : a) v = std::tanh(v);
      const auto f = affine(W(pre + "fc2.weight"), W(pre + "fc2.bias"), a, d);
      for (std::size_t k = 0; k < d; ++k) h[k] += f[k];
    }
    const auto logits = affine(W("head.weight"), W("head.bias"), h, V);
    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    total += -(logits[row[n]] - mx - std::log(z));
  }
  return total / static_cast<double>(batch.rows);
}

TEST(ModelConfig, ParameterCountMatchesLayerEnumeration) {
  const auto cfg = small_cfg();  // V=16, d=8, H=2, exp=4, n=4
  // embed 16*8, proj 32*8+8, per block (32*8+32)+(8*32+8), head 8*16+16
  const std::size_t expected = 128 + 264 + 2 * (288 + 264) + 144;
  EXPECT_EQ(cfg.parameter_count(), expected);
  EXPECT_EQ(init_model(cfg, 1).numel(), expected);
}

TEST(ModelConfig, ValidateRejectsTooManyKeys) {
  auto cfg = small_cfg();
  cfg.key_block_count = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Partition, KeysAreFinalBlocks) {
  auto cfg = small_cfg(16, 8, 3, 4, 4, 2);
  const auto part = make_partition(cfg);
  EXPECT_EQ(part.key_names, (std::vector<std::string>{"block1.fc1.weight", "block1.fc1.bias", "block1.fc2.weight",
                                                       "block1.fc2.bias", "block2.fc1.weight", "block2.fc1.bias",
                                                       "block2.fc2.weight", "block2.fc2.bias"}));
  EXPECT_NO_THROW(check_partition(cfg, part));
  cfg.include_head_in_keys = true;
  const auto with_head = make_partition(cfg);
  EXPECT_EQ(with_head.key_names.back(), "head.bias");
  EXPECT_EQ(std::ranges::count(with_head.backbone_names, std::string("embed")), 1);
}

TEST(Partition, CompletenessAcrossConfigs) {
  for (std::size_t H = 1; H <= 4; ++H) {
    for (std::size_t k = 0; k <= H; ++k) {
      const auto cfg = small_cfg(8, 4, H, 2, 2, k);
      const auto part = make_partition(cfg);
      check_partition(cfg, part);
      const auto model = init_model(cfg, 3);
      EXPECT_EQ(join_model(cfg, backbone_of(model, part), keys_of(model, part)), model);
    }
  }
  auto cfg = small_cfg();
  auto part = make_partition(cfg);
  part.key_names.push_back(part.backbone_names.front());
  EXPECT_ANY_THROW(check_partition(cfg, part));
}

TEST(InitModel, DeterministicAndSeedSensitive) {
  const auto cfg = small_cfg();
  EXPECT_EQ(encode_payload(init_model(cfg, 11)), encode_payload(init_model(cfg, 11)));
  EXPECT_NE(encode_payload(init_model(cfg, 11)), encode_payload(init_model(cfg, 12)));
}

TEST(ForwardLoss, ZeroHeadGivesLogV) {
  const auto cfg = small_cfg();
  auto p = init_model(cfg, 5);
  for (auto& t : p) {
    if (t.name.starts_with("head")) std::ranges::fill(t.data, 0.0f);
  }
  auto rng = test_rng(10);
  EXPECT_NEAR(forward_loss(cfg, p, random_batch(cfg, 9, rng)).loss, std::log(16.0), 1e-6);
}

TEST(ForwardLoss, TwoTokenUniformLogitsGiveLn2) {
  const auto cfg = small_cfg(2, 4, 1, 2, 2);
  auto p = init_model(cfg, 5);
  for (auto& t : p) {
    if (t.name.starts_with("head")) std::ranges::fill(t.data, 0.0f);
  }
  auto rng = test_rng(11);
  EXPECT_NEAR(forward_loss(cfg, p, random_batch(cfg, 4, rng)).loss, 0.693147, 1e-5);
}

TEST(ForwardLoss, MatchesOracleRecomputation) {
  auto rng = test_rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto cfg = small_cfg(12, 6, 2, 3, 3);
    auto p = init_model(cfg, 100 + trial);
    for (auto& t : p) {
      for (auto& v : t.data) v += static_cast<float>(std::normal_distribution<double>(0.0, 0.1)(rng));
    }
    const auto batch = random_batch(cfg, 7, rng);
    EXPECT_LT(testing::rel_err(forward_loss(cfg, p, batch).loss, oracle_loss(cfg, p, batch)), 1e-6);
  }
}

TEST(ForwardLoss, OutOfRangeTokenRejected) {
  const auto cfg = small_cfg();
  const auto p = init_model(cfg, 1);
  TokenBatch b{1, 5, {1, 2, 3, 4, 16}};
  EXPECT_THROW(forward_loss(cfg, p, b), InputError);
}

TEST(Backward, StaleCacheDetected) {
  const auto cfg = small_cfg();
  auto p = init_model(cfg, 1);
  auto rng = test_rng(13);
  const auto fwd = forward_loss(cfg, p, random_batch(cfg, 3, rng));
  p[0].data[0] += 0.5f;
  EXPECT_THROW(backward(cfg, p, fwd.cache), StaleCacheError);
}

TEST(Backward, ZeroHeadGivesZeroEmbeddingGradient) {
  const auto cfg = small_cfg();
  auto p = init_model(cfg, 2);
  for (auto& t : p) {
    if (t.name == "head.weight") std::ranges::fill(t.data, 0.0f);
  }
  auto rng = test_rng(14);
  const auto fwd = forward_loss(cfg, p, random_batch(cfg, 5, rng));
  const auto g = backward(cfg, p, fwd.cache);
  for (float v : g.at("embed").data) EXPECT_EQ(v, 0.0f);
}

TEST(Backward, DuplicatedBatchLeavesMeanGradientUnchanged) {
  const auto cfg = small_cfg();
  const auto p = init_model(cfg, 3);
  auto rng = test_rng(15);
  const auto b = random_batch(cfg, 4, rng);
  TokenBatch doubled = b;
  doubled.rows *= 2;
  doubled.tokens.insert(doubled.tokens.end(), b.tokens.begin(), b.tokens.end());
  const auto g1 = backward(cfg, p, forward_loss(cfg, p, b).cache);
  const auto g2 = backward(cfg, p, forward_loss(cfg, p, doubled).cache);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    for (std::size_t j = 0; j < g1[i].numel(); ++j) {
      EXPECT_NEAR(g1[i].data[j], g2[i].data[j], 1e-6 + 1e-5 * std::abs(g1[i].data[j]));
    }
  }
}

TEST(Backward, FloatGradientTracksWideGradient) {
  const auto cfg = small_cfg();
  const auto p = init_model(cfg, 4);
  auto rng = test_rng(16);
  const auto b = random_batch(cfg, 6, rng);
  const auto g = backward(cfg, p, forward_loss(cfg, p, b).cache);
  const auto wide = gradient_wide(cfg, WideParams::from(p), b);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g[i].numel(); ++j) EXPECT_NEAR(g[i].data[j], wide.data[i][j], 1e-5);
  }
}

TEST(Backward, WideGradientMatchesFiniteDifferences) {
  auto rng = test_rng(25);
  for (const auto& cfg : {small_cfg(5, 3, 1, 2, 2, 0), small_cfg(7, 4, 2, 1, 3, 1), small_cfg(4, 2, 3, 3, 1, 3)}) {
    auto p = init_model(cfg, 9);
    // Non-zero biases so every parameter receives a generic gradient.
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto& t : p) {
      for (auto& v : t.data) v += static_cast<float>(jitter(rng));
    }
    EXPECT_LT(oracle::gradient_check(cfg, WideParams::from(p), random_batch(cfg, 6, rng)), 1e-4);
  }
}

TEST(Adam, MatchesHandSteppedRecurrence) {
  ParamSet p(ParamRole::model);
  p.add(Tensor("w", {2}, {0.5f, -0.25f}));
  Adam opt(0.9, 0.95, 1e-8);
  const std::vector<std::vector<float>> grads{{0.1f, -0.2f}, {0.3f, 0.05f}, {-0.4f, 0.1f}};
  double w[2] = {0.5, -0.25}, m[2] = {0, 0}, v[2] = {0, 0};
  const double lr = 0.01;
  for (int t = 1; t <= 3; ++t) {
    ParamSet g(ParamRole::pseudo_gradient);
    g.add(Tensor("w", {2}, grads[t - 1]));
    opt.step(p, g, lr);
    for (int j = 0; j < 2; ++j) {
      const double gj = grads[t - 1][j];
      m[j] = 0.9 * m[j] + 0.1 * gj;
      v[j] = 0.95 * v[j] + 0.05 * gj * gj;
      const double mhat = m[j] / (1 - std::pow(0.9, t));
      const double vhat = v[j] / (1 - std::pow(0.95, t));
      w[j] -= lr * mhat / (std::sqrt(vhat) + 1e-8);
      EXPECT_NEAR(p[0].data[j], w[j], 1e-6);
    }
  }
}

TEST(LocalTrain, ZeroStepsReturnsInput) {
  const auto cfg = small_cfg();
  const auto p = init_model(cfg, 5);
  TrainerConfig tc;
  tc.local_steps = 0;
  auto rng = test_rng(17);
  const auto r = local_train(cfg, p, testing::random_split(16, 100, rng), tc, 1, 0);
  EXPECT_EQ(r.params, p);
  EXPECT_EQ(r.steps_taken, 0);
}

TEST(LocalTrain, EmptyShardRejected) {
  const auto cfg = small_cfg();
  EXPECT_THROW(local_train(cfg, init_model(cfg, 5), TokenSplit{}, TrainerConfig{}, 1, 0), InputError);
}

TEST(LocalTrain, LearnsAlternatingCorpus) {
  const auto cfg = small_cfg();
  std::vector<Token> seq(400);
  for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = static_cast<Token>(i % 2);
  const TokenSplit split{{seq}};
  TrainerConfig tc;
  tc.local_steps = 200;
  tc.schedule = {0.05, 1e-2, 200};
  const auto r = local_train(cfg, init_model(cfg, 6), split, tc, 7, 0);
  EXPECT_EQ(r.steps_taken, 200);
  const auto eval = evaluate(cfg, r.params, split);
  EXPECT_LT(eval.loss, 0.05);
}

TEST(LocalTrain, DeterministicGivenSeed) {
  const auto cfg = small_cfg();
  auto rng = test_rng(18);
  const auto split = testing::random_split(16, 500, rng);
  TrainerConfig tc;
  tc.local_steps = 20;
  const auto a = local_train(cfg, init_model(cfg, 1), split, tc, 99, 10);
  const auto b = local_train(cfg, init_model(cfg, 1), split, tc, 99, 10);
  EXPECT_EQ(encode_payload(a.params), encode_payload(b.params));
}

TEST(Evaluate, UniformPredictorPerplexityIsV) {
  const auto cfg = small_cfg(50, 4, 1, 2, 2);
  auto p = init_model(cfg, 1);
  for (auto& t : p) {
    if (t.name.starts_with("head")) std::ranges::fill(t.data, 0.0f);
  }
  auto rng = test_rng(19);
  EXPECT_NEAR(evaluate_perplexity(cfg, p, testing::random_split(50, 300, rng)), 50.0, 1e-4);
  EXPECT_THROW(evaluate_perplexity(cfg, p, TokenSplit{}), InputError);
}

TEST(Checkpoint, RoundTripWithConfigEcho) {
  const auto cfg = small_cfg(16, 8, 2, 4, 4, 1);
  const auto p = init_model(cfg, 8);
  const auto stem = std::filesystem::temp_directory_path() / "worldlm_ckpt";
  save_checkpoint(cfg, p, stem);
  ModelConfig back_cfg;
  const auto back = load_checkpoint(stem, &back_cfg);
  EXPECT_EQ(back_cfg, cfg);
  EXPECT_EQ(encode_payload(back), encode_payload(p));
}

}  // namespace
}  // namespace worldlm
