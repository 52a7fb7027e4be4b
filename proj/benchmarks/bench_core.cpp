#include <benchmark/benchmark.h>

#include <random>

#include "worldlm/aggregation.hpp"
#include "worldlm/datagen.hpp"
#include "worldlm/model.hpp"

namespace worldlm {
namespace {

ModelConfig fig2_model() {
  ModelConfig m;
  m.vocab_size = 32;
  m.embed_dim = 16;
  m.num_blocks = 3;
  m.context_len = 4;
  return m;
}

TokenBatch random_batch(const ModelConfig& cfg, std::size_t rows) {
  Rng rng(5);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
  TokenBatch b{rows, cfg.context_len + 1, {}};
  for (std::size_t i = 0; i < rows * b.width; ++i) b.tokens.push_back(static_cast<Token>(tok(rng)));
  return b;
}

void BM_Forward(benchmark::State& state) {
  const auto cfg = fig2_model();
  const auto params = init_model(cfg, 1);
  const auto batch = random_batch(cfg, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(forward_loss(cfg, params, batch).loss);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(256);

void BM_ForwardBackward(benchmark::State& state) {
  const auto cfg = fig2_model();
  const auto params = init_model(cfg, 1);
  const auto batch = random_batch(cfg, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    const auto fw = forward_loss(cfg, params, batch);
    benchmark::DoNotOptimize(backward(cfg, params, fw.cache));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(32)->Arg(256);

void BM_LocalTrain(benchmark::State& state) {
  const auto cfg = fig2_model();
  const auto src = make_clustered_sources(1, 1, 0.5, cfg.vocab_size, 3).front();
  Rng rng(4);
  const TokenSplit shard{{sample_tokens(src, 8000, rng)}};
  TrainerConfig trainer;
  trainer.local_steps = static_cast<int>(state.range(0));
  const auto init = init_model(cfg, 1);
  for (auto _ : state) benchmark::DoNotOptimize(local_train(cfg, init, shard, trainer, 9, 0).mean_loss);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_LocalTrain)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_AttendLayer(benchmark::State& state) {
  Rng rng(6);
  std::normal_distribution<double> n;
  auto tensor = [&] {
    Tensor t("block2.fc1.weight", {64, 16});
    for (auto& v : t.data) v = static_cast<float>(n(rng));
    return t;
  };
  const Tensor query = tensor();
  std::vector<Tensor> keys;
  for (int i = 0; i < state.range(0); ++i) keys.push_back(tensor());
  std::vector<AttentionCandidate> cands;
  for (int i = 0; i < state.range(0); ++i) cands.push_back({&keys[i], &keys[i], i, 0});
  for (auto _ : state) benchmark::DoNotOptimize(attend_layer(query, cands, {}).output);
}
BENCHMARK(BM_AttendLayer)->Arg(3)->Arg(16);

void BM_ServerOpt(benchmark::State& state) {
  const auto cfg = fig2_model();
  const auto backbone = init_model(cfg, 1);
  std::vector<ParamSet> deltas(4, init_model(cfg, 2));
  auto server = make_server_state(backbone, 0.2, 0.9);
  for (auto _ : state) benchmark::DoNotOptimize(server_opt(backbone, average_pseudograds(deltas), server));
}
BENCHMARK(BM_ServerOpt);

}  // namespace
}  // namespace worldlm

BENCHMARK_MAIN();
