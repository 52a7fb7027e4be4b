#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "worldlm/aggregation.hpp"
#include "worldlm/datagen.hpp"
#include "worldlm/model.hpp"
#include "worldlm/privacy.hpp"
#include "worldlm/residual.hpp"
#include "worldlm/topology.hpp"

namespace worldlm {

struct ServerConfig {
  double lr = 0.2;        // eta_s
  double momentum = 0.9;  // mu_s
  friend bool operator==(const ServerConfig&, const ServerConfig&) = default;
};

/// Fully resolved inputs of one run. Nodes without a shard neither train
/// nor appear in metrics.
struct ExperimentSetup {
  std::string experiment_id = "experiment";
  std::uint64_t seed = 1;
  int rounds = 12;
  ModelConfig model;
  FederationTree tree;
  AttentionConfig attention;
  ResidualConfig residual;
  ServerConfig server;
  DpConfig dp;
  std::map<NodeId, Shard> shards;
  std::size_t workers = 1;
};

struct MetricRow {
  std::string experiment;
  std::string method;
  NodeId node = 0;
  int round = 0;
  int stage = 0;
  std::string split;
  double loss = 0.0;
  double perplexity = 0.0;
};

struct ResidualLogRow {
  int round = 0;
  NodeId origin = 0;
  std::string layer;
  int created_round = 0;
  std::vector<HopRecord> path;
  NodeId landed_at = -1;  // -1 when dropped
  std::string outcome;    // "aggregated" or the drop reason
};

struct DpLogRow {
  int round = 0;
  NodeId node = 0;
  double pre_clip_norm = 0.0;
  double bound = 0.0;
  double noise_std = 0.0;
};

struct StageTiming {
  int round = 0;
  int stage = 0;
  double seconds = 0.0;
};

struct RunResult {
  std::vector<MetricRow> metrics;
  std::vector<AttentionLogRow> attention;
  std::vector<ResidualLogRow> residuals;
  std::vector<DpLogRow> dp;
  std::vector<StageTiming> timing;
  /// Final per-node models (full parameter sets). Baselines store their
  /// global model under the root id.
  std::map<NodeId, ParamSet> final_models;
};

/// Per-node state that persists across rounds.
struct NodeState {
  ParamSet backbone;
  ParamSet keys;
  std::optional<ServerOptState> server;
  KeyCache cache;
  ClipState clip;
  std::vector<ResidualPacket> routing;   // D_r: to be routed by this node
  std::vector<ResidualPacket> inbox;     // D_a: to be merged into this node's keys
  std::vector<ResidualPacket> upstream;  // U: produced for the parent this round
  ParamSet round_backbone;               // B^k after this round's local training
  ParamSet round_keys;                   // K^k after this round's local training
};

struct EngineEvent {
  enum class Kind { entered, trained, aggregated };
  Kind kind;
  NodeId node;
  int round;
  const ParamSet& backbone;
  const ParamSet& keys;
};

/// Hierarchical training. One call of run_round(k) is one execution of Fit
/// at the root: levels run top-down (parent merge, residual routing, local
/// training), then internal nodes aggregate bottom-up (pseudo-gradient
/// averaging, server optimizer, key attention, residual selection). Nodes
/// of one level run concurrently on up to `workers` threads; results do not
/// depend on the worker count.
class Engine {
 public:
  explicit Engine(ExperimentSetup setup);

  RunResult run();
  void run_round(int round, RunResult& out);

  /// Number of sequential stages per round (levels holding a training node).
  int stage_count() const { return stage_count_; }
  const NodeState& state(NodeId id) const { return states_.at(id); }
  const ExperimentSetup& setup() const { return setup_; }
  const Partition& partition() const { return partition_; }

  /// Called from worker threads; use workers = 1 when the observer is not
  /// thread-safe.
  void set_observer(std::function<void(const EngineEvent&)> fn) { observer_ = std::move(fn); }

 private:
  void enter_node(NodeId id, int round, int stage, RunResult& log);
  void aggregate_node(NodeId id, int round, RunResult& log);
  void evaluate_all(int round, int stage, RunResult& out);
  bool trains(NodeId id) const;
  void notify(EngineEvent::Kind kind, NodeId id, int round);

  ExperimentSetup setup_;
  Partition partition_;
  std::vector<std::vector<NodeId>> levels_;
  std::vector<int> stage_of_level_;
  int stage_count_ = 1;
  std::map<NodeId, NodeState> states_;
  std::function<void(const EngineEvent&)> observer_;
};

/// Sequential-stage count of the setup's tree.
int stage_count(const ExperimentSetup& setup);

/// Standard FL with server momentum over the leaves: full-model averaging,
/// no keys, no residuals. Each round is one sequential stage; the global
/// model is evaluated on every node that holds data.
RunResult run_flat_fl(const ExperimentSetup& setup, int rounds);
/// Independent per-leaf training in chunks of local_steps.
RunResult run_local(const ExperimentSetup& setup, int rounds);
/// One model trained on the union of every node's training split.
RunResult run_centralized(const ExperimentSetup& setup, int rounds);

/// "worldlm", "flat_fl", "local" or "centralized". Baselines get
/// rounds * stage_count(setup) rounds so every method uses the same number
/// of sequential steps.
RunResult run_method(const ExperimentSetup& setup, std::string_view method);
std::vector<std::string> method_names();

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t count = 0;
};

Summary summarize(const std::vector<double>& values);

/// Rows of the last (round, stage) present for `split`, restricted to `nodes`
/// when non-empty.
std::vector<MetricRow> final_rows(const std::vector<MetricRow>& rows, const std::string& split,
                                  const std::vector<NodeId>& nodes = {});
/// Perplexity mean and std across `nodes` at the final (round, stage).
Summary final_summary(const std::vector<MetricRow>& rows, const std::string& split,
                      const std::vector<NodeId>& nodes);
/// Per-round perplexity of one node at the last stage of each round.
std::vector<double> round_series(const std::vector<MetricRow>& rows, NodeId node, const std::string& split);

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads; rethrows the
/// first exception.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace worldlm
