#pragma once

#include <span>
#include <string>
#include <vector>

#include "worldlm/tensor.hpp"
#include "worldlm/topology.hpp"

namespace worldlm {

enum class Similarity { cosine, dot };

struct AttentionConfig {
  Similarity similarity = Similarity::cosine;
  double temperature = 1.0;
  bool include_self = true;
  /// When false every candidate gets weight 1/m (plain averaging).
  bool enabled = true;

  void validate() const;
  friend bool operator==(const AttentionConfig&, const AttentionConfig&) = default;
};

double similarity(std::span<const float> a, std::span<const float> b, Similarity kind);

struct HopRecord {
  NodeId node = 0;
  double similarity = 0.0;
};

/// One key-layer tensor travelling between sub-federations.
struct ResidualPacket {
  NodeId origin = 0;
  std::string layer;
  Tensor tensor;
  int created_round = 0;
  NodeId ceiling = kRootId;
  std::vector<HopRecord> path;  // nodes that held or routed the packet
};

struct AttentionCandidate {
  const Tensor* key = nullptr;
  const Tensor* value = nullptr;
  NodeId origin = 0;
  int round = 0;
};

struct AttentionResult {
  Tensor output;
  std::vector<double> weights;  // aligned with the caller's candidate order
};

/// softmax(sim(query, key_j) / temperature) weighted sum of values.
/// Candidates are reduced in (origin, round) order so the result does not
/// depend on the order they are passed in.
AttentionResult attend_layer(const Tensor& query, std::span<const AttentionCandidate> candidates,
                             const AttentionConfig& cfg);

struct AttentionLogRow {
  NodeId node = 0;
  int round = 0;
  std::string site;  // "parent_merge" or "child_aggregation"
  std::string layer;
  NodeId origin = 0;
  double weight = 0.0;
};

struct KeyAggregation {
  ParamSet keys;
  std::vector<AttentionLogRow> log;
};

struct NodeKeys {
  NodeId id = 0;
  ParamSet keys;
};

/// Per key layer: query = own layer, candidates = own layer (if
/// include_self) followed by the children's layers in id order.
KeyAggregation aggregate_child_keys(NodeId self, const ParamSet& own_keys, std::span<const NodeKeys> children,
                                    const AttentionConfig& cfg, int round = 0);

/// Per key layer: query = own layer, candidates = own, parent, then every
/// packet addressed to that layer (by origin id).
KeyAggregation merge_with_parent(NodeId self, const ParamSet& own_keys, NodeId parent,
                                 const ParamSet& parent_keys, std::span<const ResidualPacket> packets,
                                 const AttentionConfig& cfg, int round = 0);

/// Unweighted mean, accumulated in double in the given order.
ParamSet average_pseudograds(std::span<const ParamSet> deltas);

struct ServerOptState {
  ParamSet momentum;
  double lr = 0.2;
  double momentum_coeff = 0.9;
};

ServerOptState make_server_state(const ParamSet& backbone, double lr, double momentum_coeff);

/// m <- mu*m + delta; backbone <- backbone + lr*m. With mu=0, lr=1 this is FedAvg.
ParamSet server_opt(const ParamSet& backbone, const ParamSet& delta_mean, ServerOptState& state);

}  // namespace worldlm
