#pragma once

#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "worldlm/aggregation.hpp"
#include "worldlm/topology.hpp"

namespace worldlm {

struct ResidualConfig {
  int nu = 1;                 // max child layers selected per key layer
  double threshold = 0.999;   // emit only when similarity < threshold; +inf emits unconditionally
  Similarity similarity = Similarity::cosine;
  int ttl_depth_factor = 2;   // packets older than factor * tree depth rounds are dropped

  void validate() const;
  friend bool operator==(const ResidualConfig&, const ResidualConfig&) = default;
};

/// A server's copy of its children's key layers from the previous round.
struct KeyCache {
  std::map<NodeId, ParamSet> keys;
  int stamp = -1;  // round the keys were taken in; -1 while empty

  bool empty() const { return keys.empty(); }
};

/// For each key layer, selects up to `nu` children whose layer is least
/// similar to this node's post-aggregation layer (ties -> lower id).
/// Children whose residual ceiling is themselves are never selected.
std::vector<ResidualPacket> partition_residuals(NodeId self, const ParamSet& own_post_agg_keys,
                                                std::span<const NodeKeys> children, const FederationTree& tree,
                                                const ResidualConfig& cfg, int round);

struct DroppedPacket {
  ResidualPacket packet;
  NodeId at = 0;
  int round = 0;
  std::string reason;  // "ttl", "no eligible child"
};

struct RouteResult {
  std::map<NodeId, std::vector<ResidualPacket>> aggregate;  // A: leaf children
  std::map<NodeId, std::vector<ResidualPacket>> forward;    // R: internal children
  std::vector<ResidualPacket> held;                         // waiting for a key cache
  std::vector<DroppedPacket> dropped;
};

/// Sends each packet to the child whose cached layer is most similar,
/// skipping any child whose subtree contains the packet's origin.
RouteResult route_residuals(NodeId self, std::vector<ResidualPacket> incoming, const KeyCache& cache,
                            const FederationTree& tree, const ResidualConfig& cfg, int round);

}  // namespace worldlm
