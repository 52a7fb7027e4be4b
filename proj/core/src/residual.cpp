#include "worldlm/residual.hpp"

#include <algorithm>
#include <tuple>

namespace worldlm {

void ResidualConfig::validate() const {
  if (nu < 0) throw std::invalid_argument("residual nu must be non-negative");
  if (ttl_depth_factor < 1) throw std::invalid_argument("residual ttl_depth_factor must be >= 1");
}

std::vector<ResidualPacket> partition_residuals(NodeId self, const ParamSet& own_post_agg_keys,
                                                std::span<const NodeKeys> children, const FederationTree& tree,
                                                const ResidualConfig& cfg, int round) {
  cfg.validate();
  std::vector<ResidualPacket> out;
  if (cfg.nu == 0) return out;

  std::vector<const NodeKeys*> eligible;
  for (const auto& c : children) {
    require_congruent(own_post_agg_keys, c.keys, "partition_residuals");
    if (tree.node(c.id).residual_ceiling != c.id) eligible.push_back(&c);
  }
  std::ranges::sort(eligible, {}, [](const NodeKeys* c) { return c->id; });

  for (std::size_t li = 0; li < own_post_agg_keys.size(); ++li) {
    const Tensor& own = own_post_agg_keys[li];
    std::vector<std::pair<double, const NodeKeys*>> scored;
    for (const auto* c : eligible) scored.emplace_back(similarity(own.data, c->keys[li].data, cfg.similarity), c);
    std::ranges::stable_sort(scored, [](const auto& a, const auto& b) {
      return std::tie(a.first, a.second->id) < std::tie(b.first, b.second->id);
    });
    int taken = 0;
    for (const auto& [sim, c] : scored) {
      if (taken == cfg.nu) break;
      if (!(sim < cfg.threshold)) break;
      ResidualPacket p;
      p.origin = c->id;
      p.layer = own.name;
      p.tensor = c->keys[li];
      p.created_round = round;
      p.ceiling = tree.node(c->id).residual_ceiling;
      p.path.push_back({self, sim});
      out.push_back(std::move(p));
      ++taken;
    }
  }
  return out;
}

RouteResult route_residuals(NodeId self, std::vector<ResidualPacket> incoming, const KeyCache& cache,
                            const FederationTree& tree, const ResidualConfig& cfg, int round) {
  std::ranges::stable_sort(incoming, [](const ResidualPacket& a, const ResidualPacket& b) {
    return std::tie(a.origin, a.layer, a.created_round) < std::tie(b.origin, b.layer, b.created_round);
  });
  RouteResult out;
  const int ttl = cfg.ttl_depth_factor * static_cast<int>(tree.depth());
  const auto children = tree.children_of(self);

  for (auto& packet : incoming) {
    if (round - packet.created_round > ttl) {
      out.dropped.push_back({std::move(packet), self, round, "ttl"});
      continue;
    }
    if (cache.empty()) {
      out.held.push_back(std::move(packet));
      continue;
    }
    NodeId best = -1;
    double best_sim = 0.0;
    for (NodeId c : children) {
      if (tree.is_ancestor_or_self(c, packet.origin)) continue;
      const auto it = cache.keys.find(c);
      if (it == cache.keys.end()) continue;
      const Tensor* cached = it->second.find(packet.layer);
      if (cached == nullptr) {
        throw std::invalid_argument("route_residuals: packet from node " + std::to_string(packet.origin) +
                                    " names unknown layer '" + packet.layer + "'");
      }
      const double sim = similarity(packet.tensor.data, cached->data, cfg.similarity);
      if (best < 0 || sim > best_sim) {
        best = c;
        best_sim = sim;
      }
    }
    if (best < 0) {
      out.dropped.push_back({std::move(packet), self, round, "no eligible child"});
      continue;
    }
    packet.path.push_back({self, best_sim});
    auto& dest = tree.is_leaf(best) ? out.aggregate[best] : out.forward[best];
    dest.push_back(std::move(packet));
  }
  return out;
}

}  // namespace worldlm
