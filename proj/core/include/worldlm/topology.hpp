#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "worldlm/model.hpp"

namespace worldlm {

using NodeId = std::int32_t;
inline constexpr NodeId kRootId = 0;

struct NodeSpec {
  NodeId id = 0;
  std::optional<NodeId> parent;
  std::vector<NodeId> children;
  std::string name;
  std::string dataset_ref;
  TrainerConfig trainer;
  bool dp_enabled = false;
  /// Highest ancestor this node's residual layers may travel to; equal to
  /// `id` disables cross-federation sharing for the node.
  NodeId residual_ceiling = kRootId;
  bool trains_locally = true;

  friend bool operator==(const NodeSpec&, const NodeSpec&) = default;
};

struct Violation {
  NodeId node = 0;
  std::string kind;  // "cycle", "root uniqueness", "dangling reference", ...
  std::string message;
};

/// Federation-of-federations topology. Construction performs no checks so
/// that malformed trees can be reported by validate(); every query below
/// other than node lookup assumes a valid tree.
class FederationTree {
 public:
  FederationTree() = default;
  explicit FederationTree(std::vector<NodeSpec> nodes) : nodes_(std::move(nodes)) {}

  void add(NodeSpec spec) { nodes_.push_back(std::move(spec)); }

  const std::vector<NodeSpec>& specs() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool contains(NodeId id) const;
  const NodeSpec& node(NodeId id) const;
  NodeSpec& node(NodeId id);

  /// All ids, ascending.
  std::vector<NodeId> ids() const;
  bool is_leaf(NodeId id) const { return node(id).children.empty(); }
  /// Children sorted by id.
  std::vector<NodeId> children_of(NodeId id) const;
  /// Strict ancestors, nearest first.
  std::vector<NodeId> ancestors(NodeId id) const;
  bool is_ancestor_or_self(NodeId ancestor, NodeId id) const;
  std::vector<NodeId> leaves() const;
  std::size_t level_of(NodeId id) const;
  /// Number of levels (a lone root has depth 1).
  std::size_t depth() const;

 private:
  std::vector<NodeSpec> nodes_;
};

std::vector<Violation> validate(const FederationTree& tree);
/// Throws std::invalid_argument listing every violation.
void require_valid(const FederationTree& tree);

/// Breadth-first stages: stage t holds every node at depth t, sorted by id.
std::vector<std::vector<NodeId>> levels(const FederationTree& tree);

std::string tree_to_json(const FederationTree& tree);
FederationTree tree_from_json(const std::string& text);

/// Root, two sub-federations ("internet", "medical") and four leaves
/// CC, WK (under internet) and PBC, PBA (under medical); ids 0..6 in BFS order.
FederationTree fig2_tree(const TrainerConfig& trainer = {});

/// Root plus `leaves` leaf clients.
FederationTree star_tree(std::size_t leaves, const TrainerConfig& trainer = {},
                         bool root_trains = true);

}  // namespace worldlm
