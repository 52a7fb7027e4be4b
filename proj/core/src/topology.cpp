#include "worldlm/topology.hpp"

#include <algorithm>
#include <map>
#include <queue>
#include <set>
#include <sstream>

#include "json_io.hpp"

namespace worldlm {

bool FederationTree::contains(NodeId id) const {
  return std::ranges::any_of(nodes_, [id](const NodeSpec& n) { return n.id == id; });
}

const NodeSpec& FederationTree::node(NodeId id) const {
  for (const auto& n : nodes_) {
    if (n.id == id) return n;
  }
  throw std::out_of_range("no node with id " + std::to_string(id));
}

NodeSpec& FederationTree::node(NodeId id) {
  for (auto& n : nodes_) {
    if (n.id == id) return n;
  }
  throw std::out_of_range("no node with id " + std::to_string(id));
}

std::vector<NodeId> FederationTree::ids() const {
  std::vector<NodeId> out;
  for (const auto& n : nodes_) out.push_back(n.id);
  std::ranges::sort(out);
  return out;
}

std::vector<NodeId> FederationTree::children_of(NodeId id) const {
  auto out = node(id).children;
  std::ranges::sort(out);
  return out;
}

std::vector<NodeId> FederationTree::ancestors(NodeId id) const {
  std::vector<NodeId> out;
  auto p = node(id).parent;
  while (p) {
    if (out.size() > nodes_.size()) throw std::logic_error("ancestors: cycle in tree");
    out.push_back(*p);
    p = node(*p).parent;
  }
  return out;
}

bool FederationTree::is_ancestor_or_self(NodeId ancestor, NodeId id) const {
  if (ancestor == id) return true;
  const auto chain = ancestors(id);
  return std::ranges::find(chain, ancestor) != chain.end();
}

std::vector<NodeId> FederationTree::leaves() const {
  std::vector<NodeId> out;
  for (NodeId id : ids()) {
    if (is_leaf(id)) out.push_back(id);
  }
  return out;
}

std::size_t FederationTree::level_of(NodeId id) const { return ancestors(id).size(); }

std::size_t FederationTree::depth() const {
  std::size_t d = 0;
  for (const auto& n : nodes_) d = std::max(d, level_of(n.id) + 1);
  return d;
}

std::vector<Violation> validate(const FederationTree& tree) {
  std::vector<Violation> out;
  std::map<NodeId, const NodeSpec*> by_id;
  for (const auto& n : tree.specs()) {
    if (!by_id.emplace(n.id, &n).second) {
      out.push_back({n.id, "duplicate id", "node id " + std::to_string(n.id) + " appears more than once"});
    }
  }
  if (by_id.empty()) {
    out.push_back({kRootId, "root uniqueness", "tree has no nodes"});
    return out;
  }

  std::vector<NodeId> roots;
  for (const auto& [id, n] : by_id) {
    if (!n->parent) roots.push_back(id);
  }
  if (roots.size() != 1) {
    std::ostringstream os;
    os << "expected exactly one parentless node, found " << roots.size();
    for (auto r : roots) os << ' ' << r;
    out.push_back({roots.empty() ? kRootId : roots.back(), "root uniqueness", os.str()});
  } else if (roots.front() != kRootId) {
    out.push_back({roots.front(), "root uniqueness",
                   "the parentless node must have id 0, found " + std::to_string(roots.front())});
  }

  bool references_ok = true;
  for (const auto& [id, n] : by_id) {
    if (n->parent && !by_id.contains(*n->parent)) {
      out.push_back({id, "dangling reference", "parent " + std::to_string(*n->parent) + " does not exist"});
      references_ok = false;
    }
    std::set<NodeId> seen;
    for (NodeId c : n->children) {
      if (!by_id.contains(c)) {
        out.push_back({id, "dangling reference", "child " + std::to_string(c) + " does not exist"});
        references_ok = false;
      } else if (by_id.at(c)->parent != id) {
        out.push_back({id, "parent/child mismatch",
                       "lists child " + std::to_string(c) + " whose parent is not " + std::to_string(id)});
      }
      if (!seen.insert(c).second) {
        out.push_back({id, "parent/child mismatch", "child " + std::to_string(c) + " listed twice"});
      }
    }
    if (n->parent && by_id.contains(*n->parent)) {
      const auto& pc = by_id.at(*n->parent)->children;
      if (std::ranges::find(pc, id) == pc.end()) {
        out.push_back({id, "parent/child mismatch",
                       "parent " + std::to_string(*n->parent) + " does not list this node as a child"});
      }
    }
  }
  if (!references_ok) return out;

  std::set<NodeId> cyclic;
  for (const auto& [id, n] : by_id) {
    std::set<NodeId> path{id};
    auto p = n->parent;
    while (p) {
      if (!path.insert(*p).second) {
        if (cyclic.insert(id).second) {
          out.push_back({id, "cycle", "following parents from node " + std::to_string(id) + " revisits node " +
                                          std::to_string(*p)});
        }
        break;
      }
      p = by_id.at(*p)->parent;
    }
  }
  if (!cyclic.empty()) return out;

  for (const auto& [id, n] : by_id) {
    const NodeId ceiling = n->residual_ceiling;
    bool ok = ceiling == id;
    for (auto p = n->parent; p && !ok; p = by_id.at(*p)->parent) ok = *p == ceiling;
    if (!ok) {
      out.push_back({id, "residual ceiling",
                     "residual_ceiling " + std::to_string(ceiling) + " is not an ancestor of node " +
                         std::to_string(id)});
    }
  }
  return out;
}

void require_valid(const FederationTree& tree) {
  const auto violations = validate(tree);
  if (violations.empty()) return;
  std::ostringstream os;
  os << "invalid federation tree:";
  for (const auto& v : violations) os << "\n  node " << v.node << ": " << v.kind << ": " << v.message;
  throw std::invalid_argument(os.str());
}

std::vector<std::vector<NodeId>> levels(const FederationTree& tree) {
  require_valid(tree);
  std::vector<std::vector<NodeId>> out;
  std::vector<NodeId> frontier{kRootId};
  while (!frontier.empty()) {
    std::ranges::sort(frontier);
    std::vector<NodeId> next;
    for (NodeId id : frontier) {
      for (NodeId c : tree.node(id).children) next.push_back(c);
    }
    out.push_back(std::move(frontier));
    frontier = std::move(next);
  }
  return out;
}

std::string tree_to_json(const FederationTree& tree) {
  nlohmann::json nodes = nlohmann::json::array();
  for (NodeId id : tree.ids()) nodes.push_back(detail::to_json(tree.node(id)));
  return nlohmann::json{{"nodes", nodes}}.dump(2);
}

FederationTree tree_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  FederationTree tree;
  for (const auto& n : j.at("nodes")) {
    NodeSpec spec;
    spec.id = n.at("id");
    spec.name = n.value("name", "");
    if (!n.at("parent").is_null()) spec.parent = n.at("parent").get<NodeId>();
    spec.children = n.at("children").get<std::vector<NodeId>>();
    spec.dataset_ref = n.value("dataset_ref", "");
    spec.dp_enabled = n.value("dp_enabled", false);
    spec.residual_ceiling = n.value("residual_ceiling", kRootId);
    spec.trains_locally = n.value("trains_locally", true);
    if (n.contains("trainer")) detail::from_json(n["trainer"], spec.trainer, "/nodes/trainer");
    tree.add(std::move(spec));
  }
  return tree;
}

namespace {

NodeSpec make_node(NodeId id, std::optional<NodeId> parent, std::vector<NodeId> children, std::string name,
                   const TrainerConfig& trainer) {
  NodeSpec n;
  n.id = id;
  n.parent = parent;
  n.children = std::move(children);
  n.name = name;
  n.dataset_ref = std::move(name);
  n.trainer = trainer;
  return n;
}

}  // namespace

FederationTree fig2_tree(const TrainerConfig& trainer) {
  FederationTree tree;
  tree.add(make_node(0, std::nullopt, {1, 2}, "root", trainer));
  tree.add(make_node(1, 0, {3, 4}, "internet", trainer));
  tree.add(make_node(2, 0, {5, 6}, "medical", trainer));
  tree.add(make_node(3, 1, {}, "CC", trainer));
  tree.add(make_node(4, 1, {}, "WK", trainer));
  tree.add(make_node(5, 2, {}, "PBC", trainer));
  tree.add(make_node(6, 2, {}, "PBA", trainer));
  return tree;
}

FederationTree star_tree(std::size_t leaves, const TrainerConfig& trainer, bool root_trains) {
  FederationTree tree;
  std::vector<NodeId> kids;
  for (std::size_t i = 0; i < leaves; ++i) kids.push_back(static_cast<NodeId>(i + 1));
  auto root = make_node(0, std::nullopt, kids, "root", trainer);
  root.trains_locally = root_trains;
  tree.add(std::move(root));
  for (NodeId k : kids) tree.add(make_node(k, 0, {}, "client" + std::to_string(k), trainer));
  return tree;
}

}  // namespace worldlm
