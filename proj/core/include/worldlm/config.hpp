#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "worldlm/engine.hpp"

namespace worldlm {

/// Invalid configuration. what() reads "<origin>:<line>:<column>: <message>"
/// when the problem can be tied to a position in the source text.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& what, std::string pointer, int line, int column)
      : std::invalid_argument(what), pointer_(std::move(pointer)), line_(line), column_(column) {}
  const std::string& pointer() const { return pointer_; }
  int line() const { return line_; }  // 0 when unknown
  int column() const { return column_; }

 private:
  std::string pointer_;
  int line_;
  int column_;
};

struct DataConfig {
  std::string kind = "clustered";  // "clustered", "iid" or "text"
  std::size_t num_clusters = 2;
  std::size_t sources_per_cluster = 2;
  double divergence = 0.8;
  double concentration = 0.2;
  double within_cluster = 0.25;
  double eval_fraction = 0.1;
  std::size_t min_eval_tokens = 256;
  /// Exchange the data of the two smallest leaves that sit under different
  /// parents (the swapped Fig. 2 arrangement).
  bool swap_small_leaves = false;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct NodeConfig {
  std::string name;
  std::vector<std::string> children;
  bool trains_locally = true;
  bool dp = false;
  std::string residual_ceiling;  // node name; empty means the root
  int source = -1;               // leaves of synthetic datasets
  std::size_t tokens = 0;        // train budget; 0 on internal nodes = sum of descendant leaves
  std::string text;              // leaves of "text" datasets
  std::optional<TrainerConfig> trainer;  // overrides the experiment trainer
  friend bool operator==(const NodeConfig&, const NodeConfig&) = default;
};

/// Everything needed to reproduce a run. The first node is the root; ids are
/// assigned in breadth-first order with children in listed order.
struct ExperimentConfig {
  std::string id = "experiment";
  std::uint64_t seed = 1;
  int rounds = 12;
  ModelConfig model;
  /// schedule.total_steps == 0 resolves to rounds * stages * local_steps.
  TrainerConfig trainer;
  AttentionConfig attention;
  ResidualConfig residual;
  ServerConfig server;
  DpConfig dp;  // enabled_nodes is derived from the per-node flags
  DataConfig data;
  std::vector<NodeConfig> nodes;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

ExperimentConfig parse_config(std::string_view text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
/// Pretty-printed JSON that parse_config reads back to an equal config.
std::string config_to_json(const ExperimentConfig& cfg);

/// `key=value` with a dotted path ("model.embed_dim=8", "nodes.CC.dp=true").
/// Array elements of "nodes" are addressed by name or index. The value is
/// read as JSON when it parses, otherwise as a string.
void apply_override(ExperimentConfig& cfg, std::string_view assignment);

std::vector<std::string> preset_names();
/// Throws std::invalid_argument naming the preset when unknown.
ExperimentConfig preset(std::string_view name);

/// Node ids in BFS order, matching build_tree().
std::vector<std::string> node_names(const ExperimentConfig& cfg);
FederationTree build_tree(const ExperimentConfig& cfg);
/// Resolves the tree, data and schedule into engine inputs.
ExperimentSetup build_setup(const ExperimentConfig& cfg, std::size_t workers = 1);

}  // namespace worldlm
