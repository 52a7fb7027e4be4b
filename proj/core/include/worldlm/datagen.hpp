#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "worldlm/tokens.hpp"
#include "worldlm/topology.hpp"

namespace worldlm {

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// First-order Markov chain over V tokens.
struct MarkovSource {
  int id = 0;
  std::size_t vocab = 0;
  std::vector<double> transition;  // V x V, row-stochastic
  std::vector<double> initial;     // length V

  double prob(std::size_t from, std::size_t to) const { return transition[from * vocab + to]; }
  std::span<const double> row(std::size_t from) const {
    return {transition.data() + from * vocab, vocab};
  }
  /// Throws unless rows and `initial` are non-negative and sum to 1 +- 1e-9.
  void validate() const;
};

struct ClusteredSourceOptions {
  double concentration = 0.2;   // Dirichlet concentration of random rows
  double within_cluster = 0.25; // perturbation share of a source around its cluster matrix
};

/// Cluster c's matrix is (1-div)*G + div*R_c with G shared and R_c drawn per
/// cluster; each source perturbs its cluster matrix by div*within_cluster.
/// Source i belongs to cluster i / sources_per_cluster.
std::vector<MarkovSource> make_clustered_sources(std::size_t num_clusters, std::size_t sources_per_cluster,
                                                 double divergence, std::size_t vocab, std::uint64_t seed,
                                                 const ClusteredSourceOptions& opts = {});

/// Stationary distribution by power iteration from uniform (L1 tol 1e-12,
/// at most 1e5 iterations; throws ConvergenceError otherwise).
std::vector<double> stationary_distribution(const MarkovSource& src);
/// sum_i pi_i sum_j T_ij (-ln T_ij), nats per token.
double entropy_rate(const MarkovSource& src);
/// Cross-entropy rate of `model`'s transitions on data from `src`.
double cross_entropy_rate(const MarkovSource& src, const MarkovSource& model);

double total_variation(std::span<const double> p, std::span<const double> q);

std::vector<Token> sample_tokens(const MarkovSource& src, std::size_t length, Rng& rng);
/// exp of the mean -ln T[x_t, x_{t+1}] over every transition in the split.
double markov_perplexity(const MarkovSource& src, const TokenSplit& split);

struct MixtureComponent {
  int source_id = 0;
  double weight = 0.0;
  std::size_t token_budget = 0;
  friend bool operator==(const MixtureComponent&, const MixtureComponent&) = default;
};

struct MixtureSpec {
  std::vector<MixtureComponent> components;
  std::size_t total_budget() const;
  void validate() const;
  friend bool operator==(const MixtureSpec&, const MixtureSpec&) = default;
};

struct Shard {
  TokenSplit train;
  TokenSplit val;
  TokenSplit test;
  MixtureSpec provenance;
};

struct HierarchyDataOptions {
  double eval_fraction = 0.1;        // val and test budgets relative to train
  std::size_t min_eval_tokens = 256;
  /// Train budget of internal nodes; absent entries use the sum of the
  /// descendant leaves' budgets.
  std::map<NodeId, std::size_t> internal_budgets;
};

/// Size-weighted mixture of every leaf below `id` (the leaf's own spec for a leaf).
MixtureSpec descendant_mixture(const FederationTree& tree, const std::map<NodeId, MixtureSpec>& assignment,
                               NodeId id);

/// Exchanges the assignments of the two smallest-budget leaves that have
/// different parents (ties -> lower id). Throws when no such pair exists.
std::map<NodeId, MixtureSpec> swap_smallest_leaves(const FederationTree& tree,
                                                   std::map<NodeId, MixtureSpec> assignment);

/// Each split is drawn from its own RNG stream keyed by (seed, node, split,
/// component); one contiguous segment per component and split.
std::map<NodeId, Shard> build_hierarchy_dataset(const FederationTree& tree,
                                                std::span<const MarkovSource> sources,
                                                const std::map<NodeId, MixtureSpec>& assignment,
                                                std::uint64_t seed, const HierarchyDataOptions& opts = {});

/// Byte-level vocabulary: ids are assigned to bytes in order of first
/// appearance, up to `capacity`.
class VocabMap {
 public:
  explicit VocabMap(std::size_t capacity) : capacity_(capacity) {}
  Token encode(std::uint8_t byte);  // throws InputError on overflow
  std::uint8_t decode(Token id) const;
  std::size_t size() const { return to_byte_.size(); }
  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  std::map<std::uint8_t, Token> to_id_;
  std::vector<std::uint8_t> to_byte_;
};

/// Tokenizes a file byte by byte and splits it 90/5/5 (floor for train and
/// val, remainder to test).
Shard load_text_shard(const std::filesystem::path& path, VocabMap& vocab);
std::vector<std::uint8_t> detokenize(const TokenSplit& split, const VocabMap& vocab);

/// `<dir>/<name>.json` manifest plus one little-endian uint16 file per split.
void save_shard(const Shard& shard, const std::filesystem::path& dir, const std::string& name);
Shard load_shard(const std::filesystem::path& dir, const std::string& name);

}  // namespace worldlm
