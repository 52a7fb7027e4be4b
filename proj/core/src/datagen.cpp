#include "worldlm/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "worldlm/model.hpp"

namespace worldlm {

namespace {

std::vector<double> dirichlet_row(std::size_t n, double concentration, Rng& rng) {
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::vector<double> row(n);
  double sum = 0.0;
  for (auto& v : row) {
    v = gamma(rng);
    sum += v;
  }
  if (!(sum > 0.0)) {
    std::ranges::fill(row, 1.0 / static_cast<double>(n));
    return row;
  }
  for (auto& v : row) v /= sum;
  return row;
}

std::vector<double> random_matrix(std::size_t V, double concentration, Rng& rng) {
  std::vector<double> m;
  m.reserve(V * V);
  for (std::size_t i = 0; i < V; ++i) {
    auto row = dirichlet_row(V, concentration, rng);
    m.insert(m.end(), row.begin(), row.end());
  }
  return m;
}

void normalize_rows(std::vector<double>& m, std::size_t V) {
  for (std::size_t i = 0; i < V; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) sum += m[i * V + j];
    for (std::size_t j = 0; j < V; ++j) m[i * V + j] /= sum;
  }
}

std::vector<double> blend(const std::vector<double>& a, const std::vector<double>& b, double t) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
  return out;
}

// Splits `total` across weights; the last entry absorbs rounding.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
  std::vector<std::size_t> out(weights.size(), 0);
  std::size_t used = 0;
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
    out[i] = static_cast<std::size_t>(std::llround(weights[i] * static_cast<double>(total)));
    out[i] = std::min(out[i], total - used);
    used += out[i];
  }
  if (!weights.empty()) out.back() = total - used;
  return out;
}

void collect_leaves(const FederationTree& tree, NodeId id, std::vector<NodeId>& out) {
  if (tree.is_leaf(id)) {
    out.push_back(id);
    return;
  }
  for (NodeId c : tree.children_of(id)) collect_leaves(tree, c, out);
}

}  // namespace

void MarkovSource::validate() const {
  if (vocab < 2 || transition.size() != vocab * vocab || initial.size() != vocab) {
    throw std::invalid_argument("MarkovSource " + std::to_string(id) + ": inconsistent sizes");
  }
  auto check = [this](std::span<const double> row, const char* what) {
    double sum = 0.0;
    for (double v : row) {
      if (!(v >= 0.0)) throw std::invalid_argument("MarkovSource " + std::to_string(id) + ": negative " + what);
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw std::invalid_argument("MarkovSource " + std::to_string(id) + ": " + what + " sums to " +
                                  std::to_string(sum));
    }
  };
  for (std::size_t i = 0; i < vocab; ++i) check(row(i), "transition row");
  check(initial, "initial distribution");
}

std::vector<MarkovSource> make_clustered_sources(std::size_t num_clusters, std::size_t sources_per_cluster,
                                                 double divergence, std::size_t vocab, std::uint64_t seed,
                                                 const ClusteredSourceOptions& opts) {
  if (vocab < 2) throw std::invalid_argument("make_clustered_sources: vocab must be >= 2");
  if (!(divergence >= 0.0 && divergence <= 1.0)) {
    throw std::invalid_argument("make_clustered_sources: divergence must lie in [0, 1]");
  }
  // Every random matrix is drawn regardless of divergence so that sweeping
  // divergence with a fixed seed moves along one family of sources.
  Rng global_rng = make_rng(seed, Stream::sources, {0});
  const auto global = random_matrix(vocab, opts.concentration, global_rng);

  std::vector<MarkovSource> out;
  for (std::size_t c = 0; c < num_clusters; ++c) {
    Rng cluster_rng = make_rng(seed, Stream::sources, {1, c});
    const auto cluster = blend(global, random_matrix(vocab, opts.concentration, cluster_rng), divergence);
    for (std::size_t s = 0; s < sources_per_cluster; ++s) {
      Rng source_rng = make_rng(seed, Stream::sources, {2, c, s});
      const auto own = random_matrix(vocab, opts.concentration, source_rng);
      MarkovSource src;
      src.id = static_cast<int>(c * sources_per_cluster + s);
      src.vocab = vocab;
      src.transition = blend(cluster, own, divergence * opts.within_cluster);
      normalize_rows(src.transition, vocab);
      src.initial.assign(vocab, 1.0 / static_cast<double>(vocab));
      src.validate();
      out.push_back(std::move(src));
    }
  }
  return out;
}

std::vector<double> stationary_distribution(const MarkovSource& src) {
  const std::size_t V = src.vocab;
  std::vector<double> pi(V, 1.0 / static_cast<double>(V)), next(V);
  for (int iter = 0; iter < 100000; ++iter) {
    std::ranges::fill(next, 0.0);
    for (std::size_t i = 0; i < V; ++i) {
      for (std::size_t j = 0; j < V; ++j) next[j] += pi[i] * src.prob(i, j);
    }
    double diff = 0.0;
    for (std::size_t j = 0; j < V; ++j) diff += std::abs(next[j] - pi[j]);
    pi.swap(next);
    if (diff < 1e-12) return pi;
  }
  throw ConvergenceError("stationary distribution of source " + std::to_string(src.id) +
                         " did not converge (reducible or periodic chain)");
}

double entropy_rate(const MarkovSource& src) {
  return cross_entropy_rate(src, src);
}

double cross_entropy_rate(const MarkovSource& src, const MarkovSource& model) {
  if (src.vocab != model.vocab) throw std::invalid_argument("cross_entropy_rate: vocab mismatch");
  const auto pi = stationary_distribution(src);
  double h = 0.0;
  for (std::size_t i = 0; i < src.vocab; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < src.vocab; ++j) {
      const double p = src.prob(i, j);
      if (p > 0.0) row -= p * std::log(model.prob(i, j));
    }
    h += pi[i] * row;
  }
  return h;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

std::vector<Token> sample_tokens(const MarkovSource& src, std::size_t length, Rng& rng) {
  std::vector<Token> out;
  if (length == 0) return out;
  out.reserve(length);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&](std::span<const double> probs) {
    const double x = u(rng);
    double acc = 0.0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
      acc += probs[j];
      if (x < acc) return static_cast<Token>(j);
    }
    // rounding left x above the last cumulative sum: take the last positive entry
    for (std::size_t j = probs.size(); j-- > 0;) {
      if (probs[j] > 0.0) return static_cast<Token>(j);
    }
    return Token{0};
  };
  out.push_back(draw(src.initial));
  while (out.size() < length) out.push_back(draw(src.row(out.back())));
  return out;
}

double markov_perplexity(const MarkovSource& src, const TokenSplit& split) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& seg : split.segments) {
    for (std::size_t t = 0; t + 1 < seg.size(); ++t) {
      nll -= std::log(src.prob(seg[t], seg[t + 1]));
      ++count;
    }
  }
  if (count == 0) throw InputError("markov_perplexity: no transitions");
  return std::exp(nll / static_cast<double>(count));
}

std::size_t MixtureSpec::total_budget() const {
  std::size_t n = 0;
  for (const auto& c : components) n += c.token_budget;
  return n;
}

void MixtureSpec::validate() const {
  if (components.empty()) throw std::invalid_argument("MixtureSpec: no components");
  double sum = 0.0;
  for (const auto& c : components) {
    if (!(c.weight >= 0.0)) throw std::invalid_argument("MixtureSpec: negative weight");
    sum += c.weight;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("MixtureSpec: weights sum to " + std::to_string(sum));
}

MixtureSpec descendant_mixture(const FederationTree& tree, const std::map<NodeId, MixtureSpec>& assignment,
                               NodeId id) {
  std::vector<NodeId> leaves;
  collect_leaves(tree, id, leaves);
  std::map<int, std::size_t> budget_by_source;
  std::vector<int> order;
  for (NodeId leaf : leaves) {
    const auto it = assignment.find(leaf);
    if (it == assignment.end()) {
      throw std::invalid_argument("leaf " + std::to_string(leaf) + " (" + tree.node(leaf).name +
                                  ") has no data assignment");
    }
    for (const auto& c : it->second.components) {
      if (!budget_by_source.contains(c.source_id)) order.push_back(c.source_id);
      budget_by_source[c.source_id] += c.token_budget;
    }
  }
  MixtureSpec out;
  std::size_t total = 0;
  for (const auto& [src, b] : budget_by_source) total += b;
  if (total == 0) throw std::invalid_argument("node " + std::to_string(id) + " has zero token budget");
  for (int src : order) {
    const auto b = budget_by_source[src];
    out.components.push_back({src, static_cast<double>(b) / static_cast<double>(total), b});
  }
  return out;
}

std::map<NodeId, MixtureSpec> swap_smallest_leaves(const FederationTree& tree,
                                                   std::map<NodeId, MixtureSpec> assignment) {
  std::vector<std::pair<std::size_t, NodeId>> leaves;
  for (NodeId leaf : tree.leaves()) {
    const auto it = assignment.find(leaf);
    if (it == assignment.end()) throw std::invalid_argument("leaf " + std::to_string(leaf) + " has no data assignment");
    leaves.emplace_back(it->second.total_budget(), leaf);
  }
  std::ranges::sort(leaves);
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (std::size_t j = i + 1; j < leaves.size(); ++j) {
      const NodeId a = leaves[i].second;
      const NodeId b = leaves[j].second;
      if (tree.node(a).parent != tree.node(b).parent) {
        std::swap(assignment.at(a), assignment.at(b));
        return assignment;
      }
    }
  }
  throw std::invalid_argument("swap_smallest_leaves: no two leaves under different parents");
}

std::map<NodeId, Shard> build_hierarchy_dataset(const FederationTree& tree,
                                                std::span<const MarkovSource> sources,
                                                const std::map<NodeId, MixtureSpec>& assignment,
                                                std::uint64_t seed, const HierarchyDataOptions& opts) {
  require_valid(tree);
  auto find_source = [&](int id) -> const MarkovSource& {
    for (const auto& s : sources) {
      if (s.id == id) return s;
    }
    throw std::invalid_argument("unknown source id " + std::to_string(id));
  };

  std::map<NodeId, Shard> out;
  for (NodeId id : tree.ids()) {
    MixtureSpec spec = descendant_mixture(tree, assignment, id);
    if (!tree.is_leaf(id)) {
      std::size_t budget = spec.total_budget();
      if (auto it = opts.internal_budgets.find(id); it != opts.internal_budgets.end()) budget = it->second;
      std::vector<double> weights;
      for (const auto& c : spec.components) weights.push_back(c.weight);
      const auto budgets = apportion(budget, weights);
      for (std::size_t i = 0; i < spec.components.size(); ++i) spec.components[i].token_budget = budgets[i];
    }
    spec.validate();

    std::vector<double> weights;
    for (const auto& c : spec.components) weights.push_back(c.weight);
    const std::size_t train_total = spec.total_budget();
    const std::size_t eval_total = std::max(
        opts.min_eval_tokens,
        static_cast<std::size_t>(std::llround(opts.eval_fraction * static_cast<double>(train_total))));
    const auto eval_budgets = apportion(eval_total, weights);

    Shard shard;
    shard.provenance = spec;
    for (std::size_t ci = 0; ci < spec.components.size(); ++ci) {
      const auto& src = find_source(spec.components[ci].source_id);
      const auto key = std::initializer_list<std::uint64_t>{static_cast<std::uint64_t>(id), ci};
      Rng train_rng = make_rng(seed, Stream::data_train, key);
      Rng val_rng = make_rng(seed, Stream::data_val, key);
      Rng test_rng = make_rng(seed, Stream::data_test, key);
      if (spec.components[ci].token_budget > 0) {
        shard.train.segments.push_back(sample_tokens(src, spec.components[ci].token_budget, train_rng));
      }
      if (eval_budgets[ci] > 0) {
        shard.val.segments.push_back(sample_tokens(src, eval_budgets[ci], val_rng));
        shard.test.segments.push_back(sample_tokens(src, eval_budgets[ci], test_rng));
      }
    }
    if (shard.train.empty() || shard.val.empty() || shard.test.empty()) {
      throw std::invalid_argument("node " + std::to_string(id) + " would receive an empty split");
    }
    out.emplace(id, std::move(shard));
  }
  return out;
}

Token VocabMap::encode(std::uint8_t byte) {
  if (auto it = to_id_.find(byte); it != to_id_.end()) return it->second;
  if (to_byte_.size() >= capacity_) {
    throw InputError("vocabulary overflow: byte " + std::to_string(byte) + " needs id " +
                     std::to_string(to_byte_.size()) + " but capacity is " + std::to_string(capacity_));
  }
  const auto id = static_cast<Token>(to_byte_.size());
  to_id_.emplace(byte, id);
  to_byte_.push_back(byte);
  return id;
}

std::uint8_t VocabMap::decode(Token id) const {
  if (id >= to_byte_.size()) throw InputError("token id " + std::to_string(id) + " not in vocabulary");
  return to_byte_[id];
}

Shard load_text_shard(const std::filesystem::path& path, VocabMap& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read text shard " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw InputError("text shard " + path.string() + " is empty");

  std::vector<Token> tokens;
  tokens.reserve(bytes.size());
  for (auto b : bytes) tokens.push_back(vocab.encode(b));

  const std::size_t n = tokens.size();
  const std::size_t n_train = n * 9 / 10;
  const std::size_t n_val = n / 20;
  const std::size_t n_test = n - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw InputError("text shard " + path.string() + " is too short for a 90/5/5 split");
  }
  Shard shard;
  const auto begin = tokens.begin();
  shard.train.segments.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(n_train));
  shard.val.segments.emplace_back(begin + static_cast<std::ptrdiff_t>(n_train),
                                  begin + static_cast<std::ptrdiff_t>(n_train + n_val));
  shard.test.segments.emplace_back(begin + static_cast<std::ptrdiff_t>(n_train + n_val), tokens.end());
  shard.provenance.components.push_back({-1, 1.0, n});
  return shard;
}

std::vector<std::uint8_t> detokenize(const TokenSplit& split, const VocabMap& vocab) {
  std::vector<std::uint8_t> out;
  for (const auto& seg : split.segments) {
    for (Token t : seg) out.push_back(vocab.decode(t));
  }
  return out;
}

namespace {

void write_u16(const std::filesystem::path& path, const TokenSplit& split) {
  std::vector<std::uint8_t> bytes;
  for (const auto& seg : split.segments) {
    for (Token t : seg) {
      bytes.push_back(static_cast<std::uint8_t>(t & 0xff));
      bytes.push_back(static_cast<std::uint8_t>(t >> 8));
    }
  }
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

TokenSplit read_u16(const std::filesystem::path& path, const std::vector<std::size_t>& lengths) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t expected = 2 * std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  if (bytes.size() != expected) throw std::runtime_error("token file size mismatch: " + path.string());
  TokenSplit split;
  std::size_t pos = 0;
  for (auto len : lengths) {
    std::vector<Token> seg(len);
    for (auto& t : seg) {
      t = static_cast<Token>(bytes[pos] | (bytes[pos + 1] << 8));
      pos += 2;
    }
    split.segments.push_back(std::move(seg));
  }
  return split;
}

}  // namespace

void save_shard(const Shard& shard, const std::filesystem::path& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format", "worldlm-shard/1"}, {"dtype", "uint16-le"}};
  nlohmann::json prov = nlohmann::json::array();
  for (const auto& c : shard.provenance.components) {
    prov.push_back({{"source_id", c.source_id}, {"weight", c.weight}, {"token_budget", c.token_budget}});
  }
  manifest["provenance"] = prov;
  const std::pair<const char*, const TokenSplit*> splits[] = {
      {"train", &shard.train}, {"val", &shard.val}, {"test", &shard.test}};
  for (const auto& [split_name, split] : splits) {
    const std::string file = name + "." + split_name + ".u16";
    std::vector<std::size_t> lengths;
    for (const auto& s : split->segments) lengths.push_back(s.size());
    manifest["splits"][split_name] = {{"file", file}, {"segments", lengths}};
    write_u16(dir / file, *split);
  }
  std::ofstream out(dir / (name + ".json"));
  out << manifest.dump(2) << '\n';
}

Shard load_shard(const std::filesystem::path& dir, const std::string& name) {
  std::ifstream in(dir / (name + ".json"));
  if (!in) throw std::runtime_error("cannot open shard manifest " + (dir / (name + ".json")).string());
  const auto manifest = nlohmann::json::parse(in);
  Shard shard;
  for (const auto& c : manifest.at("provenance")) {
    shard.provenance.components.push_back(
        {c.at("source_id").get<int>(), c.at("weight").get<double>(), c.at("token_budget").get<std::size_t>()});
  }
  auto load = [&](const char* split_name) {
    const auto& s = manifest.at("splits").at(split_name);
    return read_u16(dir / s.at("file").get<std::string>(), s.at("segments").get<std::vector<std::size_t>>());
  };
  shard.train = load("train");
  shard.val = load("val");
  shard.test = load("test");
  return shard;
}

}  // namespace worldlm
