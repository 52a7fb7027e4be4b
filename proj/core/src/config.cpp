#include "worldlm/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <functional>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "json_io.hpp"

namespace worldlm {

using detail::json;
using detail::JsonPathError;
using detail::read_opt;
using detail::reject_unknown_keys;

namespace {

// Maps JSON pointers of a syntactically valid document to the line and
// column where the member key (or array element) starts.
class PositionIndex {
 public:
  explicit PositionIndex(std::string_view text) : text_(text) {
    skip_ws();
    value("");
  }

  std::pair<int, int> locate(std::string pointer) const {
    while (true) {
      if (auto it = pos_.find(pointer); it != pos_.end()) return it->second;
      if (pointer.empty()) return {1, 1};
      pointer.erase(pointer.rfind('/'));
    }
  }

 private:
  std::pair<int, int> here() const { return {line_, static_cast<int>(i_ - line_start_) + 1}; }

  void advance() {
    if (text_[i_] == '\n') {
      ++line_;
      line_start_ = i_ + 1;
    }
    ++i_;
  }

  void skip_ws() {
    while (i_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[i_]))) advance();
  }

  std::string string_token() {
    std::string out;
    advance();  // opening quote
    while (i_ < text_.size() && text_[i_] != '"') {
      if (text_[i_] == '\\') {
        advance();
        if (i_ < text_.size()) out.push_back(text_[i_] == 'n' ? '\n' : text_[i_]);
      } else {
        out.push_back(text_[i_]);
      }
      advance();
    }
    if (i_ < text_.size()) advance();
    return out;
  }

  void value(const std::string& path) {
    if (i_ >= text_.size()) return;
    const char c = text_[i_];
    if (c == '{') {
      advance();
      skip_ws();
      while (i_ < text_.size() && text_[i_] != '}') {
        const auto at = here();
        const std::string key = string_token();
        pos_.emplace(path + "/" + key, at);
        skip_ws();
        if (i_ < text_.size() && text_[i_] == ':') advance();
        skip_ws();
        value(path + "/" + key);
        skip_ws();
        if (i_ < text_.size() && text_[i_] == ',') advance();
        skip_ws();
      }
      if (i_ < text_.size()) advance();
    } else if (c == '[') {
      advance();
      skip_ws();
      for (int idx = 0; i_ < text_.size() && text_[i_] != ']'; ++idx) {
        const std::string p = path + "/" + std::to_string(idx);
        pos_.emplace(p, here());
        value(p);
        skip_ws();
        if (i_ < text_.size() && text_[i_] == ',') advance();
        skip_ws();
      }
      if (i_ < text_.size()) advance();
    } else if (c == '"') {
      string_token();
    } else {
      while (i_ < text_.size() && !std::strchr(",]} \t\r\n", text_[i_])) advance();
    }
  }

  std::string_view text_;
  std::size_t i_ = 0;
  int line_ = 1;
  std::size_t line_start_ = 0;
  std::map<std::string, std::pair<int, int>> pos_;
};

std::pair<int, int> offset_to_line(std::string_view text, std::size_t offset) {
  int line = 1;
  std::size_t start = 0;
  offset = std::min(offset, text.size());
  for (std::size_t i = 0; i < offset; ++i) {
    if (text[i] == '\n') {
      ++line;
      start = i + 1;
    }
  }
  return {line, static_cast<int>(offset - start) + 1};
}

std::string similarity_name(Similarity s) { return s == Similarity::cosine ? "cosine" : "dot"; }

Similarity similarity_from(const json& j, const std::string& where) {
  std::string name;
  try {
    name = j.get<std::string>();
  } catch (const json::exception& e) {
    throw JsonPathError(where, e.what());
  }
  if (name == "cosine") return Similarity::cosine;
  if (name == "dot") return Similarity::dot;
  throw JsonPathError(where, "expected \"cosine\" or \"dot\", got \"" + name + "\"");
}

void read_attention(const json& j, AttentionConfig& out, const std::string& where) {
  reject_unknown_keys(j, {"similarity", "temperature", "include_self", "enabled"}, where);
  if (j.contains("similarity")) out.similarity = similarity_from(j["similarity"], where + "/similarity");
  read_opt(j, "temperature", out.temperature, where);
  read_opt(j, "include_self", out.include_self, where);
  read_opt(j, "enabled", out.enabled, where);
}

void read_residual(const json& j, ResidualConfig& out, const std::string& where) {
  reject_unknown_keys(j, {"nu", "threshold", "similarity", "ttl_depth_factor"}, where);
  read_opt(j, "nu", out.nu, where);
  if (j.contains("threshold")) {
    const auto& t = j["threshold"];
    if (t.is_string() && t.get<std::string>() == "inf") {
      out.threshold = std::numeric_limits<double>::infinity();
    } else {
      read_opt(j, "threshold", out.threshold, where);
    }
  }
  if (j.contains("similarity")) out.similarity = similarity_from(j["similarity"], where + "/similarity");
  read_opt(j, "ttl_depth_factor", out.ttl_depth_factor, where);
}

void read_server(const json& j, ServerConfig& out, const std::string& where) {
  reject_unknown_keys(j, {"lr", "momentum"}, where);
  read_opt(j, "lr", out.lr, where);
  read_opt(j, "momentum", out.momentum, where);
}

void read_dp(const json& j, DpConfig& out, const std::string& where) {
  reject_unknown_keys(j, {"sigma", "initial_bound", "absolute_noise"}, where);
  read_opt(j, "sigma", out.sigma, where);
  read_opt(j, "initial_bound", out.initial_bound, where);
  read_opt(j, "absolute_noise", out.absolute_noise, where);
}

void read_data(const json& j, DataConfig& out, const std::string& where) {
  reject_unknown_keys(j, {"kind", "num_clusters", "sources_per_cluster", "divergence", "concentration",
                          "within_cluster", "eval_fraction", "min_eval_tokens", "swap_small_leaves"},
                      where);
  read_opt(j, "kind", out.kind, where);
  read_opt(j, "num_clusters", out.num_clusters, where);
  read_opt(j, "sources_per_cluster", out.sources_per_cluster, where);
  read_opt(j, "divergence", out.divergence, where);
  read_opt(j, "concentration", out.concentration, where);
  read_opt(j, "within_cluster", out.within_cluster, where);
  read_opt(j, "eval_fraction", out.eval_fraction, where);
  read_opt(j, "min_eval_tokens", out.min_eval_tokens, where);
  read_opt(j, "swap_small_leaves", out.swap_small_leaves, where);
  if (out.kind != "clustered" && out.kind != "iid" && out.kind != "text") {
    throw JsonPathError(where + "/kind", "expected \"clustered\", \"iid\" or \"text\", got \"" + out.kind + "\"");
  }
}

void read_node(const json& j, NodeConfig& out, const TrainerConfig& base, const std::string& where) {
  reject_unknown_keys(j, {"name", "children", "trains_locally", "dp", "residual_ceiling", "source", "tokens", "text",
                          "trainer"},
                      where);
  if (!j.contains("name")) throw JsonPathError(where, "node needs a \"name\"");
  read_opt(j, "name", out.name, where);
  read_opt(j, "children", out.children, where);
  read_opt(j, "trains_locally", out.trains_locally, where);
  read_opt(j, "dp", out.dp, where);
  read_opt(j, "residual_ceiling", out.residual_ceiling, where);
  read_opt(j, "source", out.source, where);
  read_opt(j, "tokens", out.tokens, where);
  read_opt(j, "text", out.text, where);
  if (j.contains("trainer")) {
    TrainerConfig t = base;
    detail::from_json(j["trainer"], t, where + "/trainer");
    out.trainer = t;
  }
}

json attention_json(const AttentionConfig& a) {
  return {{"similarity", similarity_name(a.similarity)},
          {"temperature", a.temperature},
          {"include_self", a.include_self},
          {"enabled", a.enabled}};
}

json residual_json(const ResidualConfig& r) {
  json j{{"nu", r.nu}, {"similarity", similarity_name(r.similarity)}, {"ttl_depth_factor", r.ttl_depth_factor}};
  j["threshold"] = std::isinf(r.threshold) ? json("inf") : json(r.threshold);
  return j;
}

json experiment_json(const ExperimentConfig& c) {
  json j;
  j["id"] = c.id;
  j["seed"] = c.seed;
  j["rounds"] = c.rounds;
  j["model"] = detail::to_json(c.model);
  j["trainer"] = detail::to_json(c.trainer);
  j["attention"] = attention_json(c.attention);
  j["residual"] = residual_json(c.residual);
  j["server"] = {{"lr", c.server.lr}, {"momentum", c.server.momentum}};
  j["dp"] = {{"sigma", c.dp.sigma}, {"initial_bound", c.dp.initial_bound}, {"absolute_noise", c.dp.absolute_noise}};
  const auto& d = c.data;
  j["data"] = {{"kind", d.kind},
               {"num_clusters", d.num_clusters},
               {"sources_per_cluster", d.sources_per_cluster},
               {"divergence", d.divergence},
               {"concentration", d.concentration},
               {"within_cluster", d.within_cluster},
               {"eval_fraction", d.eval_fraction},
               {"min_eval_tokens", d.min_eval_tokens},
               {"swap_small_leaves", d.swap_small_leaves}};
  json nodes = json::array();
  for (const auto& n : c.nodes) {
    json jn{{"name", n.name}};
    if (!n.children.empty()) jn["children"] = n.children;
    if (!n.trains_locally) jn["trains_locally"] = false;
    if (n.dp) jn["dp"] = true;
    if (!n.residual_ceiling.empty()) jn["residual_ceiling"] = n.residual_ceiling;
    if (n.source >= 0) jn["source"] = n.source;
    if (n.tokens > 0) jn["tokens"] = n.tokens;
    if (!n.text.empty()) jn["text"] = n.text;
    if (n.trainer) jn["trainer"] = detail::to_json(*n.trainer);
    nodes.push_back(std::move(jn));
  }
  j["nodes"] = std::move(nodes);
  return j;
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  reject_unknown_keys(j, {"id", "seed", "rounds", "model", "trainer", "attention", "residual", "server", "dp", "data",
                          "nodes"},
                      "");
  read_opt(j, "id", c.id, "");
  read_opt(j, "seed", c.seed, "");
  read_opt(j, "rounds", c.rounds, "");
  if (j.contains("model")) detail::from_json(j["model"], c.model, "/model");
  if (j.contains("trainer")) detail::from_json(j["trainer"], c.trainer, "/trainer");
  if (j.contains("attention")) read_attention(j["attention"], c.attention, "/attention");
  if (j.contains("residual")) read_residual(j["residual"], c.residual, "/residual");
  if (j.contains("server")) read_server(j["server"], c.server, "/server");
  if (j.contains("dp")) read_dp(j["dp"], c.dp, "/dp");
  if (j.contains("data")) read_data(j["data"], c.data, "/data");
  if (!j.contains("nodes") || !j["nodes"].is_array() || j["nodes"].empty()) {
    throw JsonPathError(j.contains("nodes") ? "/nodes" : "", "\"nodes\" must be a non-empty array");
  }
  for (std::size_t i = 0; i < j["nodes"].size(); ++i) {
    NodeConfig n;
    read_node(j["nodes"][i], n, c.trainer, "/nodes/" + std::to_string(i));
    c.nodes.push_back(std::move(n));
  }
  return c;
}

void check_section(const std::string& pointer, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const JsonPathError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw JsonPathError(pointer, e.what());
  }
}

TrainerConfig resolved_probe(TrainerConfig t) {
  if (t.schedule.total_steps == 0) t.schedule.total_steps = 1;
  return t;
}

std::string node_pointer(const ExperimentConfig& c, const std::string& name, const std::string& field = {}) {
  for (std::size_t i = 0; i < c.nodes.size(); ++i) {
    if (c.nodes[i].name == name) return "/nodes/" + std::to_string(i) + (field.empty() ? "" : "/" + field);
  }
  return "/nodes";
}

// BFS from the first node. Fills `order` with node indices; throws on
// unknown, repeated or unreachable names.
std::vector<std::size_t> bfs_order(const ExperimentConfig& c) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < c.nodes.size(); ++i) {
    if (c.nodes[i].name.empty()) throw JsonPathError("/nodes/" + std::to_string(i) + "/name", "empty node name");
    if (!index.emplace(c.nodes[i].name, i).second) {
      throw JsonPathError("/nodes/" + std::to_string(i) + "/name", "duplicate node name \"" + c.nodes[i].name + "\"");
    }
  }
  std::vector<std::size_t> order{0};
  std::vector<bool> seen(c.nodes.size(), false);
  seen[0] = true;
  for (std::size_t head = 0; head < order.size(); ++head) {
    const auto& n = c.nodes[order[head]];
    for (std::size_t k = 0; k < n.children.size(); ++k) {
      const std::string where = "/nodes/" + std::to_string(order[head]) + "/children/" + std::to_string(k);
      const auto it = index.find(n.children[k]);
      if (it == index.end()) throw JsonPathError(where, "unknown child \"" + n.children[k] + "\"");
      if (seen[it->second]) {
        throw JsonPathError(where, "node \"" + n.children[k] + "\" is reached twice (cycle or second parent)");
      }
      seen[it->second] = true;
      order.push_back(it->second);
    }
  }
  for (std::size_t i = 0; i < c.nodes.size(); ++i) {
    if (!seen[i]) {
      throw JsonPathError("/nodes/" + std::to_string(i), "node \"" + c.nodes[i].name + "\" is not reachable from the root \"" +
                                                               c.nodes[0].name + "\"");
    }
  }
  return order;
}

void check_config(const ExperimentConfig& c) {
  if (c.rounds < 0) throw JsonPathError("/rounds", "rounds must be non-negative");
  check_section("/model", [&] { c.model.validate(); });
  check_section("/trainer", [&] { resolved_probe(c.trainer).validate(); });
  check_section("/attention", [&] { c.attention.validate(); });
  check_section("/residual", [&] { c.residual.validate(); });
  check_section("/dp", [&] {
    DpConfig probe = c.dp;
    probe.enabled_nodes.clear();
    probe.validate();
  });
  const auto& d = c.data;
  if (d.divergence < 0 || d.divergence > 1) throw JsonPathError("/data/divergence", "must lie in [0, 1]");
  if (d.kind == "clustered" && (d.num_clusters == 0 || d.sources_per_cluster == 0)) {
    throw JsonPathError("/data", "num_clusters and sources_per_cluster must be positive");
  }
  const auto order = bfs_order(c);
  const std::size_t sources = d.kind == "iid" ? 1 : d.num_clusters * d.sources_per_cluster;
  for (std::size_t i = 0; i < c.nodes.size(); ++i) {
    const auto& n = c.nodes[i];
    const std::string at = "/nodes/" + std::to_string(i);
    if (n.trainer) check_section(at + "/trainer", [&] { resolved_probe(*n.trainer).validate(); });
    if (!n.residual_ceiling.empty() && node_pointer(c, n.residual_ceiling) == "/nodes") {
      throw JsonPathError(at + "/residual_ceiling", "unknown node \"" + n.residual_ceiling + "\"");
    }
    if (!n.children.empty()) continue;
    if (d.kind == "text") {
      if (n.text.empty()) throw JsonPathError(at, "leaf \"" + n.name + "\" needs a \"text\" path");
    } else {
      if (n.source < 0 || static_cast<std::size_t>(n.source) >= sources) {
        throw JsonPathError(at + "/source", "leaf \"" + n.name + "\" needs a source in [0, " +
                                                std::to_string(sources) + ")");
      }
      if (n.tokens == 0) throw JsonPathError(at + "/tokens", "leaf \"" + n.name + "\" needs a positive token budget");
    }
  }
  (void)order;
}

ConfigError located(const JsonPathError& e, std::string_view text, const std::string& origin) {
  const auto [line, col] = PositionIndex(text).locate(e.pointer());
  const std::string field = e.pointer().empty() ? std::string("(top level)") : e.pointer();
  return ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + field + ": " + e.detail(),
                     e.pointer(), line, col);
}

}  // namespace

ExperimentConfig parse_config(std::string_view text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const auto [line, col] = offset_to_line(text, e.byte > 0 ? e.byte - 1 : 0);
    std::string msg = e.what();
    if (const auto p = msg.find("syntax error"); p != std::string::npos) msg = msg.substr(p);
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + msg, "", line, col);
  }
  try {
    ExperimentConfig c = experiment_from_json(j);
    check_config(c);
    return c;
  } catch (const JsonPathError& e) {
    throw located(e, text, origin);
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string(), "", 0, 0);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string config_to_json(const ExperimentConfig& cfg) { return experiment_json(cfg).dump(2) + "\n"; }

void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override \"" + std::string(assignment) + "\": expected key=value", "", 0, 0);
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }

  json doc = experiment_json(cfg);
  json* cur = &doc;
  std::string pointer;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> segments;
  while (std::getline(parts, part, '.')) segments.push_back(part);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    const bool last = s + 1 == segments.size();
    if (cur->is_array()) {
      std::size_t idx = cur->size();
      for (std::size_t i = 0; i < cur->size(); ++i) {
        if ((*cur)[i].is_object() && (*cur)[i].value("name", "") == seg) idx = i;
      }
      if (idx == cur->size() && !seg.empty() && std::ranges::all_of(seg, [](char ch) { return std::isdigit(ch); })) {
        idx = std::stoul(seg);
      }
      if (idx >= cur->size()) {
        throw ConfigError("override \"" + key + "\": no element \"" + seg + "\" in " + (pointer.empty() ? "/" : pointer),
                          pointer, 0, 0);
      }
      pointer += "/" + std::to_string(idx);
      cur = &(*cur)[idx];
    } else if (cur->is_object()) {
      pointer += "/" + seg;
      if (last) {
        (*cur)[seg] = value;
        break;
      }
      if (!cur->contains(seg)) (*cur)[seg] = json::object();
      cur = &(*cur)[seg];
    } else {
      throw ConfigError("override \"" + key + "\": " + pointer + " is not an object", pointer, 0, 0);
    }
    if (last) *cur = value;
  }

  try {
    ExperimentConfig next = experiment_from_json(doc);
    check_config(next);
    cfg = std::move(next);
  } catch (const JsonPathError& e) {
    throw ConfigError("override \"" + std::string(assignment) + "\": " + e.pointer() + ": " + e.detail(), e.pointer(),
                      0, 0);
  }
}

// ---- presets ----

namespace {

ExperimentConfig fig2_base() {
  ExperimentConfig c;
  c.id = "fig2";
  c.seed = 1;
  c.rounds = 12;
  c.model = ModelConfig{};  // V=32, d=16, H=3, exp=4, |K|=1, n=4
  c.trainer.local_steps = 100;
  c.trainer.batch_size = 32;
  c.trainer.schedule.alpha = 0.05;
  c.trainer.schedule.peak_lr = 1e-2;
  c.trainer.schedule.total_steps = 0;
  c.residual.nu = 1;
  c.data.kind = "clustered";
  c.data.divergence = 0.8;
  auto inner = [](std::string name, std::vector<std::string> children) {
    NodeConfig n;
    n.name = std::move(name);
    n.children = std::move(children);
    return n;
  };
  auto leaf = [](std::string name, int source, std::size_t tokens) {
    NodeConfig n;
    n.name = std::move(name);
    n.source = source;
    n.tokens = tokens;
    return n;
  };
  c.nodes = {inner("root", {"internet", "medical"}),
             inner("internet", {"CC", "WK"}),
             inner("medical", {"PBC", "PBA"}),
             leaf("CC", 0, 8000),
             leaf("WK", 1, 2000),
             leaf("PBC", 2, 8000),
             leaf("PBA", 3, 2000)};
  return c;
}

}  // namespace

std::vector<std::string> preset_names() { return {"fig2", "fig2-swapped", "iid", "dp-cc-wk", "dp-pbc-pba"}; }

ExperimentConfig preset(std::string_view name) {
  ExperimentConfig c = fig2_base();
  if (name == "fig2") return c;
  if (name == "fig2-swapped") {
    c.id = "fig2-swapped";
    c.data.swap_small_leaves = true;
    return c;
  }
  if (name == "iid") {
    c.id = "iid";
    c.data.kind = "iid";
    for (auto& n : c.nodes) {
      if (n.children.empty()) {
        n.source = 0;
        n.tokens = 5000;
      }
    }
    return c;
  }
  if (name == "dp-cc-wk" || name == "dp-pbc-pba") {
    c.id = std::string(name);
    const bool internet = name == "dp-cc-wk";
    for (auto& n : c.nodes) {
      if (internet ? (n.name == "CC" || n.name == "WK") : (n.name == "PBC" || n.name == "PBA")) n.dp = true;
    }
    return c;
  }
  std::string known;
  for (const auto& p : preset_names()) known += (known.empty() ? "" : ", ") + p;
  throw std::invalid_argument("unknown preset \"" + std::string(name) + "\" (known: " + known + ")");
}

// ---- resolution ----

std::vector<std::string> node_names(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t i : bfs_order(cfg)) out.push_back(cfg.nodes[i].name);
  return out;
}

FederationTree build_tree(const ExperimentConfig& cfg) {
  const auto order = bfs_order(cfg);
  std::map<std::string, NodeId> id_of;
  for (std::size_t k = 0; k < order.size(); ++k) id_of.emplace(cfg.nodes[order[k]].name, static_cast<NodeId>(k));

  FederationTree tree;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& n = cfg.nodes[order[k]];
    NodeSpec spec;
    spec.id = static_cast<NodeId>(k);
    spec.name = n.name;
    for (const auto& child : n.children) spec.children.push_back(id_of.at(child));
    spec.trainer = n.trainer.value_or(cfg.trainer);
    spec.dp_enabled = n.dp;
    spec.residual_ceiling = n.residual_ceiling.empty() ? kRootId : id_of.at(n.residual_ceiling);
    spec.trains_locally = n.trains_locally;
    spec.dataset_ref = n.text.empty() ? (n.source >= 0 ? "source:" + std::to_string(n.source) : "") : n.text;
    tree.add(std::move(spec));
  }
  for (const auto& spec : tree.specs()) {
    for (NodeId c : spec.children) tree.node(c).parent = spec.id;
  }
  const auto violations = validate(tree);
  if (!violations.empty()) {
    const auto& v = violations.front();
    throw ConfigError(node_pointer(cfg, tree.node(v.node).name) + ": " + v.kind + ": " + v.message,
                      node_pointer(cfg, tree.node(v.node).name), 0, 0);
  }
  return tree;
}

ExperimentSetup build_setup(const ExperimentConfig& cfg, std::size_t workers) {
  check_config(cfg);
  ExperimentSetup s;
  s.experiment_id = cfg.id;
  s.seed = cfg.seed;
  s.rounds = cfg.rounds;
  s.model = cfg.model;
  s.tree = build_tree(cfg);
  s.attention = cfg.attention;
  s.residual = cfg.residual;
  s.server = cfg.server;
  s.dp = cfg.dp;
  s.dp.enabled_nodes.clear();
  s.workers = std::max<std::size_t>(1, workers);
  for (const auto& spec : s.tree.specs()) {
    if (spec.dp_enabled) s.dp.enabled_nodes.push_back(spec.id);
  }

  const auto& d = cfg.data;
  if (d.kind == "text") {
    VocabMap vocab(cfg.model.vocab_size);
    for (NodeId leaf : s.tree.leaves()) s.shards.emplace(leaf, load_text_shard(s.tree.node(leaf).dataset_ref, vocab));
    // Internal nodes hold the union of their descendant leaves' text.
    const auto lv = levels(s.tree);
    for (auto it = lv.rbegin(); it != lv.rend(); ++it) {
      for (NodeId id : *it) {
        if (s.tree.is_leaf(id)) continue;
        Shard merged;
        for (NodeId c : s.tree.children_of(id)) {
          const Shard& cs = s.shards.at(c);
          std::ranges::copy(cs.train.segments, std::back_inserter(merged.train.segments));
          std::ranges::copy(cs.val.segments, std::back_inserter(merged.val.segments));
          std::ranges::copy(cs.test.segments, std::back_inserter(merged.test.segments));
        }
        s.shards.emplace(id, std::move(merged));
      }
    }
  } else {
    const std::size_t clusters = d.kind == "iid" ? 1 : d.num_clusters;
    const std::size_t per = d.kind == "iid" ? 1 : d.sources_per_cluster;
    const auto sources = make_clustered_sources(clusters, per, d.divergence, cfg.model.vocab_size,
                                                derive_seed(cfg.seed, Stream::sources),
                                                {d.concentration, d.within_cluster});
    std::map<NodeId, MixtureSpec> assignment;
    HierarchyDataOptions opts;
    opts.eval_fraction = d.eval_fraction;
    opts.min_eval_tokens = d.min_eval_tokens;
    for (const auto& spec : s.tree.specs()) {
      const auto& n = cfg.nodes[static_cast<std::size_t>(std::ranges::find(cfg.nodes, spec.name, &NodeConfig::name) -
                                                         cfg.nodes.begin())];
      if (spec.children.empty()) {
        assignment[spec.id] = MixtureSpec{{{n.source, 1.0, n.tokens}}};
      } else if (n.tokens > 0) {
        opts.internal_budgets[spec.id] = n.tokens;
      }
    }
    if (d.swap_small_leaves) {
      assignment = swap_smallest_leaves(s.tree, std::move(assignment));
      for (const auto& [id, spec] : assignment) {
        s.tree.node(id).dataset_ref = "source:" + std::to_string(spec.components.front().source_id);
      }
    }
    s.shards = build_hierarchy_dataset(s.tree, sources, assignment, cfg.seed, opts);
  }

  // Resolve the shared schedule length in sequential steps.
  const int stages = stage_count(s);
  for (const auto& spec : s.tree.specs()) {
    auto& t = s.tree.node(spec.id).trainer;
    if (t.schedule.total_steps == 0) {
      t.schedule.total_steps = std::max<std::int64_t>(1, static_cast<std::int64_t>(cfg.rounds) * stages *
                                                             cfg.trainer.local_steps);
    }
    t.validate();
  }
  return s;
}

}  // namespace worldlm
