#include "worldlm/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <set>
#include <thread>

namespace worldlm {

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t threads = std::min(n, std::max<std::size_t>(1, workers));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

namespace {

bool node_trains(const ExperimentSetup& s, NodeId id) {
  return s.tree.node(id).trains_locally && s.shards.contains(id);
}

// Stage index per level; levels without a training node share the stage of
// the previous training level.
std::vector<int> level_stages(const ExperimentSetup& s, const std::vector<std::vector<NodeId>>& lv, int* count) {
  std::vector<int> stages(lv.size(), 0);
  int next = 0;
  for (std::size_t t = 0; t < lv.size(); ++t) {
    const bool any = std::ranges::any_of(lv[t], [&](NodeId id) { return node_trains(s, id); });
    stages[t] = std::max(0, any ? next : next - 1);
    if (any) ++next;
  }
  *count = std::max(1, next);
  return stages;
}

std::int64_t step_offset(int round, int stages, int stage, int local_steps) {
  return (static_cast<std::int64_t>(round) * stages + stage) * local_steps;
}

void append_eval(const ExperimentSetup& s, const std::string& method, NodeId id, int round, int stage,
                 const ParamSet& model, std::vector<MetricRow>& out) {
  const Shard& shard = s.shards.at(id);
  for (const auto* split : {"val", "test"}) {
    const TokenSplit& data = std::string(split) == "val" ? shard.val : shard.test;
    if (data.window_count(s.model.context_len) == 0) continue;
    const auto r = evaluate(s.model, model, data);
    out.push_back({s.experiment_id, method, id, round, stage, split, r.loss, r.perplexity});
  }
}

std::vector<NodeId> data_nodes(const ExperimentSetup& s) {
  std::vector<NodeId> out;
  for (const auto& [id, shard] : s.shards) {
    if (s.tree.contains(id)) out.push_back(id);
  }
  return out;
}

}  // namespace

int stage_count(const ExperimentSetup& setup) {
  int count = 1;
  level_stages(setup, levels(setup.tree), &count);
  return count;
}

Engine::Engine(ExperimentSetup setup) : setup_(std::move(setup)) {
  require_valid(setup_.tree);
  setup_.model.validate();
  setup_.attention.validate();
  setup_.residual.validate();
  setup_.dp.validate();
  if (setup_.rounds < 0) throw std::invalid_argument("rounds must be non-negative");
  partition_ = make_partition(setup_.model);
  levels_ = levels(setup_.tree);
  stage_of_level_ = level_stages(setup_, levels_, &stage_count_);

  const ParamSet init = init_model(setup_.model, derive_seed(setup_.seed, Stream::init));
  for (NodeId id : setup_.tree.ids()) {
    setup_.tree.node(id).trainer.validate();
    NodeState st;
    st.backbone = backbone_of(init, partition_);
    st.keys = keys_of(init, partition_);
    st.round_backbone = st.backbone;
    st.round_keys = st.keys;
    if (!setup_.tree.is_leaf(id)) {
      st.server = make_server_state(st.backbone, setup_.server.lr, setup_.server.momentum);
    }
    st.clip.bound = setup_.dp.initial_bound;
    states_.emplace(id, std::move(st));
  }
}

bool Engine::trains(NodeId id) const { return node_trains(setup_, id); }

void Engine::notify(EngineEvent::Kind kind, NodeId id, int round) {
  if (!observer_) return;
  const auto& st = states_.at(id);
  observer_(EngineEvent{kind, id, round, st.backbone, st.keys});
}

void Engine::enter_node(NodeId id, int round, int stage, RunResult& log) {
  NodeState& st = states_.at(id);
  const NodeSpec& spec = setup_.tree.node(id);

  if (spec.parent) {
    const NodeState& parent = states_.at(*spec.parent);
    st.backbone = parent.round_backbone;
    auto merged = merge_with_parent(id, st.keys, *spec.parent, parent.round_keys, st.inbox, setup_.attention, round);
    st.keys = std::move(merged.keys);
    log.attention.insert(log.attention.end(), merged.log.begin(), merged.log.end());
    for (auto& p : st.inbox) {
      log.residuals.push_back({round, p.origin, p.layer, p.created_round, std::move(p.path), id, "aggregated"});
    }
    st.inbox.clear();
  }
  notify(EngineEvent::Kind::entered, id, round);

  if (!spec.children.empty()) {
    auto routed = route_residuals(id, std::move(st.routing), st.cache, setup_.tree, setup_.residual, round);
    st.routing = std::move(routed.held);
    // Children sit on the next level, so no other task of this level touches them.
    for (auto& [child, packets] : routed.aggregate) {
      auto& inbox = states_.at(child).inbox;
      std::ranges::move(packets, std::back_inserter(inbox));
    }
    for (auto& [child, packets] : routed.forward) {
      auto& queue = states_.at(child).routing;
      std::ranges::move(packets, std::back_inserter(queue));
    }
    for (auto& d : routed.dropped) {
      log.residuals.push_back(
          {round, d.packet.origin, d.packet.layer, d.packet.created_round, std::move(d.packet.path), -1, d.reason});
    }
  }

  if (trains(id)) {
    const auto& trainer = spec.trainer;
    auto result = local_train(setup_.model, join_model(setup_.model, st.backbone, st.keys), setup_.shards.at(id).train,
                              trainer, derive_seed(setup_.seed, Stream::train, {std::uint64_t(id), std::uint64_t(round)}),
                              step_offset(round, stage_count_, stage, trainer.local_steps));
    st.backbone = backbone_of(result.params, partition_);
    st.keys = keys_of(result.params, partition_);
    notify(EngineEvent::Kind::trained, id, round);
  }
  st.round_backbone = st.backbone;
  st.round_keys = st.keys;
}

void Engine::aggregate_node(NodeId id, int round, RunResult& log) {
  NodeState& st = states_.at(id);
  const auto children = setup_.tree.children_of(id);
  if (children.empty()) return;

  const bool any_dp = std::ranges::any_of(children, [&](NodeId c) { return setup_.dp.enabled_for(c); });
  if (any_dp) update_bound(st.clip);

  std::vector<ParamSet> deltas;
  std::vector<NodeKeys> child_keys;
  for (NodeId c : children) {
    const NodeState& cs = states_.at(c);
    ParamSet delta = axpy(-1.0, st.round_backbone, cs.backbone);
    delta.set_role(ParamRole::pseudo_gradient);
    if (setup_.dp.enabled_for(c)) {
      auto clipped = clip(delta, st.clip.bound);
      st.clip.current_norms.push_back(clipped.pre_clip_norm);
      const double std_dev = setup_.dp.noise_std(st.clip.bound);
      Rng rng = make_rng(setup_.seed, Stream::dp_noise, {std::uint64_t(c), std::uint64_t(round)});
      delta = add_noise(clipped.delta, std_dev, rng);
      log.dp.push_back({round, c, clipped.pre_clip_norm, st.clip.bound, std_dev});
    }
    deltas.push_back(std::move(delta));
    child_keys.push_back({c, cs.keys});
  }

  const ParamSet mean = average_pseudograds(deltas);
  st.backbone = server_opt(st.round_backbone, mean, *st.server);

  auto agg = aggregate_child_keys(id, st.round_keys, child_keys, setup_.attention, round);
  st.keys = std::move(agg.keys);
  log.attention.insert(log.attention.end(), agg.log.begin(), agg.log.end());

  std::vector<ResidualPacket> incoming;
  for (NodeId c : children) {
    auto& up = states_.at(c).upstream;
    std::ranges::move(up, std::back_inserter(incoming));
    up.clear();
  }
  auto fresh = partition_residuals(id, st.keys, child_keys, setup_.tree, setup_.residual, round);
  std::ranges::move(fresh, std::back_inserter(incoming));
  for (auto& p : incoming) {
    if (p.ceiling == id || !setup_.tree.node(id).parent) {
      st.routing.push_back(std::move(p));
    } else {
      st.upstream.push_back(std::move(p));
    }
  }

  st.cache.keys.clear();
  for (auto& ck : child_keys) st.cache.keys.emplace(ck.id, std::move(ck.keys));
  st.cache.stamp = round;
  notify(EngineEvent::Kind::aggregated, id, round);
}

void Engine::evaluate_all(int round, int stage, RunResult& out) {
  const auto nodes = data_nodes(setup_);
  std::vector<std::vector<MetricRow>> rows(nodes.size());
  parallel_for(nodes.size(), setup_.workers, [&](std::size_t i) {
    const auto& st = states_.at(nodes[i]);
    append_eval(setup_, "worldlm", nodes[i], round, stage, join_model(setup_.model, st.backbone, st.keys), rows[i]);
  });
  for (auto& r : rows) std::ranges::move(r, std::back_inserter(out.metrics));
}

void Engine::run_round(int round, RunResult& out) {
  using clock = std::chrono::steady_clock;
  auto started = clock::now();
  auto finish_stage = [&](int stage) {
    const auto now = clock::now();
    out.timing.push_back({round, stage, std::chrono::duration<double>(now - started).count()});
    started = now;
  };

  for (std::size_t t = 0; t < levels_.size(); ++t) {
    const auto& level = levels_[t];
    const int stage = stage_of_level_[t];
    std::vector<RunResult> logs(level.size());
    parallel_for(level.size(), setup_.workers, [&](std::size_t i) { enter_node(level[i], round, stage, logs[i]); });
    for (auto& l : logs) {
      std::ranges::move(l.attention, std::back_inserter(out.attention));
      std::ranges::move(l.residuals, std::back_inserter(out.residuals));
    }
    const bool last_training_level = std::ranges::none_of(
        levels_.begin() + static_cast<std::ptrdiff_t>(t) + 1, levels_.end(),
        [&](const auto& lv) { return std::ranges::any_of(lv, [&](NodeId id) { return trains(id); }); });
    const bool trained_here = std::ranges::any_of(level, [&](NodeId id) { return trains(id); });
    if (trained_here && !last_training_level) {
      evaluate_all(round, stage, out);
      finish_stage(stage);
    }
  }

  for (std::size_t t = levels_.size(); t-- > 0;) {
    const auto& level = levels_[t];
    std::vector<RunResult> logs(level.size());
    parallel_for(level.size(), setup_.workers, [&](std::size_t i) { aggregate_node(level[i], round, logs[i]); });
    for (auto& l : logs) {
      std::ranges::move(l.attention, std::back_inserter(out.attention));
      std::ranges::move(l.dp, std::back_inserter(out.dp));
    }
  }
  // Norms recorded this round become the basis of the next round's bound.
  evaluate_all(round, stage_count_ - 1, out);
  finish_stage(stage_count_ - 1);
}

RunResult Engine::run() {
  RunResult out;
  for (int k = 0; k < setup_.rounds; ++k) run_round(k, out);
  for (const auto& [id, st] : states_) out.final_models.emplace(id, join_model(setup_.model, st.backbone, st.keys));
  return out;
}

// ---- baselines ----

namespace {

void check_baseline(const ExperimentSetup& s, int rounds) {
  require_valid(s.tree);
  s.model.validate();
  if (rounds < 0) throw std::invalid_argument("rounds must be non-negative");
}

TrainerConfig leaf_trainer(const ExperimentSetup& s) {
  const auto leaves = s.tree.leaves();
  if (leaves.empty()) throw std::invalid_argument("baseline: tree has no leaves");
  return s.tree.node(leaves.front()).trainer;
}

void evaluate_nodes(const ExperimentSetup& s, const std::string& method, const std::vector<NodeId>& nodes,
                    int round, const std::function<const ParamSet&(NodeId)>& model_of, RunResult& out) {
  std::vector<std::vector<MetricRow>> rows(nodes.size());
  parallel_for(nodes.size(), s.workers,
               [&](std::size_t i) { append_eval(s, method, nodes[i], round, 0, model_of(nodes[i]), rows[i]); });
  for (auto& r : rows) std::ranges::move(r, std::back_inserter(out.metrics));
}

constexpr std::uint64_t kPooledNode = 1u << 20;

}  // namespace

RunResult run_flat_fl(const ExperimentSetup& setup, int rounds) {
  check_baseline(setup, rounds);
  std::vector<NodeId> clients;
  for (NodeId leaf : setup.tree.leaves()) {
    if (setup.shards.contains(leaf)) clients.push_back(leaf);
  }
  if (clients.empty()) throw std::invalid_argument("flat FL: no leaf holds data");
  const auto eval_nodes = data_nodes(setup);

  ParamSet global = init_model(setup.model, derive_seed(setup.seed, Stream::init));
  auto server = make_server_state(global, setup.server.lr, setup.server.momentum);
  ClipState clip_state;
  clip_state.bound = setup.dp.initial_bound;
  RunResult out;

  for (int r = 0; r < rounds; ++r) {
    std::vector<ParamSet> locals(clients.size());
    parallel_for(clients.size(), setup.workers, [&](std::size_t i) {
      const NodeId c = clients[i];
      const auto& trainer = setup.tree.node(c).trainer;
      locals[i] = local_train(setup.model, global, setup.shards.at(c).train, trainer,
                              derive_seed(setup.seed, Stream::train, {std::uint64_t(c), std::uint64_t(r)}),
                              static_cast<std::int64_t>(r) * trainer.local_steps)
                      .params;
    });
    const bool any_dp = std::ranges::any_of(clients, [&](NodeId c) { return setup.dp.enabled_for(c); });
    if (any_dp) update_bound(clip_state);
    std::vector<ParamSet> deltas;
    for (std::size_t i = 0; i < clients.size(); ++i) {
      ParamSet delta = axpy(-1.0, global, locals[i]);
      delta.set_role(ParamRole::pseudo_gradient);
      if (setup.dp.enabled_for(clients[i])) {
        auto clipped = clip(delta, clip_state.bound);
        clip_state.current_norms.push_back(clipped.pre_clip_norm);
        const double std_dev = setup.dp.noise_std(clip_state.bound);
        Rng rng = make_rng(setup.seed, Stream::dp_noise, {std::uint64_t(clients[i]), std::uint64_t(r)});
        delta = add_noise(clipped.delta, std_dev, rng);
        out.dp.push_back({r, clients[i], clipped.pre_clip_norm, clip_state.bound, std_dev});
      }
      deltas.push_back(std::move(delta));
    }
    global = server_opt(global, average_pseudograds(deltas), server);
    global.set_role(ParamRole::model);
    evaluate_nodes(setup, "flat_fl", eval_nodes, r, [&](NodeId) -> const ParamSet& { return global; }, out);
  }
  out.final_models.emplace(kRootId, std::move(global));
  return out;
}

RunResult run_local(const ExperimentSetup& setup, int rounds) {
  check_baseline(setup, rounds);
  std::vector<NodeId> nodes;
  for (NodeId leaf : setup.tree.leaves()) {
    if (setup.shards.contains(leaf)) nodes.push_back(leaf);
  }
  const ParamSet init = init_model(setup.model, derive_seed(setup.seed, Stream::init));
  std::map<NodeId, ParamSet> models;
  for (NodeId id : nodes) models.emplace(id, init);
  RunResult out;
  for (int r = 0; r < rounds; ++r) {
    parallel_for(nodes.size(), setup.workers, [&](std::size_t i) {
      const NodeId id = nodes[i];
      const auto& trainer = setup.tree.node(id).trainer;
      auto& m = models.at(id);
      m = local_train(setup.model, std::move(m), setup.shards.at(id).train, trainer,
                      derive_seed(setup.seed, Stream::train, {std::uint64_t(id), std::uint64_t(r)}),
                      static_cast<std::int64_t>(r) * trainer.local_steps)
              .params;
    });
    evaluate_nodes(setup, "local", nodes, r, [&](NodeId id) -> const ParamSet& { return models.at(id); }, out);
  }
  out.final_models = std::move(models);
  return out;
}

RunResult run_centralized(const ExperimentSetup& setup, int rounds) {
  check_baseline(setup, rounds);
  const auto nodes = data_nodes(setup);
  TokenSplit pooled;
  for (NodeId id : nodes) {
    for (const auto& seg : setup.shards.at(id).train.segments) pooled.segments.push_back(seg);
  }
  const TrainerConfig trainer = leaf_trainer(setup);
  ParamSet model = init_model(setup.model, derive_seed(setup.seed, Stream::init));
  RunResult out;
  for (int r = 0; r < rounds; ++r) {
    model = local_train(setup.model, std::move(model), pooled, trainer,
                        derive_seed(setup.seed, Stream::train, {kPooledNode, std::uint64_t(r)}),
                        static_cast<std::int64_t>(r) * trainer.local_steps)
                .params;
    evaluate_nodes(setup, "centralized", nodes, r, [&](NodeId) -> const ParamSet& { return model; }, out);
  }
  out.final_models.emplace(kRootId, std::move(model));
  return out;
}

std::vector<std::string> method_names() { return {"worldlm", "flat_fl", "local", "centralized"}; }

RunResult run_method(const ExperimentSetup& setup, std::string_view method) {
  const int rounds = setup.rounds * stage_count(setup);
  if (method == "worldlm") return Engine(setup).run();
  if (method == "flat_fl") return run_flat_fl(setup, rounds);
  if (method == "local") return run_local(setup, rounds);
  if (method == "centralized") return run_centralized(setup, rounds);
  throw std::invalid_argument("unknown method \"" + std::string(method) + "\"");
}

// ---- summaries ----

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size()));
  return s;
}

std::vector<MetricRow> final_rows(const std::vector<MetricRow>& rows, const std::string& split,
                                  const std::vector<NodeId>& nodes) {
  std::pair<int, int> last{-1, -1};
  for (const auto& r : rows) {
    if (r.split == split) last = std::max(last, std::pair{r.round, r.stage});
  }
  std::vector<MetricRow> out;
  for (const auto& r : rows) {
    if (r.split != split || std::pair{r.round, r.stage} != last) continue;
    if (!nodes.empty() && std::ranges::find(nodes, r.node) == nodes.end()) continue;
    out.push_back(r);
  }
  return out;
}

Summary final_summary(const std::vector<MetricRow>& rows, const std::string& split, const std::vector<NodeId>& nodes) {
  std::vector<double> values;
  for (const auto& r : final_rows(rows, split, nodes)) values.push_back(r.perplexity);
  return summarize(values);
}

std::vector<double> round_series(const std::vector<MetricRow>& rows, NodeId node, const std::string& split) {
  std::map<int, std::pair<int, double>> by_round;
  for (const auto& r : rows) {
    if (r.node != node || r.split != split) continue;
    auto [it, inserted] = by_round.try_emplace(r.round, r.stage, r.perplexity);
    if (!inserted && r.stage >= it->second.first) it->second = {r.stage, r.perplexity};
  }
  std::vector<double> out;
  for (const auto& [round, v] : by_round) out.push_back(v.second);
  return out;
}

}  // namespace worldlm
