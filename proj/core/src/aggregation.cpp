#include "worldlm/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace worldlm {

void AttentionConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("attention temperature must be finite and positive");
  }
}

double similarity(std::span<const float> a, std::span<const float> b, Similarity kind) {
  return kind == Similarity::cosine ? cosine(a, b) : dot(a, b);
}

AttentionResult attend_layer(const Tensor& query, std::span<const AttentionCandidate> candidates,
                             const AttentionConfig& cfg) {
  if (candidates.empty()) throw std::invalid_argument("attend_layer: no candidates for '" + query.name + "'");
  for (const auto& c : candidates) {
    if (c.key->shape != query.shape || c.value->shape != query.shape) {
      throw ShapeError("attend_layer: candidate from node " + std::to_string(c.origin) + " has shape " +
                       shape_to_string(c.key->shape) + ", query '" + query.name + "' has " +
                       shape_to_string(query.shape));
    }
  }
  cfg.validate();

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) {
    const auto& ca = candidates[a];
    const auto& cb = candidates[b];
    return ca.origin != cb.origin ? ca.origin < cb.origin : ca.round < cb.round;
  });

  const std::size_t m = candidates.size();
  std::vector<double> sorted_weights(m, 1.0 / static_cast<double>(m));
  if (cfg.enabled) {
    std::vector<double> scores(m);
    for (std::size_t s = 0; s < m; ++s) {
      scores[s] = similarity(query.data, candidates[order[s]].key->data, cfg.similarity) / cfg.temperature;
    }
    const double mx = *std::ranges::max_element(scores);
    double z = 0.0;
    for (std::size_t s = 0; s < m; ++s) {
      sorted_weights[s] = std::exp(scores[s] - mx);
      z += sorted_weights[s];
    }
    for (auto& w : sorted_weights) w /= z;
  }

  AttentionResult result;
  result.output = Tensor(query.name, query.shape);
  std::vector<double> acc(query.numel(), 0.0);
  for (std::size_t s = 0; s < m; ++s) {
    const auto& v = candidates[order[s]].value->data;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += sorted_weights[s] * static_cast<double>(v[i]);
  }
  std::ranges::transform(acc, result.output.data.begin(), [](double x) { return static_cast<float>(x); });
  require_finite(result.output, "attend_layer");

  result.weights.assign(m, 0.0);
  for (std::size_t s = 0; s < m; ++s) result.weights[order[s]] = sorted_weights[s];
  return result;
}

KeyAggregation aggregate_child_keys(NodeId self, const ParamSet& own_keys, std::span<const NodeKeys> children,
                                    const AttentionConfig& cfg, int round) {
  std::vector<const NodeKeys*> sorted;
  for (const auto& c : children) {
    require_congruent(own_keys, c.keys, "aggregate_child_keys");
    sorted.push_back(&c);
  }
  std::ranges::sort(sorted, {}, [](const NodeKeys* c) { return c->id; });

  KeyAggregation out{ParamSet(ParamRole::keys), {}};
  for (std::size_t li = 0; li < own_keys.size(); ++li) {
    const Tensor& own = own_keys[li];
    std::vector<AttentionCandidate> cands;
    if (cfg.include_self) cands.push_back({&own, &own, self, round});
    for (const auto* c : sorted) cands.push_back({&c->keys[li], &c->keys[li], c->id, round});
    if (cands.empty()) {
      out.keys.add(own);
      continue;
    }
    auto res = attend_layer(own, cands, cfg);
    for (std::size_t j = 0; j < cands.size(); ++j) {
      out.log.push_back({self, round, "child_aggregation", own.name, cands[j].origin, res.weights[j]});
    }
    out.keys.add(std::move(res.output));
  }
  return out;
}

KeyAggregation merge_with_parent(NodeId self, const ParamSet& own_keys, NodeId parent,
                                 const ParamSet& parent_keys, std::span<const ResidualPacket> packets,
                                 const AttentionConfig& cfg, int round) {
  require_congruent(own_keys, parent_keys, "merge_with_parent");
  for (const auto& p : packets) {
    const Tensor* layer = own_keys.find(p.layer);
    if (layer == nullptr) {
      throw std::invalid_argument("merge_with_parent: residual packet from node " + std::to_string(p.origin) +
                                  " names unknown layer '" + p.layer + "'");
    }
    if (layer->shape != p.tensor.shape) throw ShapeError("merge_with_parent: packet shape mismatch on " + p.layer);
  }
  std::vector<const ResidualPacket*> sorted;
  for (const auto& p : packets) sorted.push_back(&p);
  std::ranges::stable_sort(sorted, [](const ResidualPacket* a, const ResidualPacket* b) {
    return a->origin != b->origin ? a->origin < b->origin : a->created_round < b->created_round;
  });

  KeyAggregation out{ParamSet(ParamRole::keys), {}};
  for (std::size_t li = 0; li < own_keys.size(); ++li) {
    const Tensor& own = own_keys[li];
    std::vector<AttentionCandidate> cands{{&own, &own, self, round},
                                          {&parent_keys[li], &parent_keys[li], parent, round}};
    for (const auto* p : sorted) {
      if (p->layer == own.name) cands.push_back({&p->tensor, &p->tensor, p->origin, p->created_round});
    }
    auto res = attend_layer(own, cands, cfg);
    for (std::size_t j = 0; j < cands.size(); ++j) {
      out.log.push_back({self, round, "parent_merge", own.name, cands[j].origin, res.weights[j]});
    }
    out.keys.add(std::move(res.output));
  }
  return out;
}

ParamSet average_pseudograds(std::span<const ParamSet> deltas) {
  if (deltas.empty()) throw std::invalid_argument("average_pseudograds: no deltas");
  for (const auto& d : deltas) require_congruent(deltas.front(), d, "average_pseudograds");
  ParamSet out = deltas.front().zeros_like(ParamRole::pseudo_gradient);
  const double n = static_cast<double>(deltas.size());
  for (std::size_t ti = 0; ti < out.size(); ++ti) {
    auto& dst = out[ti].data;
    std::vector<double> acc(dst.size(), 0.0);
    for (const auto& d : deltas) {
      const auto& src = d[ti].data;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(src[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i] / n);
  }
  require_finite(out, "average_pseudograds");
  return out;
}

ServerOptState make_server_state(const ParamSet& backbone, double lr, double momentum_coeff) {
  return {backbone.zeros_like(ParamRole::pseudo_gradient), lr, momentum_coeff};
}

ParamSet server_opt(const ParamSet& backbone, const ParamSet& delta_mean, ServerOptState& state) {
  require_congruent(backbone, delta_mean, "server_opt");
  require_congruent(backbone, state.momentum, "server_opt momentum");
  ParamSet out = backbone;
  for (std::size_t ti = 0; ti < out.size(); ++ti) {
    auto& m = state.momentum[ti].data;
    const auto& d = delta_mean[ti].data;
    auto& b = out[ti].data;
    for (std::size_t i = 0; i < b.size(); ++i) {
      m[i] = static_cast<float>(state.momentum_coeff * static_cast<double>(m[i]) + static_cast<double>(d[i]));
      b[i] = static_cast<float>(static_cast<double>(b[i]) + state.lr * static_cast<double>(m[i]));
    }
  }
  require_finite(out, "server_opt");
  return out;
}

}  // namespace worldlm
