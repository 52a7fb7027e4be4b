#include "worldlm/privacy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace worldlm {

void DpConfig::validate() const {
  if (!(sigma >= 0.0)) throw std::invalid_argument("dp sigma must be non-negative");
  if (!(initial_bound > 0.0)) throw std::invalid_argument("dp initial_bound must be positive");
}

bool DpConfig::enabled_for(NodeId id) const {
  return std::ranges::find(enabled_nodes, id) != enabled_nodes.end();
}

ClipResult clip(const ParamSet& delta, double bound) {
  if (!(bound > 0.0)) throw std::invalid_argument("clip: bound must be positive");
  ClipResult out{delta, l2_norm(delta)};
  if (out.pre_clip_norm > bound) out.delta = scale(bound / out.pre_clip_norm, delta);
  return out;
}

ParamSet add_noise(const ParamSet& delta, double std_dev, Rng& rng) {
  if (!(std_dev >= 0.0)) throw std::invalid_argument("add_noise: negative standard deviation");
  if (std_dev == 0.0) return delta;
  ParamSet out = delta;
  std::normal_distribution<double> noise(0.0, std_dev);
  for (auto& t : out) {
    for (auto& v : t.data) v = static_cast<float>(static_cast<double>(v) + noise(rng));
  }
  require_finite(out, "add_noise");
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::ranges::sort(values);
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double update_bound(ClipState& state) {
  if (!state.current_norms.empty()) {
    state.previous_norms = std::move(state.current_norms);
    state.current_norms.clear();
  }
  if (!state.previous_norms.empty()) {
    const double m = median(state.previous_norms);
    if (m > 0.0) state.bound = m;
  }
  return state.bound;
}

}  // namespace worldlm
