#pragma once

#include <vector>

#include "worldlm/rng.hpp"
#include "worldlm/tensor.hpp"
#include "worldlm/topology.hpp"

namespace worldlm {

struct DpConfig {
  double sigma = 0.5;
  double initial_bound = 1.0;
  /// false: noise std = sigma * bound (DPFedAvg convention); true: std = sigma.
  bool absolute_noise = false;
  std::vector<NodeId> enabled_nodes;

  void validate() const;
  bool enabled_for(NodeId id) const;
  double noise_std(double bound) const { return sigma == 0.0 || absolute_noise ? sigma : sigma * bound; }
  friend bool operator==(const DpConfig&, const DpConfig&) = default;
};

/// Clipping state of one DP sub-federation (owned by the parent of the DP
/// clients).
struct ClipState {
  double bound = 1.0;
  std::vector<double> previous_norms;  // pre-clip norms of the last completed round
  std::vector<double> current_norms;   // collected during the round in progress
};

struct ClipResult {
  ParamSet delta;
  double pre_clip_norm = 0.0;
};

/// Scales delta by min(1, bound / ||delta||) over the whole set.
ClipResult clip(const ParamSet& delta, double bound);

/// Adds i.i.d. N(0, std^2) to every coordinate; std == 0 returns the input.
ParamSet add_noise(const ParamSet& delta, double std_dev, Rng& rng);

double median(std::vector<double> values);

/// Start of a round: previous <- current, bound <- median(previous) when
/// any norms were recorded, otherwise unchanged. Returns the new bound.
double update_bound(ClipState& state);

}  // namespace worldlm
