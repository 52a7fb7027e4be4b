#pragma once

#include <cstdint>

namespace worldlm {

/// Warmup-cosine learning-rate schedule shared by every node. Steps are
/// counted in sequential steps, so all nodes of one stage see the same rate.
struct ScheduleConfig {
  double alpha = 1e-2;    // warmup fraction of T and final fraction of peak
  double peak_lr = 8e-4;  // eta_max
  std::int64_t total_steps = 3000;

  void validate() const;
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

/// Linear warmup 0 -> peak over ceil(alpha*T) steps, cosine decay to
/// alpha*peak at step T, flat afterwards.
double lr_at(std::int64_t step, const ScheduleConfig& sched);

std::int64_t warmup_steps(const ScheduleConfig& sched);

}  // namespace worldlm
