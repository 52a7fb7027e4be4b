#include "worldlm/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace worldlm {

void ScheduleConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("schedule alpha must lie in (0, 1)");
  if (!(peak_lr > 0.0)) throw std::invalid_argument("schedule peak_lr must be positive");
  if (total_steps <= 0) throw std::invalid_argument("schedule total_steps must be positive");
}

std::int64_t warmup_steps(const ScheduleConfig& sched) {
  return static_cast<std::int64_t>(std::ceil(sched.alpha * static_cast<double>(sched.total_steps)));
}

double lr_at(std::int64_t step, const ScheduleConfig& sched) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  const double floor_lr = sched.alpha * sched.peak_lr;
  const std::int64_t warmup = warmup_steps(sched);
  if (step >= sched.total_steps) return floor_lr;
  if (step < warmup) return sched.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const std::int64_t span = sched.total_steps - warmup;
  if (span <= 0) return floor_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return floor_lr + (sched.peak_lr - floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace worldlm
