#include "prunekit/sensitivity.hpp"

#include <algorithm>
#include <cmath>

#include "prunekit/errors.hpp"

namespace prunekit {

SensitivityState::SensitivityState(std::string layer_name, const SensitivityConfig& config)
    : layer_name_(std::move(layer_name)), config_(config), step_(config.initial_step) {
  if (config_.window == 0) throw ContractError("sensitivity window must be >= 1");
  if (!(config_.step_min > 0.0) || config_.step_min > config_.step_max)
    throw ContractError("step bounds must satisfy 0 < step_min <= step_max");
  step_ = std::clamp(step_, config_.step_min, config_.step_max);
}

void SensitivityState::record_impact(double baseline_acc, double pruned_acc) {
  if (!std::isfinite(baseline_acc) || !std::isfinite(pruned_acc))
    throw ContractError("record_impact: accuracies must be finite");
  window_.push_back(baseline_acc - pruned_acc);
  while (window_.size() > config_.window) window_.pop_front();
  recompute();
}

double SensitivityState::update_step(double threshold) {
  if (!(threshold > 0.0)) throw ContractError("update_step: threshold must be > 0");
  const double raw = step_ + config_.gain * step_ * (threshold - sensitivity_);
  step_ = std::clamp(raw, config_.step_min, config_.step_max);
  return step_;
}

void SensitivityState::restore(std::deque<double> window, double step) {
  if (window.size() > config_.window) throw ContractError("restored window exceeds its size");
  window_ = std::move(window);
  step_ = step;
  recompute();
}

void SensitivityState::recompute() {
  double sum = 0.0;
  for (double d : window_) sum += d;
  sensitivity_ = window_.empty() ? 0.0 : sum / static_cast<double>(window_.size());
}

}  // namespace prunekit
