#pragma once

#include <cstddef>
#include <deque>
#include <string>

namespace prunekit {

struct SensitivityConfig {
  std::size_t window = 5;
  double gain = 1.0;
  double initial_step = 0.05;
  double step_min = 0.005;
  double step_max = 0.25;

  friend bool operator==(const SensitivityConfig&, const SensitivityConfig&) = default;
};

/// Windowed accuracy-drop history and adaptive step for one layer.
/// Drops are in percentage points.
class SensitivityState {
 public:
  SensitivityState() = default;
  SensitivityState(std::string layer_name, const SensitivityConfig& config);

  /// Pushes baseline_acc - pruned_acc, evicting the oldest entry when full.
  void record_impact(double baseline_acc, double pruned_acc);

  /// step += gain * step * (threshold - sensitivity), clamped to the bounds.
  double update_step(double threshold);

  const std::string& layer_name() const noexcept { return layer_name_; }
  /// Mean over the retained drops; 0 before the first push.
  double sensitivity() const noexcept { return sensitivity_; }
  double step() const noexcept { return step_; }
  const std::deque<double>& window() const noexcept { return window_; }
  const SensitivityConfig& config() const noexcept { return config_; }

  /// Restores persisted state; used by checkpoint loading.
  void restore(std::deque<double> window, double step);

  friend bool operator==(const SensitivityState&, const SensitivityState&) = default;

 private:
  void recompute();

  std::string layer_name_;
  SensitivityConfig config_;
  std::deque<double> window_;
  double sensitivity_ = 0.0;
  double step_ = 0.05;
};

}  // namespace prunekit
