#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "prunekit/rng.hpp"

namespace prunekit {

enum class PolicyMode { constant, dynamic, prioritized };

const char* to_string(PolicyMode mode) noexcept;
PolicyMode parse_policy_mode(const std::string& text);

/// Categorical layer-selection distribution.
struct LayerPolicy {
  std::vector<double> probabilities;
  PolicyMode mode = PolicyMode::dynamic;
  std::vector<std::size_t> priority;  // layer indices
  double priority_drop = 0.0;
  bool priority_phase_done = false;
  bool initialized = false;
};

/// w_i = size_i * max(0, threshold - sensitivity_i), normalized. Layers whose
/// sparsity is already 1 get no mass. When every weight is zero the result
/// is uniform over layers with sparsity < 1 (or over all layers if none).
std::vector<double> compute_probabilities(const std::vector<std::size_t>& sizes,
                                          const std::vector<double>& sensitivities,
                                          double threshold,
                                          const std::vector<double>& sparsities = {});

/// Draws `count` distinct layer indices without replacement.
std::vector<std::size_t> sample_layers(const std::vector<double>& probabilities, Rng& rng,
                                       std::size_t count);

/// Refreshes the distribution per the policy mode. `drop_so_far` is the
/// current accuracy drop from baseline in percentage points.
void update_policy(LayerPolicy& policy, const std::vector<std::size_t>& sizes,
                   const std::vector<double>& sensitivities, double threshold,
                   const std::vector<double>& sparsities, double drop_so_far);

/// Resolves a priority list given as names, or as "largest:N".
std::vector<std::size_t> resolve_priority(const std::vector<std::string>& spec,
                                          const std::vector<std::string>& layer_names,
                                          const std::vector<std::size_t>& sizes);

}  // namespace prunekit
