#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/evaluator.hpp"
#include "prunekit/model_store.hpp"

namespace prunekit {

struct FilterContribution {
  std::string layer_name;
  std::size_t filter_index = 0;
  double mean_abs_activation = 0.0;
  double normalized_importance = 0.0;  // min-max within the layer
};

/// Per-class mean activation of every filter, keyed by layer name.
struct ClassActivationProfile {
  std::uint32_t class_id = 0;
  std::size_t samples = 0;
  std::map<std::string, std::vector<double>> filter_means;
  std::map<std::string, std::vector<double>> normalized;
};

/// Min-max scaling into [0, 1]; a degenerate range maps every entry to 1.
std::vector<double> normalize_importance(std::span<const double> values);

/// Mean |post-activation output| per filter, normalized per layer. Filters
/// whose weights are all pruned count as dead and contribute 0.
std::vector<std::vector<FilterContribution>> compute_filter_contributions(const ModelSnapshot& model,
                                                                          Evaluator& evaluator,
                                                                          Split split = Split::test);

/// One profile per class present in the split, ascending class id.
std::vector<ClassActivationProfile> compute_class_profiles(const ModelSnapshot& model, Evaluator& evaluator,
                                                           Split split = Split::test);

struct PrunedFilter {
  std::string layer_name;
  std::size_t filter_index = 0;
};

struct RefinementResult {
  std::vector<PrunedFilter> filters;
  std::size_t additional_pruned = 0;  // weights newly masked (kept after a revert: 0)
  double top1_before = 0.0;
  double top1_after = 0.0;
  double sparsity_before = 0.0;
  double sparsity_after = 0.0;
  bool reverted = false;
};

struct RefineOptions {
  double tau = 0.05;
  double budget = 0.0;  // allowed additional top-1 drop, percentage points
  Split split = Split::test;
  /// The classifier's outputs are the classes themselves and stay intact.
  bool include_output_layer = false;
};

/// Masks every filter whose importance is below tau globally and in every
/// class profile, then evaluates. A drop beyond the budget restores the
/// exact previous masks and targets.
RefinementResult refine_pruning(ModelSnapshot& model, Evaluator& evaluator,
                                const std::vector<std::vector<FilterContribution>>& contributions,
                                const std::vector<ClassActivationProfile>& profiles, const RefineOptions& options);

nlohmann::json to_json(const std::vector<std::vector<FilterContribution>>& contributions);
nlohmann::json to_json(const std::vector<ClassActivationProfile>& profiles);
nlohmann::json to_json(const RefinementResult& result);

}  // namespace prunekit
