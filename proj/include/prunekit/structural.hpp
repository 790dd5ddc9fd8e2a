#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/evaluator.hpp"
#include "prunekit/model_store.hpp"
#include "prunekit/retrain.hpp"

namespace prunekit {

struct StructuralConfig {
  double fraction_per_iter = 0.1;
  double drop_budget = 1.0;  // percentage points
  std::size_t retrain_epochs = 1;
  std::size_t max_iterations = 100;
  Split eval_split = Split::test;
};

struct LayerChannels {
  std::string layer;
  std::size_t total = 0;
  std::size_t remaining = 0;
};

struct StructuralResult {
  double baseline_top1 = 0.0;
  double final_top1 = 0.0;
  std::size_t accepted_iterations = 0;
  std::vector<RetrainLogRow> rows;
  std::vector<LayerChannels> channels;
  /// Removed conv channels over all conv channels.
  double channel_reduction = 0.0;
  /// Masked weights over all weights.
  double parameter_reduction = 0.0;
};

/// Conv channels that are still live, per conv layer.
std::vector<LayerChannels> channel_summary(const ModelSnapshot& model);

/// Number of channels one iteration removes from a layer with `remaining`
/// live channels: round(fraction * remaining), at least one, and never the
/// last one. Zero when remaining <= 1.
std::size_t channels_to_remove(std::size_t remaining, double fraction);

/// Iterative channel removal with retraining. Each iteration removes the
/// lowest-scoring channels of every eligible conv layer, retrains, and
/// keeps the result while the drop stays within budget; the first
/// over-budget iteration is reverted and ends the run.
StructuralResult run_structural(ModelSnapshot& model, Evaluator& trainer, const StructuralConfig& config,
                                const RetrainPolicy& policy, const RunControl& control = {});

nlohmann::json to_json(const StructuralResult& result);

}  // namespace prunekit
