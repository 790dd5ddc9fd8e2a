#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/model_store.hpp"

namespace prunekit {

struct ChannelScore {
  std::string layer_name;
  std::size_t channel_index = 0;
  double l1 = 0.0;
  double variance = 0.0;
  double combined = 0.0;  // minmax(l1) + minmax(variance), in [0, 2]
};

/// Mean |gradient| per weight over the most recent training interval.
struct GradientStats {
  std::string layer_name;
  std::vector<double> per_weight_importance;
};

/// Raises the layer's target by `step` (clamped to 1) and rebuilds its mask by
/// magnitude rank. Returns the new target sparsity.
double prune_layer_by_step(ModelSnapshot& model, const std::string& layer_name, double step);

/// Lowers the layer's target by `step` (clamped to 0) and rebuilds its mask.
double reverse_prune_by_step(ModelSnapshot& model, const std::string& layer_name, double step);

/// Ranks weights by alpha * minmax(|w|) + (1 - alpha) * minmax(importance)
/// and prunes the lowest round(target * n). Ties fall back to |w|, then index,
/// so uniform importances reproduce the magnitude mask for every alpha.
PruneMask gradient_informed_mask(const LayerTensor& layer, double target_sparsity,
                                 const GradientStats& grads, double alpha);

/// Scores each output filter of a conv layer by the L1 norm of its effective
/// weights and the variance of its per-input-channel kernel L1 energies.
std::vector<ChannelScore> score_channels(const LayerTensor& layer, const PruneMask& mask);
std::vector<ChannelScore> score_channels(const LayerTensor& layer);

/// A weight slice consuming a given output channel of an upstream layer.
struct DownstreamLink {
  std::size_t layer_index = 0;
  /// Flat input positions per upstream channel: consumer input index range
  /// [channel * span, (channel + 1) * span).
  std::size_t span = 1;
};

/// Next conv/dense layer fed by `layer_name` along the arch graph, if any.
std::optional<DownstreamLink> downstream_of(const ModelSnapshot& model, const std::string& layer_name);

/// Masks every weight of output channel `channel` plus the downstream input slice.
void mask_channel(ModelSnapshot& model, std::size_t layer_index, std::size_t channel);

/// Output channels of the layer whose weights are all pruned.
std::vector<std::size_t> removed_channels(const ModelSnapshot& model, std::size_t layer_index);

/// Masks the round(fraction * out_channels) (at least one) lowest-scoring
/// channels. Refuses to leave the layer without a live channel.
std::vector<std::size_t> remove_channels(ModelSnapshot& model, const std::string& layer_name,
                                         double fraction);

/// Masks the `count` lowest-scoring channels among those still live.
std::vector<std::size_t> remove_lowest_channels(ModelSnapshot& model, std::size_t layer_index,
                                                std::size_t count);

}  // namespace prunekit
