#include "prunekit/pruning_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prunekit/engine.hpp"
#include "prunekit/errors.hpp"

namespace prunekit {

double prune_layer_by_step(ModelSnapshot& model, const std::string& layer_name, double step) {
  if (!(step > 0.0)) throw ContractError("prune step must be positive");
  const auto i = model.index_of(layer_name);
  const double next = std::min(1.0, snap_fraction(model.targets[i]) + snap_fraction(step));
  model.targets[i] = next;
  model.masks[i] = magnitude_mask(model.layers[i], next);
  return next;
}

double reverse_prune_by_step(ModelSnapshot& model, const std::string& layer_name, double step) {
  if (!(step > 0.0)) throw ContractError("reverse step must be positive");
  const auto i = model.index_of(layer_name);
  const double next = std::max(0.0, snap_fraction(model.targets[i]) - snap_fraction(step));
  model.targets[i] = next;
  model.masks[i] = magnitude_mask(model.layers[i], next);
  return next;
}

namespace {

/// Min-max normalization; a degenerate range maps everything to 0.
std::vector<double> minmax(std::span<const double> v) {
  std::vector<double> out(v.size(), 0.0);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  return out;
}

}  // namespace

PruneMask gradient_informed_mask(const LayerTensor& layer, double target_sparsity,
                                 const GradientStats& grads, double alpha) {
  const std::size_t n = layer.parameter_count();
  if (grads.per_weight_importance.size() != n)
    throw ContractError("gradient stats for " + layer.name() + " have " +
                        std::to_string(grads.per_weight_importance.size()) + " entries, expected " +
                        std::to_string(n));
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in [0, 1]");
  for (double g : grads.per_weight_importance)
    if (!std::isfinite(g) || g < 0.0)
      throw ContractError("gradient stats for " + layer.name() + " must be finite and >= 0");

  const auto w = layer.weights();
  std::vector<double> magnitude(n);
  for (std::size_t i = 0; i < n; ++i) magnitude[i] = std::fabs(static_cast<double>(w[i]));
  const auto mag_n = minmax(magnitude);
  const auto imp_n = minmax(grads.per_weight_importance);
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = alpha * mag_n[i] + (1.0 - alpha) * imp_n[i];

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (score[a] != score[b]) return score[a] < score[b];
    if (magnitude[a] != magnitude[b]) return magnitude[a] < magnitude[b];
    return a < b;
  });
  PruneMask mask(layer.name(), n, true);
  const std::size_t prune = pruned_count_for(target_sparsity, n);
  for (std::size_t r = 0; r < prune; ++r) mask.set_kept(order[r], false);
  return mask;
}

namespace {

void require_conv(const LayerTensor& layer) {
  if (layer.kind() != LayerKind::conv2d)
    throw ContractError("channel scoring is unsupported for " + std::string(to_string(layer.kind())) +
                        " layer " + layer.name());
}

/// Scores the given output channels, normalizing within that set.
std::vector<ChannelScore> score_subset(const LayerTensor& layer, const PruneMask* mask,
                                       std::span<const std::size_t> channels) {
  require_conv(layer);
  const auto w = layer.weights();
  const std::size_t in_c = layer.in_channels();
  const std::size_t area = layer.kernel_area();
  std::vector<ChannelScore> scores;
  std::vector<double> l1s, vars;
  for (std::size_t oc : channels) {
    std::vector<double> energy(in_c, 0.0);
    for (std::size_t ic = 0; ic < in_c; ++ic) {
      const std::size_t base = (oc * in_c + ic) * area;
      for (std::size_t k = 0; k < area; ++k) {
        const std::size_t idx = base + k;
        if (mask && !mask->kept(idx)) continue;
        energy[ic] += std::fabs(static_cast<double>(w[idx]));
      }
    }
    const double l1 = std::accumulate(energy.begin(), energy.end(), 0.0);
    const double mean = l1 / static_cast<double>(in_c);
    double var = 0.0;
    for (double e : energy) var += (e - mean) * (e - mean);
    var /= static_cast<double>(in_c);
    scores.push_back({layer.name(), oc, l1, var, 0.0});
    l1s.push_back(l1);
    vars.push_back(var);
  }
  const auto l1n = minmax(l1s);
  const auto varn = minmax(vars);
  for (std::size_t k = 0; k < scores.size(); ++k) scores[k].combined = l1n[k] + varn[k];
  return scores;
}

}  // namespace

std::vector<ChannelScore> score_channels(const LayerTensor& layer, const PruneMask& mask) {
  require_conv(layer);
  if (mask.size() != layer.parameter_count()) throw ContractError("score_channels: mask length");
  std::vector<std::size_t> all(layer.out_channels());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return score_subset(layer, &mask, all);
}

std::vector<ChannelScore> score_channels(const LayerTensor& layer) {
  require_conv(layer);
  std::vector<std::size_t> all(layer.out_channels());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return score_subset(layer, nullptr, all);
}

std::optional<DownstreamLink> downstream_of(const ModelSnapshot& model, const std::string& layer_name) {
  const auto li = model.index_of(layer_name);
  const auto plan = engine::build_plan(model);
  std::size_t op = plan.ops.size();
  for (std::size_t i = 0; i < plan.ops.size(); ++i)
    if ((plan.ops[i].op.kind == OpKind::conv2d || plan.ops[i].op.kind == OpKind::dense) &&
        plan.ops[i].layer_index == li)
      op = i;
  for (std::size_t j = op + 1; j < plan.ops.size(); ++j) {
    const auto& p = plan.ops[j];
    if (p.op.kind != OpKind::conv2d && p.op.kind != OpKind::dense) continue;
    const std::size_t upstream_channels = model.layers[li].out_channels();
    if (p.op.kind == OpKind::conv2d) return DownstreamLink{p.layer_index, 1};
    return DownstreamLink{p.layer_index, p.in.size() / upstream_channels};
  }
  return std::nullopt;
}

void mask_channel(ModelSnapshot& model, std::size_t layer_index, std::size_t channel) {
  const auto& layer = model.layers.at(layer_index);
  if (channel >= layer.out_channels()) throw ContractError("channel index out of range");
  auto& mask = model.masks[layer_index];
  const std::size_t slice = layer.slice_size();
  for (std::size_t k = 0; k < slice; ++k) mask.set_kept(channel * slice + k, false);
  model.targets[layer_index] = mask.sparsity();

  const auto link = downstream_of(model, layer.name());
  if (!link) return;
  const auto& consumer = model.layers[link->layer_index];
  auto& cmask = model.masks[link->layer_index];
  if (consumer.kind() == LayerKind::conv2d) {
    const std::size_t in_c = consumer.in_channels();
    const std::size_t area = consumer.kernel_area();
    for (std::size_t o = 0; o < consumer.out_channels(); ++o)
      for (std::size_t k = 0; k < area; ++k) cmask.set_kept((o * in_c + channel) * area + k, false);
  } else {
    const std::size_t in = consumer.shape()[1];
    for (std::size_t o = 0; o < consumer.out_channels(); ++o)
      for (std::size_t j = channel * link->span; j < (channel + 1) * link->span; ++j)
        cmask.set_kept(o * in + j, false);
  }
  model.targets[link->layer_index] = cmask.sparsity();
}

std::vector<std::size_t> removed_channels(const ModelSnapshot& model, std::size_t layer_index) {
  const auto& layer = model.layers.at(layer_index);
  const auto& mask = model.masks[layer_index];
  const std::size_t slice = layer.slice_size();
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < layer.out_channels(); ++c) {
    bool all_pruned = true;
    for (std::size_t k = 0; k < slice && all_pruned; ++k) all_pruned = !mask.kept(c * slice + k);
    if (all_pruned) out.push_back(c);
  }
  return out;
}

std::vector<std::size_t> remove_lowest_channels(ModelSnapshot& model, std::size_t layer_index,
                                                std::size_t count) {
  const auto& layer = model.layers.at(layer_index);
  require_conv(layer);
  const auto gone = removed_channels(model, layer_index);
  std::vector<std::size_t> live;
  for (std::size_t c = 0; c < layer.out_channels(); ++c)
    if (!std::binary_search(gone.begin(), gone.end(), c)) live.push_back(c);
  if (count >= live.size())
    throw ContractError("refusing to remove " + std::to_string(count) + " of " +
                        std::to_string(live.size()) + " live channels from " + layer.name());
  auto scores = score_subset(layer, &model.masks[layer_index], live);
  std::stable_sort(scores.begin(), scores.end(), [](const ChannelScore& a, const ChannelScore& b) {
    return a.combined < b.combined;
  });
  std::vector<std::size_t> removed;
  for (std::size_t k = 0; k < count; ++k) removed.push_back(scores[k].channel_index);
  std::sort(removed.begin(), removed.end());
  for (auto c : removed) mask_channel(model, layer_index, c);
  return removed;
}

std::vector<std::size_t> remove_channels(ModelSnapshot& model, const std::string& layer_name,
                                         double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ContractError("channel fraction must lie in (0, 1)");
  const auto li = model.index_of(layer_name);
  require_conv(model.layers[li]);
  const std::size_t out = model.layers[li].out_channels();
  const std::size_t count = std::max<std::size_t>(1, pruned_count_for(fraction, out));
  return remove_lowest_channels(model, li, count);
}

}  // namespace prunekit
