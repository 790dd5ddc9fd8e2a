#include "prunekit/filter_analysis.hpp"

#include <algorithm>

#include "prunekit/errors.hpp"
#include "prunekit/pruning_ops.hpp"

namespace prunekit {

using nlohmann::json;

std::vector<double> normalize_importance(std::span<const double> values) {
  std::vector<double> out(values.size(), 1.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

namespace {

std::vector<bool> dead_filters(const ModelSnapshot& model, std::size_t li) {
  const auto& layer = model.layers[li];
  const auto& mask = model.masks[li];
  const std::size_t slice = layer.slice_size();
  std::vector<bool> dead(layer.out_channels(), true);
  for (std::size_t c = 0; c < dead.size(); ++c)
    for (std::size_t k = 0; k < slice; ++k)
      if (mask.kept(c * slice + k)) {
        dead[c] = false;
        break;
      }
  return dead;
}

std::vector<LayerActivations> checked_activations(const ModelSnapshot& model, Evaluator& evaluator, Split split) {
  if (!evaluator.capabilities().supports_activations)
    throw CapabilityError("evaluator cannot report activations");
  auto acts = evaluator.activations(model, split);
  if (acts.size() != model.layers.size()) throw EvaluatorError("activation report does not cover every layer");
  for (std::size_t l = 0; l < acts.size(); ++l) {
    if (acts[l].layer != model.layers[l].name() || acts[l].global_means.size() != model.layers[l].out_channels())
      throw EvaluatorError("activation report does not match layer " + model.layers[l].name());
    const auto dead = dead_filters(model, l);
    for (std::size_t c = 0; c < dead.size(); ++c) {
      if (!dead[c]) continue;
      acts[l].global_means[c] = 0.0;
      for (auto& [k, means] : acts[l].class_means) means[c] = 0.0;
    }
  }
  return acts;
}

}  // namespace

std::vector<std::vector<FilterContribution>> compute_filter_contributions(const ModelSnapshot& model,
                                                                          Evaluator& evaluator, Split split) {
  const auto acts = checked_activations(model, evaluator, split);
  std::vector<std::vector<FilterContribution>> out;
  for (const auto& la : acts) {
    const auto norm = normalize_importance(la.global_means);
    auto& layer = out.emplace_back();
    for (std::size_t c = 0; c < la.global_means.size(); ++c) layer.push_back({la.layer, c, la.global_means[c], norm[c]});
  }
  return out;
}

std::vector<ClassActivationProfile> compute_class_profiles(const ModelSnapshot& model, Evaluator& evaluator,
                                                           Split split) {
  const auto acts = checked_activations(model, evaluator, split);
  std::map<std::uint32_t, ClassActivationProfile> by_class;
  for (const auto& la : acts) {
    for (const auto& [k, means] : la.class_means) {
      auto& p = by_class[k];
      p.class_id = k;
      const auto it = la.class_counts.find(k);
      p.samples = it == la.class_counts.end() ? 0 : it->second;
      p.filter_means[la.layer] = means;
      p.normalized[la.layer] = normalize_importance(means);
    }
  }
  std::vector<ClassActivationProfile> out;
  for (auto& [k, p] : by_class) out.push_back(std::move(p));
  return out;
}

RefinementResult refine_pruning(ModelSnapshot& model, Evaluator& evaluator,
                                const std::vector<std::vector<FilterContribution>>& contributions,
                                const std::vector<ClassActivationProfile>& profiles, const RefineOptions& options) {
  if (!(options.tau >= 0.0 && options.tau < 1.0)) throw ConfigError("tau must be in [0, 1)");
  if (!(options.budget >= 0.0)) throw ConfigError("refinement budget must be >= 0");
  if (contributions.size() != model.layers.size())
    throw ContractError("contributions must cover every layer of the model");

  RefinementResult r;
  const auto masks_before = model.masks;
  const auto targets_before = model.targets;
  r.sparsity_before = weighted_sparsity(model);
  r.top1_before = evaluator.evaluate(model, options.split).top1;

  const std::size_t last = model.layers.size() - 1;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    if (li == last && !options.include_output_layer) continue;
    const auto& layer = model.layers[li];
    const auto& contrib = contributions[li];
    if (contrib.size() != layer.out_channels()) throw ContractError("contribution count mismatch for " + layer.name());
    const auto dead = dead_filters(model, li);
    for (std::size_t c = 0; c < contrib.size(); ++c) {
      if (dead[c] || !(contrib[c].normalized_importance < options.tau)) continue;
      bool unimportant_everywhere = true;
      for (const auto& p : profiles) {
        const auto it = p.normalized.find(layer.name());
        if (it == p.normalized.end() || c >= it->second.size() || !(it->second[c] < options.tau)) {
          unimportant_everywhere = false;
          break;
        }
      }
      if (unimportant_everywhere) r.filters.push_back({layer.name(), c});
    }
  }

  std::size_t pruned_before = 0;
  for (const auto& m : model.masks) pruned_before += m.pruned_count();
  for (const auto& f : r.filters) mask_channel(model, model.index_of(f.layer_name), f.filter_index);
  std::size_t pruned_after = 0;
  for (const auto& m : model.masks) pruned_after += m.pruned_count();
  r.additional_pruned = pruned_after - pruned_before;

  r.top1_after = r.filters.empty() ? r.top1_before : evaluator.evaluate(model, options.split).top1;
  if (r.top1_before - r.top1_after > options.budget) {
    model.masks = masks_before;
    model.targets = targets_before;
    r.reverted = true;
    r.additional_pruned = 0;
    r.top1_after = r.top1_before;
  }
  r.sparsity_after = weighted_sparsity(model);
  return r;
}

json to_json(const std::vector<std::vector<FilterContribution>>& contributions) {
  json out = json::object();
  for (const auto& layer : contributions) {
    if (layer.empty()) continue;
    json rows = json::array();
    for (const auto& f : layer)
      rows.push_back({{"filter", f.filter_index},
                      {"mean_abs_activation", f.mean_abs_activation},
                      {"importance", f.normalized_importance}});
    out[layer.front().layer_name] = std::move(rows);
  }
  return out;
}

json to_json(const std::vector<ClassActivationProfile>& profiles) {
  json out = json::array();
  for (const auto& p : profiles)
    out.push_back({{"class", p.class_id}, {"samples", p.samples}, {"filter_means", p.filter_means},
                   {"importance", p.normalized}});
  return out;
}

json to_json(const RefinementResult& r) {
  json filters = json::array();
  for (const auto& f : r.filters) filters.push_back({{"layer", f.layer_name}, {"filter", f.filter_index}});
  return {{"filters", filters},
          {"additional_pruned", r.additional_pruned},
          {"top1_before", r.top1_before},
          {"top1_after", r.top1_after},
          {"weighted_sparsity_before", r.sparsity_before},
          {"weighted_sparsity_after", r.sparsity_after},
          {"reverted", r.reverted}};
}

}  // namespace prunekit
