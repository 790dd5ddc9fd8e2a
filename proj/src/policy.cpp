#include "prunekit/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prunekit/errors.hpp"

namespace prunekit {

const char* to_string(PolicyMode mode) noexcept {
  switch (mode) {
    case PolicyMode::constant: return "constant";
    case PolicyMode::dynamic: return "dynamic";
    case PolicyMode::prioritized: return "prioritized";
  }
  return "?";
}

PolicyMode parse_policy_mode(const std::string& text) {
  if (text == "constant") return PolicyMode::constant;
  if (text == "dynamic") return PolicyMode::dynamic;
  if (text == "prioritized") return PolicyMode::prioritized;
  throw ConfigError("unknown policy mode: " + text);
}

std::vector<double> compute_probabilities(const std::vector<std::size_t>& sizes,
                                          const std::vector<double>& sensitivities,
                                          double threshold, const std::vector<double>& sparsities) {
  const std::size_t n = sizes.size();
  if (n == 0) throw ContractError("compute_probabilities: empty layer set");
  if (sensitivities.size() != n || (!sparsities.empty() && sparsities.size() != n))
    throw ContractError("compute_probabilities: per-layer inputs differ in length");
  if (!(threshold > 0.0)) throw ContractError("compute_probabilities: threshold must be > 0");

  auto open = [&](std::size_t i) { return sparsities.empty() || sparsities[i] < 1.0; };
  std::vector<double> w(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (sizes[i] == 0) throw ContractError("compute_probabilities: layer sizes must be > 0");
    if (!open(i)) continue;
    w[i] = static_cast<double>(sizes[i]) * std::max(0.0, threshold - sensitivities[i]);
    total += w[i];
  }
  if (total > 0.0) {
    for (auto& v : w) v /= total;
    return w;
  }
  std::size_t eligible = 0;
  for (std::size_t i = 0; i < n; ++i) eligible += open(i) ? 1 : 0;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = eligible == 0 ? 1.0 / static_cast<double>(n)
                         : (open(i) ? 1.0 / static_cast<double>(eligible) : 0.0);
  return w;
}

std::vector<std::size_t> sample_layers(const std::vector<double>& probabilities, Rng& rng,
                                       std::size_t count) {
  if (count == 0) throw ContractError("sample_layers: count must be >= 1");
  std::vector<double> p = probabilities;
  const auto eligible = static_cast<std::size_t>(
      std::count_if(p.begin(), p.end(), [](double v) { return v > 0.0; }));
  if (count > eligible)
    throw ContractError("sample_layers: " + std::to_string(count) + " layers requested, " +
                        std::to_string(eligible) + " eligible");
  std::vector<std::size_t> chosen;
  for (std::size_t k = 0; k < count; ++k) {
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = p.size();
    std::size_t last_positive = p.size();
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] <= 0.0) continue;
      last_positive = i;
      acc += p[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    if (pick == p.size()) pick = last_positive;  // rounding at the top end
    chosen.push_back(pick);
    p[pick] = 0.0;
  }
  return chosen;
}

void update_policy(LayerPolicy& policy, const std::vector<std::size_t>& sizes,
                   const std::vector<double>& sensitivities, double threshold,
                   const std::vector<double>& sparsities, double drop_so_far) {
  switch (policy.mode) {
    case PolicyMode::constant:
      if (!policy.initialized)
        policy.probabilities = compute_probabilities(
            sizes, std::vector<double>(sizes.size(), 0.0), threshold, {});
      break;
    case PolicyMode::dynamic:
      policy.probabilities = compute_probabilities(sizes, sensitivities, threshold, sparsities);
      break;
    case PolicyMode::prioritized: {
      if (!policy.priority_phase_done && drop_so_far > policy.priority_drop)
        policy.priority_phase_done = true;
      auto p = compute_probabilities(sizes, sensitivities, threshold, sparsities);
      if (!policy.priority_phase_done && !policy.priority.empty()) {
        std::vector<double> restricted(sizes.size(), 0.0);
        double total = 0.0;
        for (auto i : policy.priority) {
          restricted[i] = p[i];
          total += p[i];
        }
        if (total > 0.0) {
          for (auto& v : restricted) v /= total;
        } else {
          // Every priority layer has zero weight; spread mass over the ones
          // that can still be pruned.
          std::size_t open = 0;
          for (auto i : policy.priority) open += (sparsities.empty() || sparsities[i] < 1.0) ? 1 : 0;
          for (auto i : policy.priority)
            restricted[i] = open == 0 ? 1.0 / static_cast<double>(policy.priority.size())
                            : (sparsities.empty() || sparsities[i] < 1.0) ? 1.0 / static_cast<double>(open)
                                                                          : 0.0;
        }
        p = std::move(restricted);
      }
      policy.probabilities = std::move(p);
      break;
    }
  }
  policy.initialized = true;
}

std::vector<std::size_t> resolve_priority(const std::vector<std::string>& spec,
                                          const std::vector<std::string>& layer_names,
                                          const std::vector<std::size_t>& sizes) {
  std::vector<std::size_t> out;
  for (const auto& item : spec) {
    if (item.rfind("largest:", 0) == 0) {
      std::size_t n = 0;
      try {
        n = static_cast<std::size_t>(std::stoul(item.substr(8)));
      } catch (const std::exception&) {
        throw ConfigError("bad priority selector: " + item);
      }
      std::vector<std::size_t> order(sizes.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return sizes[a] > sizes[b]; });
      for (std::size_t k = 0; k < std::min(n, order.size()); ++k) out.push_back(order[k]);
      continue;
    }
    const auto it = std::find(layer_names.begin(), layer_names.end(), item);
    if (it == layer_names.end()) throw ConfigError("priority list names unknown layer " + item);
    out.push_back(static_cast<std::size_t>(it - layer_names.begin()));
  }
  std::vector<std::size_t> unique;
  for (auto i : out)
    if (std::find(unique.begin(), unique.end(), i) == unique.end()) unique.push_back(i);
  return unique;
}

}  // namespace prunekit
