#include <doctest.h>

#include "helpers.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/filter_analysis.hpp"
#include "prunekit/pruning_ops.hpp"
#include "prunekit/structural.hpp"

using namespace prunekit;

namespace {

/// Activation oracle with fixed per-filter means; evaluation is scripted.
class FixedActivations : public testing::ScriptedEvaluator {
 public:
  FixedActivations(EvalFn fn, std::vector<LayerActivations> acts)
      : ScriptedEvaluator(std::move(fn), {false, true, true}), acts_(std::move(acts)) {}
  std::vector<LayerActivations> activations(const ModelSnapshot&, Split) override { return acts_; }

 private:
  std::vector<LayerActivations> acts_;
};

LayerActivations acts(const std::string& layer, std::vector<double> global,
                      std::map<std::uint32_t, std::vector<double>> by_class) {
  LayerActivations a;
  a.layer = layer;
  a.global_means = std::move(global);
  a.class_means = std::move(by_class);
  for (const auto& [k, v] : a.class_means) a.class_counts[k] = 10;
  return a;
}

}  // namespace

TEST_SUITE("filter_analysis") {

TEST_CASE("normalize_importance is min-max with degenerate ranges at 1") {
  CHECK(normalize_importance(std::vector<double>{2, 4, 3}) == std::vector<double>{0, 1, 0.5});
  CHECK(normalize_importance(std::vector<double>{7, 7}) == std::vector<double>{1, 1});
  CHECK(normalize_importance(std::vector<double>{}).empty());
  Rng rng(1);
  for (int c = 0; c < 200; ++c) {
    std::vector<double> v(1 + rng.below(20));
    for (auto& x : v) x = rng.uniform() * 10;
    for (double x : normalize_importance(v)) {
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
    }
  }
}

TEST_CASE("dead filters contribute zero") {
  auto m = testing::small_cnn(3, 4, 5, 2);
  mask_channel(m, 0, 1);
  FixedActivations ev([](const ModelSnapshot&, Split) { return 90.0; },
                      {acts("conv1", {1, 5, 3}, {{0, {1, 5, 3}}}), acts("conv2", {1, 1, 1, 1}, {{0, {1, 1, 1, 1}}}),
                       acts("fc", {1, 2, 3, 4, 5}, {{0, {1, 2, 3, 4, 5}}})});
  const auto c = compute_filter_contributions(m, ev);
  CHECK(c[0][1].mean_abs_activation == 0.0);
  CHECK(c[0][1].normalized_importance == 0.0);
  CHECK(c[0][2].normalized_importance == 1.0);
  CHECK(c[1][0].normalized_importance == 1.0);  // degenerate layer
  const auto p = compute_class_profiles(m, ev);
  REQUIRE(p.size() == 1);
  CHECK(p[0].filter_means.at("conv1")[1] == 0.0);
}

TEST_CASE("refinement masks filters unimportant globally and for every class") {
  auto m = testing::small_cnn(3, 4, 5, 2);
  FixedActivations ev([](const ModelSnapshot&, Split) { return 90.0; },
                      {acts("conv1", {0, 10, 5}, {{0, {0, 10, 5}}, {1, {0.1, 10, 5}}}),
                       acts("conv2", {0, 10, 10, 10}, {{0, {0, 10, 10, 10}}, {1, {8, 10, 10, 0}}}),
                       acts("fc", {0, 1, 1, 1, 1}, {{0, {0, 1, 1, 1, 1}}, {1, {0, 1, 1, 1, 1}}})});
  const auto contrib = compute_filter_contributions(m, ev);
  const auto profiles = compute_class_profiles(m, ev);
  const double before = weighted_sparsity(m);
  const auto r = refine_pruning(m, ev, contrib, profiles, {});
  // conv1 filter 0 qualifies; conv2 filter 0 is important for class 1; fc is the output layer.
  REQUIRE(r.filters.size() == 1);
  CHECK(r.filters[0].layer_name == "conv1");
  CHECK(r.filters[0].filter_index == 0);
  CHECK_FALSE(r.reverted);
  CHECK(r.sparsity_after > before);
  CHECK(r.additional_pruned == 9 + 4 * 9);
  CHECK(removed_channels(m, 0) == std::vector<std::size_t>{0});
}

TEST_CASE("refinement reverts to bit-identical masks when accuracy drops") {
  auto m = testing::small_cnn(3, 4, 5, 2);
  apply_sparsities(m, std::vector<double>{0.2, 0.3, 0.1});
  const auto masks = m.masks;
  const auto targets = m.targets;
  FixedActivations ev([](const ModelSnapshot& s, Split) { return weighted_sparsity(s) > 0.25 ? 80.0 : 90.0; },
                      {acts("conv1", {0, 10, 5}, {{0, {0, 10, 5}}}), acts("conv2", {0, 1, 2, 3}, {{0, {0, 1, 2, 3}}}),
                       acts("fc", {1, 1, 1, 1, 1}, {{0, {1, 1, 1, 1, 1}}})});
  const auto r = refine_pruning(m, ev, compute_filter_contributions(m, ev), compute_class_profiles(m, ev), {});
  CHECK(r.reverted);
  CHECK(r.additional_pruned == 0);
  CHECK(m.masks == masks);
  CHECK(m.targets == targets);
}

TEST_CASE("refinement validates options and capabilities") {
  auto m = testing::small_cnn(3, 4, 5, 2);
  testing::ScriptedEvaluator plain([](const ModelSnapshot&, Split) { return 90.0; });
  CHECK_THROWS_AS(compute_filter_contributions(m, plain), CapabilityError);
  RefineOptions o;
  o.tau = 1.5;
  CHECK_THROWS_AS(refine_pruning(m, plain, {}, {}, o), ConfigError);
}

TEST_CASE("built-in activations give one profile per class present") {
  auto m = testing::small_cnn(3, 4, 5, 2);
  auto bundle = testing::random_bundle({1, 8, 8}, 5, 40, 1);
  for (auto& l : bundle.test.labels) l = l % 3;  // classes 3 and 4 absent
  BuiltinEvaluator ev(bundle, 1);
  const auto p = compute_class_profiles(m, ev);
  REQUIRE(p.size() == 3);
  CHECK(p[0].class_id == 0);
  CHECK(p[2].class_id == 2);
  std::size_t total = 0;
  for (const auto& x : p) total += x.samples;
  CHECK(total == 40);
}

}  // TEST_SUITE

TEST_SUITE("structural") {

TEST_CASE("channels_to_remove keeps at least one channel") {
  CHECK(channels_to_remove(0, 0.5) == 0);
  CHECK(channels_to_remove(1, 0.5) == 0);
  CHECK(channels_to_remove(2, 0.9) == 1);
  CHECK(channels_to_remove(10, 0.1) == 1);
  CHECK(channels_to_remove(10, 0.01) == 1);
  CHECK(channels_to_remove(16, 0.25) == 4);
}

TEST_CASE("structural pruning stops at the first over-budget iteration and reverts it") {
  auto m = testing::small_cnn(8, 8, 4, 3);
  // Fine until a quarter of all conv channels are gone.
  testing::ScriptedEvaluator ev(
      [](const ModelSnapshot& s, Split) {
        std::size_t total = 0, gone = 0;
        for (const auto& c : channel_summary(s)) {
          total += c.total;
          gone += c.total - c.remaining;
        }
        return gone * 4 > total ? 80.0 : 90.0;
      },
      {false, true, false});
  StructuralConfig cfg;
  cfg.fraction_per_iter = 0.125;
  RetrainPolicy pol;
  const auto r = run_structural(m, ev, cfg, pol);
  // 1 channel per layer per iteration: 2/16 then 4/16 accepted, 6/16 reverted.
  CHECK(r.accepted_iterations == 2);
  CHECK(r.channel_reduction == 0.25);
  CHECK(r.rows.back().action == "revert");
  CHECK(r.final_top1 == 90.0);
  CHECK(r.parameter_reduction == weighted_sparsity(m));
  CHECK(r.channels[0].remaining == 6);
}

TEST_CASE("structural pruning requires conv layers and retraining") {
  auto dense = testing::dense_chain(4, {4}, 1);
  testing::ScriptedEvaluator ev([](const ModelSnapshot&, Split) { return 90.0; }, {false, true, false});
  CHECK_THROWS_AS(run_structural(dense, ev, {}, {}), ContractError);
  auto m = testing::small_cnn(2, 2, 2, 1);
  testing::ScriptedEvaluator no_train([](const ModelSnapshot&, Split) { return 90.0; });
  CHECK_THROWS_AS(run_structural(m, no_train, {}, {}), CapabilityError);
  StructuralConfig bad;
  bad.fraction_per_iter = 1.0;
  CHECK_THROWS_AS(run_structural(m, ev, bad, {}), ConfigError);
}

TEST_CASE("structural pruning terminates when no channel can go") {
  auto m = testing::small_cnn(2, 2, 2, 1);
  testing::ScriptedEvaluator ev([](const ModelSnapshot&, Split) { return 90.0; }, {false, true, false});
  const auto r = run_structural(m, ev, {}, {});
  CHECK(r.accepted_iterations == 1);
  for (const auto& c : r.channels) CHECK(c.remaining == 1);
}

}  // TEST_SUITE
