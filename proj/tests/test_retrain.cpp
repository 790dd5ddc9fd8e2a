#include <doctest.h>

#include <deque>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/retrain.hpp"

using namespace prunekit;

namespace {

constexpr TrainerCapabilities kAll{true, true, true};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Expected {
  std::size_t epoch;
  std::string layer;
  std::size_t attempt;
  double step;
  std::string action;
  double sparsity;
};

}  // namespace

TEST_SUITE("retrain") {

TEST_CASE("apply_gradient_mask zeroes exactly the pruned positions") {
  Rng rng(2);
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = 1 + rng.below(200);
    PruneMask m("l", n);
    for (std::size_t i = 0; i < n; ++i) m.set_kept(i, rng.below(2));
    std::vector<double> g(n);
    for (auto& v : g) v = 0.5 + rng.uniform();
    const auto out = apply_gradient_mask(std::span<const double>(g), m);
    for (std::size_t i = 0; i < n; ++i) CHECK((out[i] != 0.0) == m.kept(i));
    std::vector<float> f(g.begin(), g.end());
    apply_gradient_mask(std::span<float>(f), m);
    for (std::size_t i = 0; i < n; ++i) CHECK((f[i] != 0.0f) == m.kept(i));
  }
  PruneMask all("l", 3);
  CHECK(apply_gradient_mask(std::vector<double>{1, 2, 3}, all) == std::vector<double>{1, 2, 3});
  all.fill(false);
  CHECK(apply_gradient_mask(std::vector<double>{1, 2, 3}, all) == std::vector<double>{0, 0, 0});
  CHECK_THROWS_AS(apply_gradient_mask(std::vector<double>{1, 2}, all), ContractError);
}

TEST_CASE("boost schedule helpers") {
  BoostSchedule s;
  s.step_value = 0.2;
  s.reduction_factor = 0.2;
  CHECK(s.step_for_scale(0) == 0.2);
  CHECK(s.step_for_scale(1) == doctest::Approx(0.04));
  s.threshold1 = 2;
  CHECK_FALSE(s.record_skip("a"));
  CHECK(s.record_skip("a"));
  CHECK(s.permanently_skipped.count("a") == 1);
  CHECK_FALSE(s.record_skip("a"));
  s.reduction_factor = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(parse_retrain_mode("boosted") == RetrainMode::boosted);
  CHECK_THROWS_AS(parse_retrain_mode("x"), ConfigError);
}

TEST_CASE("boosting state machine follows the hand-simulated transcript") {
  auto m = testing::dense_chain(10, {10, 10}, 3);
  std::deque<double> val{90.0,                          // baseline validation
                         89.5, 89.8, 88.9, 89.0,        // epoch 1
                         88.0, 89.5, 89.5, 89.5, 89.5,  // epoch 2
                         80.0};                         // epoch 3
  testing::ScriptedEvaluator ev(
      [&](const ModelSnapshot&, Split s) {
        if (s != Split::validation) return 90.0;
        REQUIRE_FALSE(val.empty());
        const double v = val.front();
        val.pop_front();
        return v;
      },
      kAll);
  BoostSchedule sched;
  sched.priority_list = {"fc1", "fc2"};
  sched.scales = 2;
  sched.steps = 2;
  sched.step_value = 0.2;
  sched.reduction_factor = 0.5;
  sched.threshold0 = 1.0;
  sched.threshold1 = 2;
  RetrainPolicy pol;
  pol.mode = RetrainMode::boosted;
  pol.epochs = 3;
  const auto log = run_boosted(m, ev, sched, pol);
  CHECK(val.empty());

  const std::vector<Expected> want{
      {1, "fc1", 1, 0.2, "prune", 0.2},          {1, "fc1", 2, 0.2, "prune", 0.4},
      {1, "fc1", 3, 0.1, "reverse", 0.4},        {1, "fc2", 1, 0.2, "reverse", 0.0},
      {1, "*", 0, 0.0, "retrain", 0.2},          {2, "fc1", 1, 0.2, "permanent_skip", 0.4},
      {2, "fc2", 1, 0.2, "prune", 0.2},          {2, "fc2", 2, 0.2, "prune", 0.4},
      {2, "fc2", 3, 0.1, "prune", 0.5},          {2, "fc2", 4, 0.1, "prune", 0.6},
      {2, "*", 0, 0.0, "retrain", 0.5},          {3, "fc2", 1, 0.2, "permanent_skip", 0.6},
      {3, "*", 0, 0.0, "retrain", 0.5},
  };
  REQUIRE(log.rows.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    CAPTURE(i);
    CHECK(log.rows[i].epoch == want[i].epoch);
    CHECK(log.rows[i].layer == want[i].layer);
    CHECK(log.rows[i].attempt == want[i].attempt);
    CHECK(log.rows[i].step == doctest::Approx(want[i].step));
    CHECK(log.rows[i].action == want[i].action);
    CHECK(log.rows[i].sparsity == doctest::Approx(want[i].sparsity).epsilon(1e-9));
  }
  CHECK(sched.skip_counts.at("fc1") == 2);
  CHECK(sched.skip_counts.at("fc2") == 2);
  CHECK(sched.permanently_skipped == std::set<std::string>{"fc1", "fc2"});
  CHECK(m.masks[0].sparsity() == 0.4);
  CHECK(m.masks[1].sparsity() == 0.6);
  CHECK(ev.train_calls == 3);
  CHECK(log.reverse_events == 4);
  CHECK(log.pruned_set_monotone);
}

TEST_CASE("boosting attempts are bounded and an empty list only retrains") {
  auto m = testing::dense_chain(10, {10, 10}, 3);
  testing::ScriptedEvaluator ev([](const ModelSnapshot&, Split) { return 90.0; }, kAll);
  BoostSchedule sched;
  RetrainPolicy pol;
  pol.epochs = 2;
  auto log = run_boosted(m, ev, sched, pol);
  CHECK(weighted_sparsity(m) == 0.0);
  CHECK(log.rows.size() == 2);

  sched.priority_list = {"fc1"};
  sched.scales = 3;
  sched.steps = 4;
  pol.epochs = 5;
  log = run_boosted(m, ev, sched, pol);
  std::size_t attempts = 0;
  for (const auto& r : log.rows) attempts += r.layer != "*";
  CHECK(attempts <= 5 * 3 * 4);
  CHECK(m.masks[0].sparsity() == 1.0);  // no drop ever, so the layer saturates
}

TEST_CASE("progressive schedule reaches 0.53 after 43 epochs") {
  auto m = testing::dense_chain(10, {10, 10}, 3);
  testing::ScriptedEvaluator ev([](const ModelSnapshot&, Split) { return 90.0; }, kAll);
  RetrainPolicy pol;
  pol.mode = RetrainMode::progressive;
  pol.epochs = 43;
  const auto log = run_progressive(m, ev, 0.1, 0.01, pol);
  for (const auto& mask : m.masks) CHECK(mask.sparsity() == 0.53);
  CHECK(weighted_sparsity(m) == 0.53);
  CHECK(log.epochs_run == 43);
  CHECK(log.pruned_set_monotone);
  CHECK(ev.train_calls == 43);
  pol.epochs = 100;
  CHECK_THROWS_AS(run_progressive(m, ev, 0.1, 0.01, pol), ConfigError);
}

TEST_CASE("progressive with zero increment keeps a constant sparsity") {
  auto m = testing::dense_chain(10, {10, 10}, 3);
  testing::ScriptedEvaluator ev([](const ModelSnapshot&, Split) { return 90.0; }, kAll);
  RetrainPolicy pol;
  pol.epochs = 4;
  const auto log = run_progressive(m, ev, 0.3, 0.0, pol);
  for (const auto& r : log.rows)
    if (r.action == "set") CHECK(r.sparsity == 0.3);
}

TEST_CASE("simple retraining checks capability and logs one row per epoch") {
  auto m = testing::dense_chain(10, {10, 10}, 3);
  testing::ScriptedEvaluator none([](const ModelSnapshot&, Split) { return 90.0; });
  RetrainPolicy pol;
  pol.epochs = 3;
  CHECK_THROWS_AS(run_simple(m, none, pol), CapabilityError);
  testing::ScriptedEvaluator ev([](const ModelSnapshot&, Split) { return 90.0; }, kAll);
  const auto log = run_simple(m, ev, pol);
  CHECK(log.rows.size() == 3);
  CHECK(log.epochs_run == 3);
}

TEST_CASE("gradient-informed with uniform importances follows magnitude masks") {
  auto m = testing::dense_chain(10, {10, 10}, 3);
  testing::ScriptedEvaluator ev([](const ModelSnapshot& s, Split) { return 90.0 - 2.0 * weighted_sparsity(s); }, kAll);
  GradientInformedConfig cfg;
  RetrainPolicy pol;
  pol.epochs = 12;
  const auto log = run_gradient_informed(m, ev, cfg, pol);
  for (std::size_t i = 0; i < m.layers.size(); ++i) CHECK(m.masks[i] == magnitude_mask(m.layers[i], m.targets[i]));
  CHECK(log.baseline_top1 - log.final_result.top1 <= 1.0);
  CHECK(weighted_sparsity(m) > 0.0);
}

TEST_CASE("gradient-informed with zero epochs leaves the model unchanged") {
  auto m = testing::dense_chain(10, {10, 10}, 3);
  testing::ScriptedEvaluator ev([](const ModelSnapshot&, Split) { return 90.0; }, kAll);
  RetrainPolicy pol;
  pol.epochs = 0;
  const auto before = m.masks;
  const auto log = run_gradient_informed(m, ev, {}, pol);
  CHECK(m.masks == before);
  CHECK(log.rows.empty());
  testing::ScriptedEvaluator no_grad([](const ModelSnapshot&, Split) { return 90.0; }, {false, true, false});
  CHECK_THROWS_AS(run_gradient_informed(m, no_grad, {}, pol), CapabilityError);
}

TEST_CASE("gradient-informed restores the best feasible state") {
  auto m = testing::dense_chain(10, {10, 10}, 3);
  // Any pruning beyond 30% overall costs 5 points.
  testing::ScriptedEvaluator ev(
      [](const ModelSnapshot& s, Split) { return weighted_sparsity(s) > 0.3 ? 85.0 : 90.0; }, kAll);
  GradientInformedConfig cfg;
  cfg.init_step = 0.25;
  cfg.sensitivity.step_max = 0.25;
  RetrainPolicy pol;
  pol.epochs = 9;
  const auto log = run_gradient_informed(m, ev, cfg, pol);
  CHECK(weighted_sparsity(m) <= 0.3);
  CHECK(log.final_result.top1 == 90.0);
}

TEST_CASE("retraining drivers resume from epoch checkpoints byte-for-byte") {
  testing::TempDir dir("retrain-resume");
  const auto bundle = testing::random_bundle({1, 8, 8}, 4, 120, 5);
  const auto fresh = testing::small_cnn(3, 4, 4, 17);
  GradientInformedConfig cfg;
  cfg.init_step = 0.1;
  cfg.drop_threshold = 5.0;
  RetrainPolicy pol;
  pol.epochs = 6;
  pol.seed = 4;
  pol.learning_rate = 0.02;

  auto control = [&](const std::string& tag) {
    RunControl c;
    c.checkpoint_path = dir / (tag + ".json");
    c.trace_path = dir / (tag + ".csv");
    return c;
  };

  auto m1 = fresh;
  BuiltinEvaluator e1(bundle, 1);
  const auto log1 = run_gradient_informed(m1, e1, cfg, pol, control("a"));

  struct Stop {};
  auto m2 = fresh;
  BuiltinEvaluator e2(bundle, 1);
  auto c2 = control("b");
  c2.on_epoch = [](std::size_t e) {
    if (e == 3) throw Stop{};
  };
  CHECK_THROWS_AS(run_gradient_informed(m2, e2, cfg, pol, c2), Stop);

  auto cp = load_run_checkpoint(dir / "b.json");
  CHECK(cp.state["epoch"] == 3);
  BuiltinEvaluator e3(bundle, 1);
  auto c3 = control("b");
  c3.resume_state = cp.state;
  const auto log3 = run_gradient_informed(cp.model, e3, cfg, pol, c3);

  CHECK(log3.rows == log1.rows);
  CHECK(slurp(dir / "b.csv") == slurp(dir / "a.csv"));
  CHECK(cp.model.masks == m1.masks);
  for (std::size_t l = 0; l < m1.layers.size(); ++l)
    CHECK(std::equal(m1.layers[l].weights().begin(), m1.layers[l].weights().end(),
                     cp.model.layers[l].weights().begin()));
}

TEST_CASE("boosted resume keeps skip counts") {
  testing::TempDir dir("boost-resume");
  const auto bundle = testing::random_bundle({1, 8, 8}, 4, 80, 6);
  const auto fresh = testing::small_cnn(3, 4, 4, 3);
  RetrainPolicy pol;
  pol.epochs = 4;
  pol.seed = 9;
  auto make_sched = [] {
    BoostSchedule s;
    s.priority_list = {"conv2", "fc"};
    s.scales = 2;
    s.steps = 3;
    s.step_value = 0.2;
    s.threshold0 = 3.0;
    s.threshold1 = 2;
    return s;
  };
  auto m1 = fresh;
  BuiltinEvaluator e1(bundle, 1);
  auto s1 = make_sched();
  RunControl c1;
  c1.trace_path = dir / "a.csv";
  const auto log1 = run_boosted(m1, e1, s1, pol, c1);

  struct Stop {};
  auto m2 = fresh;
  BuiltinEvaluator e2(bundle, 1);
  auto s2 = make_sched();
  RunControl c2;
  c2.checkpoint_path = dir / "b.json";
  c2.trace_path = dir / "b.csv";
  c2.on_epoch = [](std::size_t e) {
    if (e == 2) throw Stop{};
  };
  CHECK_THROWS_AS(run_boosted(m2, e2, s2, pol, c2), Stop);
  auto cp = load_run_checkpoint(dir / "b.json");
  BuiltinEvaluator e3(bundle, 1);
  auto s3 = make_sched();
  c2.on_epoch = nullptr;
  c2.resume_state = cp.state;
  const auto log3 = run_boosted(cp.model, e3, s3, pol, c2);
  CHECK(log3.rows == log1.rows);
  CHECK(s3.skip_counts == s1.skip_counts);
  CHECK(s3.permanently_skipped == s1.permanently_skipped);
  CHECK(slurp(dir / "b.csv") == slurp(dir / "a.csv"));
}

TEST_CASE("retrain rows round-trip through their CSV fields") {
  const RetrainLogRow r{3, "conv1", 2, 0.025, 0.75, "prune", 0.3, 88.25};
  CHECK(retrain_row_from_fields(to_fields(r)) == r);
  CHECK(retrain_trace_header().size() == to_fields(r).size());
}

}  // TEST_SUITE
