#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "prunekit/cli.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/external.hpp"
#include "prunekit/fixture.hpp"
#include "prunekit/search.hpp"
#include "prunekit/trace.hpp"

using namespace prunekit;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

FixtureSpec tiny_spec() {
  FixtureSpec s;
  s.samples = 400;
  s.epochs = 2;
  s.hidden = 32;
  s.seed = 3;
  return s;
}

/// A small trained fixture on disk, built once per process.
const fs::path& tiny_fixture() {
  static testing::TempDir dir("tiny-fixture");
  static bool built = false;
  if (!built) {
    make_fixture(tiny_spec(), dir.path());
    built = true;
  }
  return dir.path();
}

std::string mock_command(const std::string& extra = "") {
  return std::string(MOCK_TRAINER) + " --model " + (tiny_fixture() / "model").string() + " --data " +
         (tiny_fixture() / "data").string() + " " + extra;
}

ExternalOptions mock_options(const std::string& extra = "", std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
  ExternalOptions o;
  o.command = mock_command(extra);
  o.timeout = timeout;
  o.work_dir = tiny_fixture() / "ipc";
  return o;
}

}  // namespace

TEST_SUITE("rng") {

TEST_CASE("streams replay from a persisted position") {
  Rng a(123);
  for (int i = 0; i < 37; ++i) a.next();
  Rng b = Rng::at_position(123, a.position());
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
}

TEST_CASE("uniform, below and normal stay in range with sane moments") {
  Rng r(5);
  double sum = 0, sq = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(r.below(7) < 7);
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(0.02).scale(1));
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.02));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
}

}  // TEST_SUITE

TEST_SUITE("trace") {

TEST_CASE("format_double round-trips") {
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const double v = (r.uniform() - 0.5) * std::pow(10.0, static_cast<double>(r.below(12)) - 6);
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(90) == "90");
}

TEST_CASE("csv trace writes, rejects bad fields, and resumes by truncation") {
  testing::TempDir dir("csv");
  {
    CsvTrace t(dir / "t.csv", {"a", "b"});
    t.row({"1", "x"});
    t.row({"2", "y"});
    t.row({"3", "z"});
    CHECK_THROWS_AS(t.row({"1"}), ContractError);
    CHECK_THROWS_AS(t.row({"1", "a,b"}), ContractError);
  }
  CHECK(slurp(dir / "t.csv") == "a,b\n1,x\n2,y\n3,z\n");
  {
    auto t = CsvTrace::resume(dir / "t.csv", {"a", "b"}, 2);
    t.row({"3", "w"});
  }
  CHECK(slurp(dir / "t.csv") == "a,b\n1,x\n2,y\n3,w\n");
  CHECK_THROWS_AS(CsvTrace::resume(dir / "t.csv", {"a", "c"}, 1), LoadError);
  CHECK_THROWS_AS(CsvTrace::resume(dir / "t.csv", {"a", "b"}, 9), LoadError);
}

}  // TEST_SUITE

TEST_SUITE("fixture") {

TEST_CASE("shape data is balanced, labeled and deterministic") {
  const auto a = generate_shapes(10, 16, 500, 0.3, 4);
  const auto b = generate_shapes(10, 16, 500, 0.3, 4);
  CHECK(a.inputs == b.inputs);
  CHECK(a.labels == b.labels);
  std::vector<int> counts(10, 0);
  for (auto l : a.labels) counts[l]++;
  for (int c : counts) CHECK(c == 50);
  CHECK(a.sample_shape == Shape3{1, 16, 16});
  CHECK_THROWS_AS(generate_shapes(11, 16, 10, 0.1, 1), ConfigError);
}

TEST_CASE("fixture specs are validated and round-trip through JSON") {
  FixtureSpec s;
  CHECK_NOTHROW(validate(s));
  const auto params = init_fixture_model(s).layer_sizes();
  const auto total = std::accumulate(params.begin(), params.end(), std::size_t{0});
  CHECK(total > 40000);
  CHECK(total < 60000);
  CHECK(to_json(fixture_spec_from_json(to_json(s))) == to_json(s));
  auto bad = s;
  bad.hidden = 5000;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = s;
  bad.samples = 20000;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  CHECK_THROWS_AS(fixture_spec_from_json({{"depth", 3}}), ConfigError);
  s.arch = "mlp3";
  CHECK(init_fixture_model(s).layers.size() == 3);
}

TEST_CASE("made fixtures load back with the recorded baseline") {
  const auto& dir = tiny_fixture();
  const auto m = load_model(dir / "model");
  const auto data = load_data_bundle(dir / "data");
  CHECK(data.train.size() + data.test.size() == 400);
  const auto meta = nlohmann::json::parse(slurp(dir / "fixture.json"));
  CHECK(evaluate_dataset(m, data.test).top1 == doctest::Approx(meta["baseline_top1"].get<double>()));
  std::size_t total = 0;
  for (auto n : m.layer_sizes()) total += n;
  CHECK(meta["parameters"] == total);
}

}  // TEST_SUITE

TEST_SUITE("external") {

TEST_CASE("external evaluator matches the built-in engine") {
  const auto& dir = tiny_fixture();
  auto m = load_model(dir / "model");
  BuiltinEvaluator local(load_data_bundle(dir / "data"), 11);
  ExternalEvaluator remote(m, mock_options());
  CHECK(remote.capabilities() == TrainerCapabilities{true, true, true});
  CHECK(remote.evaluate(m).top1 == local.evaluate(m).top1);
  apply_sparsities(m, std::vector<double>{0.3, 0.5, 0.6, 0.2});
  CHECK(remote.evaluate(m).top1 == local.evaluate(m).top1);
  CHECK(remote.evaluate(m, Split::validation).top1 == local.evaluate(m, Split::validation).top1);
  // A non-magnitude mask travels through a mask file.
  mask_channel(m, 0, 2);
  CHECK(remote.evaluate(m).top1 == local.evaluate(m).top1);
  const auto acts = remote.activations(m, Split::test);
  const auto local_acts = local.activations(m, Split::test);
  REQUIRE(acts.size() == 4);
  for (std::size_t l = 0; l < 4; ++l)
    for (std::size_t c = 0; c < acts[l].global_means.size(); ++c)
      CHECK(acts[l].global_means[c] == doctest::Approx(local_acts[l].global_means[c]).epsilon(1e-9));
  const auto g = remote.gradients(m, "conv2");
  CHECK(g.per_weight_importance.size() == m.layer("conv2").parameter_count());
  TrainOptions o;
  o.seed = 1;
  const auto before = m.layers[0].storage_id();
  const auto rep = remote.train(m, o);
  CHECK(rep.epoch_loss.size() == 1);
  CHECK(m.layers[0].storage_id() == before);
  remote.close();
  CHECK_FALSE(remote.alive());
}

TEST_CASE("requests carry ids and the wire log shows the protocol") {
  testing::TempDir dir("wire");
  const auto m = load_model(tiny_fixture() / "model");
  {
    ExternalEvaluator remote(m, mock_options("--log " + (dir / "log.txt").string()));
    remote.evaluate(m);
  }
  std::istringstream lines(slurp(dir / "log.txt"));
  std::vector<nlohmann::json> msgs;
  for (std::string line; std::getline(lines, line);) msgs.push_back(nlohmann::json::parse(line));
  REQUIRE(msgs.size() == 3);
  CHECK(msgs[0]["op"] == "describe");
  CHECK(msgs[1]["op"] == "evaluate");
  CHECK(msgs[1]["sparsities"]["conv1"] == 0.0);
  CHECK_FALSE(msgs[1].contains("masks_uri"));
  CHECK(msgs[2]["op"] == "shutdown");
  CHECK(msgs[0]["id"] != msgs[1]["id"]);
}

TEST_CASE("stale responses with other ids are ignored") {
  const auto m = load_model(tiny_fixture() / "model");
  ExternalEvaluator remote(m, mock_options("--noise-line"));
  CHECK(remote.evaluate(m).samples > 0);
}

TEST_CASE("describe mismatches are protocol errors") {
  const auto m = load_model(tiny_fixture() / "model");
  CHECK_THROWS_AS(ExternalEvaluator(m, mock_options("--bad-describe")), ProtocolError);
}

TEST_CASE("missing capabilities raise CapabilityError") {
  auto m = load_model(tiny_fixture() / "model");
  ExternalEvaluator remote(m, mock_options("--no-caps"));
  CHECK_THROWS_AS(remote.train(m, {}), CapabilityError);
  CHECK_THROWS_AS(remote.gradients(m, "fc1"), CapabilityError);
  CHECK_THROWS_AS(remote.activations(m, Split::test), CapabilityError);
}

TEST_CASE("a timed-out call is retried once under a new id") {
  const auto m = load_model(tiny_fixture() / "model");
  testing::TempDir dir("retry");
  ExternalEvaluator remote(m, mock_options("--hang-once evaluate --log " + (dir / "log.txt").string(),
                                           std::chrono::milliseconds(1500)));
  CHECK(remote.evaluate(m).samples > 0);
  CHECK(remote.alive());
  std::istringstream lines(slurp(dir / "log.txt"));
  std::vector<nlohmann::json> evals;
  for (std::string line; std::getline(lines, line);) {
    auto j = nlohmann::json::parse(line);
    if (j["op"] == "evaluate") evals.push_back(j);
  }
  REQUIRE(evals.size() == 2);
  CHECK(evals[0]["id"] != evals[1]["id"]);
  CHECK(evals[0]["sparsities"] == evals[1]["sparsities"]);
}

TEST_CASE("a hung evaluator aborts the session after the retry") {
  const auto m = load_model(tiny_fixture() / "model");
  ExternalEvaluator remote(m, mock_options("--hang evaluate", std::chrono::milliseconds(300)));
  const auto t0 = std::chrono::steady_clock::now();
  CHECK_THROWS_AS(remote.evaluate(m), EvaluatorError);
  CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(5));
  CHECK_FALSE(remote.alive());
  CHECK_THROWS_AS(remote.evaluate(m), EvaluatorError);
}

TEST_CASE("a crashing command is an evaluator error") {
  const auto m = load_model(tiny_fixture() / "model");
  ExternalOptions o;
  o.command = "exit 3";
  o.timeout = std::chrono::seconds(5);
  CHECK_THROWS_AS(ExternalEvaluator(m, o), EvaluatorError);
}

TEST_CASE("evaluation replies are range-checked") {
  CHECK(evaluation_from_json({{"top1", 50.0}, {"top5", 70.0}}).top1 == 50.0);
  CHECK_THROWS_AS(evaluation_from_json({{"top1", 150.0}}), ProtocolError);
  CHECK_THROWS_AS(evaluation_from_json({{"top1", 60.0}, {"top5", 50.0}}), ProtocolError);
  CHECK_THROWS_AS(evaluation_from_json({{"acc", 1}}), ProtocolError);
}

TEST_CASE("search driven through the external evaluator matches the built-in trace") {
  const auto& dir = tiny_fixture();
  SearchConfig cfg;
  cfg.iterations = 8;
  cfg.seed = 3;
  auto m1 = load_model(dir / "model");
  BuiltinEvaluator local(load_data_bundle(dir / "data"), 11);
  const auto r1 = run_search(m1, local, cfg);
  auto m2 = load_model(dir / "model");
  ExternalEvaluator remote(m2, mock_options());
  const auto r2 = run_search(m2, remote, cfg);
  CHECK(r1.trace == r2.trace);
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("configuration layering and validation") {
  auto cfg = default_run_config();
  apply_override(cfg, "search.iterations=7");
  CHECK(cfg["search"]["iterations"] == 7);
  apply_override(cfg, "search.policy=constant");
  CHECK(cfg["search"]["policy"] == "constant");
  CHECK_THROWS_AS(apply_override(cfg, "search.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "search.iterations=\"x\""), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "search=1"), ConfigError);
  CHECK_THROWS_AS(merge_config(cfg, {{"bogus", 1}}), ConfigError);

  testing::TempDir dir("cli-config");
  std::ofstream(dir / "c.json") << R"({"search": {"iterations": 3, "sa": {"enabled": false}}, "seed": 4})";
  const auto r = resolve_config({"prune-search", "--config", (dir / "c.json").string(), "--search.iterations", "9",
                                 "--retrain.masking=false"});
  CHECK(r["command"] == "prune-search");
  CHECK(r["search"]["iterations"] == 9);
  CHECK(r["search"]["sa"]["enabled"] == false);
  CHECK(r["seed"] == 4);
  CHECK(r["retrain"]["masking"] == false);
}

TEST_CASE("exit codes distinguish failure classes") {
  testing::TempDir dir("cli-exit");
  const auto out = (dir / "o").string();
  CHECK(run_cli({"prune-search", "--bogus.key=1"}) == kExitConfig);
  CHECK(run_cli({"frobnicate", "--output", out}) == kExitConfig);
  CHECK(run_cli({"eval", "--model", (dir / "none").string(), "--data", (dir / "none").string(), "--output", out}) ==
        kExitModel);
  CHECK(run_cli({"eval", "--model", (tiny_fixture() / "model").string(), "--data",
                 (tiny_fixture() / "data").string(), "--output", out, "--evaluator.kind=external",
                 "--evaluator.command=exit 1"}) == kExitEvaluator);
}

TEST_CASE("prune-search writes its artifacts and resumes to the same trace") {
  testing::TempDir dir("cli-search");
  const std::vector<std::string> base{"--model", (tiny_fixture() / "model").string(), "--data",
                                      (tiny_fixture() / "data").string(), "--seed", "5"};
  auto args = [&](const std::string& out, std::size_t iters, bool resume) {
    std::vector<std::string> a{"prune-search"};
    a.insert(a.end(), base.begin(), base.end());
    a.insert(a.end(), {"--output", (dir / out).string(), "--search.iterations", std::to_string(iters)});
    if (resume) a.push_back("--resume");
    return a;
  };
  REQUIRE(run_cli(args("full", 12, false)) == kExitOk);
  for (const char* f : {"trace.csv", "report.json", "checkpoint.json", "final_masks.bin"})
    CHECK(fs::exists(dir / "full" / f));
  const auto report = nlohmann::json::parse(slurp(dir / "full" / "report.json"));
  CHECK(report["iterations"] == 12);
  CHECK(report["accuracy_drop"].get<double>() <= 1.0);

  // A shorter run then a resume with more iterations replays the long one.
  REQUIRE(run_cli(args("part", 5, false)) == kExitOk);
  REQUIRE(run_cli(args("part", 12, true)) == kExitOk);
  CHECK(slurp(dir / "part" / "trace.csv") == slurp(dir / "full" / "trace.csv"));

  // The saved masks reproduce the reported accuracy.
  REQUIRE(run_cli({"eval", "--model", (tiny_fixture() / "model").string(), "--data", (tiny_fixture() / "data").string(),
                   "--masks", (dir / "full" / "final_masks.bin").string(), "--output", (dir / "eval").string()}) ==
          kExitOk);
  const auto ev = nlohmann::json::parse(slurp(dir / "eval" / "report.json"));
  CHECK(ev["top1"] == report["final_top1"]);
}

TEST_CASE("PRUNEKIT_OUT supplies the default output directory") {
  testing::TempDir dir("cli-env");
  ::setenv(kOutputDirEnv, (dir / "env-out").string().c_str(), 1);
  const int rc = run_cli({"eval", "--model", (tiny_fixture() / "model").string(), "--data",
                          (tiny_fixture() / "data").string()});
  ::unsetenv(kOutputDirEnv);
  CHECK(rc == kExitOk);
  CHECK(fs::exists(dir / "env-out" / "report.json"));
}

TEST_CASE("retrain, structural and filter commands run end to end") {
  testing::TempDir dir("cli-modes");
  const std::vector<std::string> base{"--model", (tiny_fixture() / "model").string(), "--data",
                                      (tiny_fixture() / "data").string()};
  auto run = [&](std::vector<std::string> a) {
    a.insert(a.end(), base.begin(), base.end());
    return run_cli(a);
  };
  CHECK(run({"prune-retrain", "--retrain.mode=progressive", "--retrain.epochs=2", "--output", (dir / "p").string()}) ==
        kExitOk);
  const auto rep = nlohmann::json::parse(slurp(dir / "p" / "report.json"));
  CHECK(rep["weighted_sparsity"].get<double>() == doctest::Approx(0.12).epsilon(0.01));
  CHECK(fs::exists(dir / "p" / "final_model" / "manifest.json"));
  CHECK(run({"prune-retrain", "--retrain.mode=boosted", "--retrain.epochs=1", "--boost.priority_list=[\"fc1\"]",
             "--boost.steps=2", "--output", (dir / "b").string()}) == kExitOk);
  CHECK(run({"prune-retrain", "--retrain.mode=gradient_informed", "--retrain.epochs=2", "--output",
             (dir / "g").string()}) == kExitOk);
  CHECK(run({"prune-structural", "--structural.max_iterations=1", "--structural.drop_budget=100", "--output",
             (dir / "s").string()}) == kExitOk);
  CHECK(run({"analyze-filters", "--output", (dir / "f").string()}) == kExitOk);
  CHECK(fs::exists(dir / "f" / "filters.json"));
  CHECK(run({"prune-retrain", "--retrain.mode=boosted", "--boost.reduction_factor=2", "--output",
             (dir / "x").string()}) == kExitConfig);
}

}  // TEST_SUITE
