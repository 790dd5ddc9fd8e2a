#include "prunekit/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "prunekit/errors.hpp"
#include "prunekit/evaluator.hpp"
#include "prunekit/external.hpp"
#include "prunekit/filter_analysis.hpp"
#include "prunekit/fixture.hpp"
#include "prunekit/model_store.hpp"
#include "prunekit/retrain.hpp"
#include "prunekit/search.hpp"
#include "prunekit/structural.hpp"

namespace prunekit {

namespace fs = std::filesystem;
using nlohmann::json;

json default_run_config() {
  const SearchConfig sc;
  const RetrainPolicy rp;
  const BoostSchedule bs;
  const GradientInformedConfig gc;
  const StructuralConfig st;
  const RefineOptions ro;
  return {
      {"command", nullptr},
      {"model", nullptr},
      {"data", nullptr},
      {"masks", nullptr},
      {"output", nullptr},
      {"seed", 0},
      {"threads", 0},
      {"resume", false},
      {"validation_fraction", 0.2},
      {"evaluator", {{"kind", "builtin"}, {"command", nullptr}, {"timeout_ms", 600000}}},
      {"search",
       {{"iterations", sc.iterations},
        {"drop_threshold", sc.drop_threshold},
        {"layers_per_turn", sc.layers_per_turn},
        {"max_layer_sparsity", sc.max_layer_sparsity},
        {"policy", to_string(sc.policy)},
        {"priority", json::array()},
        {"priority_drop", sc.priority_drop},
        {"ranked_capacity", sc.ranked_capacity},
        {"eval_split", to_string(sc.eval_split)},
        {"checkpoint_every", 1},
        {"sa",
         {{"enabled", sc.sa.enabled},
          {"t0", sc.sa.t0},
          {"alpha", sc.sa.alpha},
          {"restart_probability", sc.sa.restart_probability}}},
        {"sensitivity",
         {{"window", sc.sensitivity.window},
          {"gain", sc.sensitivity.gain},
          {"initial_step", sc.sensitivity.initial_step},
          {"step_min", sc.sensitivity.step_min},
          {"step_max", sc.sensitivity.step_max}}}}},
      {"retrain",
       {{"mode", to_string(rp.mode)},
        {"masking", rp.masking},
        {"epochs", rp.epochs},
        {"learning_rate", rp.learning_rate},
        {"momentum", rp.momentum},
        {"batch_size", rp.batch_size},
        {"progressive_start", rp.progressive_start},
        {"progressive_increment", rp.progressive_increment},
        {"checkpoint_every", 1}}},
      {"boost",
       {{"priority_list", json::array()},
        {"scales", bs.scales},
        {"steps", bs.steps},
        {"step_value", bs.step_value},
        {"reduction_factor", bs.reduction_factor},
        {"threshold0", bs.threshold0},
        {"threshold1", bs.threshold1}}},
      {"gradient",
       {{"drop_threshold", gc.drop_threshold},
        {"init_sparsity", gc.init_sparsity},
        {"init_step", gc.init_step},
        {"alpha", gc.alpha},
        {"policy", to_string(gc.policy)},
        {"eval_split", to_string(gc.eval_split)},
        {"restore_best", gc.restore_best}}},
      {"structural",
       {{"fraction_per_iter", st.fraction_per_iter},
        {"drop_budget", st.drop_budget},
        {"retrain_epochs", st.retrain_epochs},
        {"max_iterations", st.max_iterations},
        {"eval_split", to_string(st.eval_split)}}},
      {"filters",
       {{"tau", ro.tau},
        {"budget", ro.budget},
        {"split", to_string(ro.split)},
        {"include_output_layer", ro.include_output_layer}}},
      {"fixture", to_json(FixtureSpec{})},
  };
}

namespace {

bool compatible(const json& def, const json& v) {
  if (def.is_null()) return v.is_null() || v.is_string();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer() && (def.is_number_unsigned() ? v.get<double>() >= 0 : true);
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return false;
}

}  // namespace

void merge_config(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("configuration " + (prefix.empty() ? "root" : prefix) + " must be an object");
  for (const auto& [k, v] : patch.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (!base.contains(k)) throw ConfigError("unknown configuration key: " + key);
    auto& slot = base[k];
    if (slot.is_object()) {
      merge_config(slot, v, key);
    } else {
      if (!compatible(slot, v)) throw ConfigError("configuration key " + key + " has the wrong type");
      slot = v;
    }
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  json* slot = &config;
  std::string walked;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    walked += (walked.empty() ? "" : ".") + part;
    if (!slot->is_object() || !slot->contains(part)) throw ConfigError("unknown configuration key: " + walked);
    slot = &(*slot)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (slot->is_object()) throw ConfigError("configuration key " + key + " is a section, not a value");

  json value;
  if (slot->is_null() || slot->is_string()) {
    value = text;
  } else if (slot->is_array()) {
    value = json::parse(text, nullptr, false);
    if (!value.is_array()) {
      value = json::array();
      std::size_t s = 0;
      while (s <= text.size() && !text.empty()) {
        const auto c = text.find(',', s);
        value.push_back(text.substr(s, c == std::string::npos ? std::string::npos : c - s));
        if (c == std::string::npos) break;
        s = c + 1;
      }
    }
  } else {
    value = json::parse(text, nullptr, false);
    if (value.is_discarded()) throw ConfigError("cannot parse value for " + key + ": " + text);
  }
  if (!compatible(*slot, value)) throw ConfigError("configuration key " + key + " has the wrong type");
  *slot = std::move(value);
}

json resolve_config(const std::vector<std::string>& args) {
  CLI::App app{"prunekit: sparsity search and retraining for small CNNs"};
  app.allow_extras();
  std::string command;
  std::string config_file;
  bool resume = false;
  app.add_option("command", command,
                 "prune-search | prune-retrain | prune-structural | analyze-filters | eval | make-fixture");
  app.add_option("--config", config_file, "JSON configuration file");
  app.add_flag("--resume", resume, "continue from the checkpoint in the output directory");
  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help() << "\nAny configuration key can be set as --section.key=value.\n";
    return json{{"__help__", true}};
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }

  json config = default_run_config();
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw ConfigError("cannot read config file " + config_file);
    json file = json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config file is not valid JSON: " + config_file);
    merge_config(config, file);
  }

  const auto extras = app.remaining();
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0) throw ConfigError("unexpected argument: " + tok);
    std::string body = tok.substr(2);
    if (body.find('=') == std::string::npos) {
      if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0)
        body += "=" + extras[++i];
      else
        body += "=true";
    }
    apply_override(config, body);
  }
  if (!command.empty()) config["command"] = command;
  if (resume) config["resume"] = true;
  if (config["command"].is_null()) throw ConfigError("no command given");
  return config;
}

// ---------------------------------------------------------------------------
// Command execution

namespace {

Split parse_split(const std::string& s) {
  for (auto x : {Split::train, Split::validation, Split::test})
    if (s == to_string(x)) return x;
  throw ConfigError("unknown split: " + s);
}

std::string require_path(const json& cfg, const char* key) {
  if (cfg[key].is_null() || cfg[key].get<std::string>().empty())
    throw ConfigError(std::string("missing required setting: ") + key);
  return cfg[key].get<std::string>();
}

fs::path output_dir(const json& cfg) {
  if (!cfg["output"].is_null()) return cfg["output"].get<std::string>();
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return "prunekit-out";
}

SearchConfig search_config(const json& cfg, const fs::path& out) {
  const auto& s = cfg["search"];
  SearchConfig c;
  c.iterations = s["iterations"];
  c.drop_threshold = s["drop_threshold"];
  c.layers_per_turn = s["layers_per_turn"];
  c.max_layer_sparsity = s["max_layer_sparsity"];
  c.policy = parse_policy_mode(s["policy"]);
  c.priority = s["priority"].get<std::vector<std::string>>();
  c.priority_drop = s["priority_drop"];
  c.ranked_capacity = s["ranked_capacity"];
  c.eval_split = parse_split(s["eval_split"]);
  c.checkpoint_every = s["checkpoint_every"];
  c.sa.enabled = s["sa"]["enabled"];
  c.sa.t0 = s["sa"]["t0"];
  c.sa.alpha = s["sa"]["alpha"];
  c.sa.restart_probability = s["sa"]["restart_probability"];
  c.sensitivity.window = s["sensitivity"]["window"];
  c.sensitivity.gain = s["sensitivity"]["gain"];
  c.sensitivity.initial_step = s["sensitivity"]["initial_step"];
  c.sensitivity.step_min = s["sensitivity"]["step_min"];
  c.sensitivity.step_max = s["sensitivity"]["step_max"];
  c.seed = cfg["seed"];
  c.checkpoint_path = out / "checkpoint.json";
  c.trace_path = out / "trace.csv";
  return c;
}

RetrainPolicy retrain_policy(const json& cfg) {
  const auto& r = cfg["retrain"];
  RetrainPolicy p;
  p.mode = parse_retrain_mode(r["mode"]);
  p.masking = r["masking"];
  p.epochs = r["epochs"];
  p.learning_rate = r["learning_rate"];
  p.momentum = r["momentum"];
  p.batch_size = r["batch_size"];
  p.progressive_start = r["progressive_start"];
  p.progressive_increment = r["progressive_increment"];
  p.seed = cfg["seed"];
  if (p.mode == RetrainMode::simple) p.masking = false;
  if (p.mode == RetrainMode::simple_masked) p.masking = true;
  return p;
}

std::unique_ptr<Evaluator> make_evaluator(const json& cfg, const ModelSnapshot& model, const fs::path& out) {
  const auto& e = cfg["evaluator"];
  const std::string kind = e["kind"];
  if (kind == "builtin") {
    const auto data = load_data_bundle(require_path(cfg, "data"), cfg["validation_fraction"].get<double>());
    return std::make_unique<BuiltinEvaluator>(data, derive_seed(cfg["seed"].get<std::uint64_t>(), "evaluator"),
                                              cfg["threads"].get<unsigned>());
  }
  if (kind == "external") {
    if (e["command"].is_null()) throw ConfigError("evaluator.command is required for an external evaluator");
    ExternalOptions o;
    o.command = e["command"];
    o.timeout = std::chrono::milliseconds(e["timeout_ms"].get<std::int64_t>());
    o.work_dir = out / "ipc";
    return std::make_unique<ExternalEvaluator>(model, o);
  }
  throw ConfigError("evaluator.kind must be builtin or external");
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream o(path);
  o << j.dump(2) << '\n';
  if (!o) throw Error("cannot write " + path.string());
}

json layer_sparsity(const ModelSnapshot& m) {
  json j = json::object();
  for (std::size_t i = 0; i < m.layers.size(); ++i) j[m.layers[i].name()] = m.masks[i].sparsity();
  return j;
}

json top5_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void finish_report(json& report, const std::string& command, const ModelSnapshot& model,
                   std::chrono::steady_clock::time_point t0) {
  report["command"] = command;
  report["weighted_sparsity"] = weighted_sparsity(model);
  report["layer_sparsity"] = layer_sparsity(model);
  report["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_make_fixture(const json& cfg) {
  const FixtureSpec spec = fixture_spec_from_json(cfg["fixture"]);
  validate(spec);
  const fs::path out = output_dir(cfg);
  const auto f = make_fixture(spec, out);
  std::cout << "fixture written to " << out.string() << ": top1 " << f.baseline.top1 << "\n";
  return kExitOk;
}

int run_command(const json& cfg) {
  const std::string command = cfg["command"];
  static const std::vector<std::string> known{"prune-search", "prune-retrain", "prune-structural",
                                              "analyze-filters", "eval", "make-fixture"};
  if (std::find(known.begin(), known.end(), command) == known.end())
    throw ConfigError("unknown command: " + command);
  if (command == "make-fixture") return cmd_make_fixture(cfg);

  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = output_dir(cfg);
  const bool resume = cfg["resume"];

  // Settings are parsed up front so that a bad value fails before any output.
  const auto search_cfg = search_config(cfg, out);
  const auto policy = retrain_policy(cfg);
  BoostSchedule boost;
  boost.priority_list = cfg["boost"]["priority_list"].get<std::vector<std::string>>();
  boost.scales = cfg["boost"]["scales"];
  boost.steps = cfg["boost"]["steps"];
  boost.step_value = cfg["boost"]["step_value"];
  boost.reduction_factor = cfg["boost"]["reduction_factor"];
  boost.threshold0 = cfg["boost"]["threshold0"];
  boost.threshold1 = cfg["boost"]["threshold1"];
  GradientInformedConfig grad;
  grad.drop_threshold = cfg["gradient"]["drop_threshold"];
  grad.init_sparsity = cfg["gradient"]["init_sparsity"];
  grad.init_step = cfg["gradient"]["init_step"];
  grad.alpha = cfg["gradient"]["alpha"];
  grad.policy = parse_policy_mode(cfg["gradient"]["policy"]);
  grad.eval_split = parse_split(cfg["gradient"]["eval_split"]);
  grad.restore_best = cfg["gradient"]["restore_best"];
  StructuralConfig structural;
  structural.fraction_per_iter = cfg["structural"]["fraction_per_iter"];
  structural.drop_budget = cfg["structural"]["drop_budget"];
  structural.retrain_epochs = cfg["structural"]["retrain_epochs"];
  structural.max_iterations = cfg["structural"]["max_iterations"];
  structural.eval_split = parse_split(cfg["structural"]["eval_split"]);
  RefineOptions refine;
  refine.tau = cfg["filters"]["tau"];
  refine.budget = cfg["filters"]["budget"];
  refine.split = parse_split(cfg["filters"]["split"]);
  refine.include_output_layer = cfg["filters"]["include_output_layer"];
  if (command == "prune-retrain" && policy.mode == RetrainMode::boosted) boost.validate();

  const fs::path checkpoint = out / "checkpoint.json";
  ModelSnapshot model;
  std::optional<json> resume_state;
  if (resume && command != "eval" && command != "analyze-filters") {
    if (command == "prune-search") {
      model = load_model(require_path(cfg, "model"));
      resume_state = load_checkpoint(checkpoint);
    } else {
      auto rc = load_run_checkpoint(checkpoint);
      model = std::move(rc.model);
      resume_state = std::move(rc.state);
    }
  } else {
    model = load_model(require_path(cfg, "model"));
    if (!cfg["masks"].is_null()) install_masks(model, cfg["masks"].get<std::string>());
  }
  auto evaluator = make_evaluator(cfg, model, out);
  fs::create_directories(out);

  json report;
  if (command == "eval") {
    const auto r = evaluator->evaluate(model, Split::test);
    report = {{"top1", r.top1}, {"top5", top5_json(r.top5)}, {"samples", r.samples}};
    finish_report(report, command, model, t0);
    write_json(out / "report.json", report);
    std::cout << "top1 " << format_double(r.top1) << "\n";
    return kExitOk;
  }

  if (command == "prune-search") {
    SearchResult r;
    if (resume_state) {
      auto s = PruningSearch::resume(model, *evaluator, search_cfg, *resume_state);
      r = s.run();
    } else {
      r = run_search(model, *evaluator, search_cfg);
    }
    report = to_json(r, model.layer_names());
    report["final_top1"] = r.best.top1;
    report["baseline_top5"] = top5_json(r.baseline_top5);
    report["final_top5"] = top5_json(evaluator->evaluate(model, search_cfg.eval_split).top5);
  } else if (command == "prune-retrain") {
    RunControl control;
    control.checkpoint_path = checkpoint;
    control.trace_path = out / "trace.csv";
    control.checkpoint_every = cfg["retrain"]["checkpoint_every"];
    control.resume_state = resume_state;
    RetrainLog log;
    switch (policy.mode) {
      case RetrainMode::simple:
      case RetrainMode::simple_masked: log = run_simple(model, *evaluator, policy, control); break;
      case RetrainMode::progressive:
        log = run_progressive(model, *evaluator, policy.progressive_start, policy.progressive_increment, policy,
                              control);
        break;
      case RetrainMode::boosted: log = run_boosted(model, *evaluator, boost, policy, control); break;
      case RetrainMode::gradient_informed:
        log = run_gradient_informed(model, *evaluator, grad, policy, control);
        break;
    }
    report = to_json(log, model);
    report["mode"] = to_string(policy.mode);
    save_snapshot(model, out / "final_model");
  } else if (command == "prune-structural") {
    RunControl control;
    control.checkpoint_path = checkpoint;
    control.trace_path = out / "trace.csv";
    control.resume_state = resume_state;
    const auto r = run_structural(model, *evaluator, structural, policy, control);
    report = to_json(r);
    save_snapshot(model, out / "final_model");
  } else {  // analyze-filters
    const auto contributions = compute_filter_contributions(model, *evaluator, refine.split);
    const auto profiles = compute_class_profiles(model, *evaluator, refine.split);
    write_json(out / "filters.json", {{"contributions", to_json(contributions)}, {"class_profiles", to_json(profiles)}});
    const auto r = refine_pruning(model, *evaluator, contributions, profiles, refine);
    report = to_json(r);
    report["final_top1"] = r.top1_after;
  }

  save_masks(model.masks, out / "final_masks.bin");
  finish_report(report, command, model, t0);
  write_json(out / "report.json", report);
  std::cout << command << ": weighted sparsity " << format_double(report["weighted_sparsity"].get<double>())
            << ", report " << (out / "report.json").string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    const json cfg = resolve_config(args);
    if (cfg.contains("__help__")) return kExitOk;
    return run_command(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const LoadError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kExitModel;
  } catch (const UnknownLayerError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kExitModel;
  } catch (const EvaluatorError& e) {
    std::cerr << "evaluator error: " << e.what() << "\n";
    return kExitEvaluator;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}

}  // namespace prunekit
