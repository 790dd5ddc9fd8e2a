#include "prunekit/retrain.hpp"

#include <algorithm>
#include <cmath>

#include "prunekit/errors.hpp"
#include "prunekit/pruning_ops.hpp"
#include "prunekit/trace.hpp"

namespace prunekit {

namespace fs = std::filesystem;
using nlohmann::json;

void apply_gradient_mask(std::span<float> gradients, const PruneMask& mask) {
  if (gradients.size() != mask.size()) throw ContractError("gradient and mask lengths differ");
  for (std::size_t i = 0; i < gradients.size(); ++i)
    if (!mask.kept(i)) gradients[i] = 0.0f;
}

std::vector<double> apply_gradient_mask(std::span<const double> gradients, const PruneMask& mask) {
  if (gradients.size() != mask.size()) throw ContractError("gradient and mask lengths differ");
  std::vector<double> out(gradients.begin(), gradients.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask.kept(i)) out[i] = 0.0;
  return out;
}

const char* to_string(RetrainMode mode) noexcept {
  switch (mode) {
    case RetrainMode::simple: return "simple";
    case RetrainMode::simple_masked: return "simple_masked";
    case RetrainMode::progressive: return "progressive";
    case RetrainMode::boosted: return "boosted";
    case RetrainMode::gradient_informed: return "gradient_informed";
  }
  return "?";
}

RetrainMode parse_retrain_mode(const std::string& text) {
  for (auto m : {RetrainMode::simple, RetrainMode::simple_masked, RetrainMode::progressive,
                 RetrainMode::boosted, RetrainMode::gradient_informed})
    if (text == to_string(m)) return m;
  throw ConfigError("unknown retrain mode: " + text);
}

TrainOptions RetrainPolicy::epoch_options(std::size_t epoch) const {
  TrainOptions o;
  o.epochs = 1;
  o.learning_rate = learning_rate;
  o.momentum = momentum;
  o.batch_size = batch_size;
  o.masking = masking;
  o.seed = derive_seed(seed, "retrain-epoch#" + std::to_string(epoch));
  return o;
}

double BoostSchedule::step_for_scale(std::size_t scale) const {
  return step_value * std::pow(reduction_factor, static_cast<double>(scale));
}

void BoostSchedule::validate() const {
  if (!(step_value > 0.0 && step_value <= 1.0)) throw ConfigError("boost step_value must be in (0, 1]");
  if (!(reduction_factor > 0.0 && reduction_factor < 1.0))
    throw ConfigError("boost reduction_factor must be in (0, 1)");
  if (scales == 0 || steps == 0) throw ConfigError("boost scales and steps must be positive");
  if (threshold1 == 0) throw ConfigError("boost threshold1 must be positive");
  if (!(threshold0 >= 0.0)) throw ConfigError("boost threshold0 must be >= 0");
}

bool BoostSchedule::record_skip(const std::string& layer) {
  const auto count = ++skip_counts[layer];
  if (count >= threshold1) return permanently_skipped.insert(layer).second;
  return false;
}

const std::vector<std::string>& retrain_trace_header() {
  static const std::vector<std::string> header{"epoch", "layer", "attempt", "step",
                                               "drop",  "action", "sparsity", "top1"};
  return header;
}

std::vector<std::string> to_fields(const RetrainLogRow& r) {
  return {std::to_string(r.epoch), r.layer, std::to_string(r.attempt), format_double(r.step),
          format_double(r.drop), r.action, format_double(r.sparsity), format_double(r.top1)};
}

RetrainLogRow retrain_row_from_fields(const std::vector<std::string>& f) {
  if (f.size() != retrain_trace_header().size()) throw LoadError(LoadErrorKind::corrupt, "bad retrain row");
  RetrainLogRow r;
  r.epoch = std::stoull(f[0]);
  r.layer = f[1];
  r.attempt = std::stoull(f[2]);
  r.step = std::stod(f[3]);
  r.drop = std::stod(f[4]);
  r.action = f[5];
  r.sparsity = std::stod(f[6]);
  r.top1 = std::stod(f[7]);
  return r;
}

json to_json(const RetrainLog& log, const ModelSnapshot& model) {
  json per_layer = json::object();
  for (std::size_t i = 0; i < model.layers.size(); ++i) per_layer[model.layers[i].name()] = model.masks[i].sparsity();
  json out{{"baseline_top1", log.baseline_top1},
           {"final_top1", log.final_result.top1},
           {"accuracy_drop", log.baseline_top1 - log.final_result.top1},
           {"weighted_sparsity", weighted_sparsity(model)},
           {"layer_sparsity", per_layer},
           {"epochs", log.epochs_run},
           {"epoch_loss", log.epoch_loss},
           {"pruned_set_monotone", log.pruned_set_monotone},
           {"reverse_events", log.reverse_events}};
  out["baseline_top5"] = log.baseline_top5 ? json(*log.baseline_top5) : json(nullptr);
  out["final_top5"] = log.final_result.top5 ? json(*log.final_result.top5) : json(nullptr);
  return out;
}

namespace {

fs::path sibling(const fs::path& checkpoint, const char* suffix) {
  fs::path p = checkpoint;
  p += suffix;
  return p;
}

}  // namespace

RunCheckpoint load_run_checkpoint(const fs::path& path) {
  RunCheckpoint c;
  c.state = load_checkpoint(path);
  c.model = load_snapshot(sibling(path, ".model"));
  return c;
}

namespace {

/// Shared bookkeeping for the epoch-driven retraining loops.
class Runner {
 public:
  Runner(ModelSnapshot& model, Evaluator& trainer, const RunControl& control, RetrainMode mode)
      : model_(model), trainer_(trainer), control_(control), mode_(mode) {
    if (control.resume_state) {
      const auto& st = *control.resume_state;
      try {
        if (st.at("kind") != "retrain" || st.at("mode") != to_string(mode))
          throw LoadError(LoadErrorKind::corrupt, "checkpoint was written by a different driver");
        start_epoch_ = st.at("epoch").get<std::size_t>();
        log_.baseline_top1 = st.at("baseline_top1").get<double>();
        if (!st.at("baseline_top5").is_null()) log_.baseline_top5 = st.at("baseline_top5").get<double>();
        for (const auto& f : st.at("rows")) log_.rows.push_back(retrain_row_from_fields(f.get<std::vector<std::string>>()));
        log_.epoch_loss = st.at("epoch_loss").get<std::vector<double>>();
        log_.pruned_set_monotone = st.at("monotone").get<bool>();
        log_.reverse_events = st.at("reverse_events").get<std::size_t>();
        driver_state_ = st.at("driver");
      } catch (const json::exception& e) {
        throw LoadError(LoadErrorKind::corrupt, std::string("malformed retrain checkpoint: ") + e.what());
      }
    }
    if (control.trace_path) {
      if (resuming())
        csv_.emplace(CsvTrace::resume(*control.trace_path, retrain_trace_header(), log_.rows.size()));
      else
        csv_.emplace(*control.trace_path, retrain_trace_header());
    }
    prev_masks_ = model.masks;
  }

  bool resuming() const noexcept { return control_.resume_state.has_value(); }
  std::size_t start_epoch() const noexcept { return start_epoch_; }
  const json& driver_state() const noexcept { return driver_state_; }
  RetrainLog& log() noexcept { return log_; }

  /// Restarts containment tracking from the current masks.
  void rebase_masks() { prev_masks_ = model_.masks; }

  void set_baseline(const EvaluationResult& r) {
    log_.baseline_top1 = r.top1;
    log_.baseline_top5 = r.top5;
  }

  void row(RetrainLogRow r) {
    if (csv_) csv_->row(to_fields(r));
    log_.rows.push_back(std::move(r));
  }

  /// Checks containment of pruned sets since the previous observation.
  void observe_masks(bool reverse_event) {
    if (reverse_event) {
      ++log_.reverse_events;
    } else {
      for (std::size_t i = 0; i < model_.masks.size(); ++i)
        if (!prev_masks_[i].pruned_subset_of(model_.masks[i])) log_.pruned_set_monotone = false;
    }
    prev_masks_ = model_.masks;
  }

  TrainReport train(const TrainOptions& options) {
    auto rep = trainer_.train(model_, options);
    log_.epoch_loss.insert(log_.epoch_loss.end(), rep.epoch_loss.begin(), rep.epoch_loss.end());
    observe_masks(false);
    return rep;
  }

  /// Records an epoch boundary; `extra` saves driver-owned snapshots.
  void end_epoch(std::size_t epochs_done, json driver, const std::function<void(const fs::path&)>& extra = {}) {
    log_.epochs_run = epochs_done;
    boundary_ = {{"kind", "retrain"},
                 {"mode", to_string(mode_)},
                 {"epoch", epochs_done},
                 {"baseline_top1", log_.baseline_top1},
                 {"epoch_loss", log_.epoch_loss},
                 {"monotone", log_.pruned_set_monotone},
                 {"reverse_events", log_.reverse_events},
                 {"driver", std::move(driver)}};
    boundary_["baseline_top5"] = log_.baseline_top5 ? json(*log_.baseline_top5) : json(nullptr);
    json rows = json::array();
    for (const auto& r : log_.rows) rows.push_back(to_fields(r));
    boundary_["rows"] = std::move(rows);
    boundary_model_ = model_;
    boundary_extra_ = extra;
    if (control_.checkpoint_path && control_.checkpoint_every > 0 && epochs_done % control_.checkpoint_every == 0)
      write_boundary();
    if (control_.on_epoch) control_.on_epoch(epochs_done);
  }

  void write_boundary() const {
    if (!control_.checkpoint_path || boundary_.is_null()) return;
    save_snapshot(*boundary_model_, sibling(*control_.checkpoint_path, ".model"));
    if (boundary_extra_) boundary_extra_(*control_.checkpoint_path);
    save_checkpoint(boundary_, *control_.checkpoint_path);
  }

  /// Runs the epoch loop; trainer failures persist the last boundary.
  template <class F>
  void guarded(F&& body) {
    try {
      body();
    } catch (const EvaluatorError&) {
      write_boundary();
      throw;
    }
    write_boundary();
  }

  void finish(const EvaluationResult& final_result) { log_.final_result = final_result; }

 private:
  ModelSnapshot& model_;
  Evaluator& trainer_;
  const RunControl& control_;
  RetrainMode mode_;
  RetrainLog log_;
  std::size_t start_epoch_ = 0;
  json driver_state_;
  std::optional<CsvTrace> csv_;
  std::vector<PruneMask> prev_masks_;
  json boundary_;
  std::optional<ModelSnapshot> boundary_model_;
  std::function<void(const fs::path&)> boundary_extra_;
};

void require_retrain(const Evaluator& trainer) {
  if (!trainer.capabilities().supports_retrain) throw CapabilityError("evaluator cannot retrain");
}

EvaluationResult eval_after_train(Evaluator& trainer, const ModelSnapshot& model, const TrainReport& rep,
                                  Split split) {
  return split == Split::test ? rep.result : trainer.evaluate(model, split);
}

}  // namespace

RetrainLog run_simple(ModelSnapshot& model, Evaluator& trainer, const RetrainPolicy& policy,
                      const RunControl& control) {
  require_retrain(trainer);
  Runner run(model, trainer, control, policy.masking ? RetrainMode::simple_masked : RetrainMode::simple);
  if (!run.resuming()) run.set_baseline(trainer.evaluate(model));
  run.guarded([&] {
    for (std::size_t e = run.start_epoch(); e < policy.epochs; ++e) {
      const auto rep = run.train(policy.epoch_options(e));
      run.row({e + 1, "*", 0, 0.0, run.log().baseline_top1 - rep.result.top1, "retrain", weighted_sparsity(model),
               rep.result.top1});
      run.end_epoch(e + 1, json::object());
    }
  });
  run.finish(trainer.evaluate(model));
  return std::move(run.log());
}

RetrainLog run_boosted(ModelSnapshot& model, Evaluator& trainer, BoostSchedule& schedule,
                       const RetrainPolicy& policy, const RunControl& control) {
  schedule.validate();
  require_retrain(trainer);
  for (const auto& name : schedule.priority_list) (void)model.index_of(name);
  Runner run(model, trainer, control, RetrainMode::boosted);

  double baseline_val = 0.0;
  if (run.resuming()) {
    const auto& d = run.driver_state();
    baseline_val = d.at("baseline_val").get<double>();
    schedule.skip_counts = d.at("skip_counts").get<std::map<std::string, std::size_t>>();
    schedule.permanently_skipped = d.at("permanently_skipped").get<std::set<std::string>>();
  } else {
    run.set_baseline(trainer.evaluate(model));
    baseline_val = trainer.evaluate(model, Split::validation).top1;
  }
  auto driver_state = [&] {
    return json{{"baseline_val", baseline_val},
                {"skip_counts", schedule.skip_counts},
                {"permanently_skipped", schedule.permanently_skipped}};
  };

  run.guarded([&] {
    for (std::size_t e = run.start_epoch(); e < policy.epochs; ++e) {
      for (const auto& name : schedule.priority_list) {
        if (schedule.permanently_skipped.count(name)) continue;
        const auto li = model.index_of(name);
        std::size_t attempt = 0;
        bool leave = false;
        for (std::size_t scale = 0; scale < schedule.scales && !leave; ++scale) {
          const double step = schedule.step_for_scale(scale);
          for (std::size_t s = 0; s < schedule.steps && !leave; ++s) {
            if (model.targets[li] >= 1.0) {
              leave = true;
              break;
            }
            ++attempt;
            const double prev_target = model.targets[li];
            PruneMask prev_mask = model.masks[li];
            const double target = prune_layer_by_step(model, name, step);
            const double val = trainer.evaluate(model, Split::validation).top1;
            const double drop = baseline_val - val;
            if (drop >= schedule.threshold0) {
              model.targets[li] = prev_target;
              model.set_mask(li, std::move(prev_mask));
              const bool permanent = schedule.record_skip(name);
              run.row({e + 1, name, attempt, step, drop, permanent ? "permanent_skip" : "reverse",
                       model.masks[li].sparsity(), val});
              run.observe_masks(true);
              leave = true;
            } else {
              run.row({e + 1, name, attempt, step, drop, "prune", target, val});
              run.observe_masks(false);
            }
          }
        }
      }
      const auto rep = run.train(policy.epoch_options(e));
      run.row({e + 1, "*", 0, 0.0, run.log().baseline_top1 - rep.result.top1, "retrain",
               weighted_sparsity(model), rep.result.top1});
      run.end_epoch(e + 1, driver_state());
    }
  });
  run.finish(trainer.evaluate(model));
  return std::move(run.log());
}

RetrainLog run_progressive(ModelSnapshot& model, Evaluator& trainer, double start, double increment,
                           const RetrainPolicy& policy, const RunControl& control) {
  if (!(start >= 0.0) || !(increment >= 0.0)) throw ConfigError("progressive start and increment must be >= 0");
  if (start + increment * static_cast<double>(policy.epochs) > 1.0 + 1e-12)
    throw ConfigError("progressive schedule exceeds sparsity 1");
  require_retrain(trainer);
  Runner run(model, trainer, control, RetrainMode::progressive);
  if (!run.resuming()) run.set_baseline(trainer.evaluate(model));

  run.guarded([&] {
    for (std::size_t e = run.start_epoch(); e < policy.epochs; ++e) {
      const double target = std::min(1.0, start + increment * static_cast<double>(e + 1));
      std::vector<double> targets(model.layers.size(), target);
      apply_sparsities(model, targets);
      run.observe_masks(false);
      run.row({e + 1, "*", 0, increment, 0.0, "set", target, 0.0});
      const auto rep = run.train(policy.epoch_options(e));
      run.row({e + 1, "*", 0, 0.0, run.log().baseline_top1 - rep.result.top1, "retrain",
               weighted_sparsity(model), rep.result.top1});
      run.end_epoch(e + 1, json::object());
    }
  });
  run.finish(trainer.evaluate(model));
  return std::move(run.log());
}

RetrainLog run_gradient_informed(ModelSnapshot& model, Evaluator& trainer, const GradientInformedConfig& config,
                                 const RetrainPolicy& policy, const RunControl& control) {
  const auto caps = trainer.capabilities();
  if (!caps.supports_gradients) throw CapabilityError("evaluator cannot report gradient statistics");
  require_retrain(trainer);
  if (!(config.alpha >= 0.0 && config.alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
  if (!(config.init_sparsity >= 0.0 && config.init_sparsity < 1.0))
    throw ConfigError("init_sparsity must be in [0, 1)");
  if (!(config.drop_threshold >= 0.0)) throw ConfigError("drop_threshold must be >= 0");

  const auto names = model.layer_names();
  const auto sizes = model.layer_sizes();
  SensitivityConfig sc = config.sensitivity;
  sc.initial_step = std::clamp(config.init_step, sc.step_min, sc.step_max);
  std::vector<SensitivityState> sens;
  for (const auto& n : names) sens.emplace_back(n, sc);
  LayerPolicy lp;
  lp.mode = config.policy;
  Rng rng(derive_seed(policy.seed, "gradient-informed"));
  double current_top1 = 0.0;
  std::optional<ModelSnapshot> best;
  double best_fitness = -1.0;
  std::vector<GradientStats> carried;

  Runner run(model, trainer, control, RetrainMode::gradient_informed);
  if (run.resuming()) {
    try {
      const auto& d = run.driver_state();
      current_top1 = d.at("current_top1").get<double>();
      best_fitness = d.at("best_fitness").get<double>();
      for (std::size_t i = 0; i < sens.size(); ++i) {
        auto w = d.at("sensitivity")[i].at("window").get<std::vector<double>>();
        sens[i].restore({w.begin(), w.end()}, d.at("sensitivity")[i].at("step").get<double>());
      }
      const auto& p = d.at("policy");
      lp.probabilities = p.at("probabilities").get<std::vector<double>>();
      lp.initialized = p.at("initialized").get<bool>();
      rng = Rng::at_position(d.at("rng").at("seed").get<std::uint64_t>(), d.at("rng").at("position").get<std::uint64_t>());
      for (const auto& g : d.at("gradients"))
        carried.push_back({g.at("layer").get<std::string>(), g.at("importance").get<std::vector<double>>()});
      if (d.at("has_best").get<bool>()) best = load_snapshot(sibling(*control.checkpoint_path, ".best"));
    } catch (const json::exception& e) {
      throw LoadError(LoadErrorKind::corrupt, std::string("malformed gradient-informed checkpoint: ") + e.what());
    }
  } else {
    model.reset_masks();
    run.rebase_masks();
    run.set_baseline(trainer.evaluate(model, config.eval_split));
    if (config.init_sparsity > 0.0) {
      apply_sparsities(model, std::vector<double>(model.layers.size(), snap_fraction(config.init_sparsity)));
      run.observe_masks(false);
      current_top1 = trainer.evaluate(model, config.eval_split).top1;
    } else {
      current_top1 = run.log().baseline_top1;
    }
    if (run.log().baseline_top1 - current_top1 <= config.drop_threshold) {
      best = model;
      best_fitness = weighted_sparsity(model);
    }
  }
  const double baseline = run.log().baseline_top1;

  auto driver_state = [&] {
    json s = json::array();
    for (const auto& st : sens)
      s.push_back({{"window", std::vector<double>(st.window().begin(), st.window().end())}, {"step", st.step()}});
    json grads = json::array();
    if (control.checkpoint_path)
      for (const auto& n : names) {
        const auto g = trainer.gradients(model, n);
        grads.push_back({{"layer", g.layer_name}, {"importance", g.per_weight_importance}});
      }
    return json{{"current_top1", current_top1},
                {"best_fitness", best_fitness},
                {"has_best", best.has_value()},
                {"sensitivity", s},
                {"policy", {{"probabilities", lp.probabilities}, {"initialized", lp.initialized}}},
                {"rng", {{"seed", rng.seed()}, {"position", rng.position()}}},
                {"gradients", grads}};
  };
  auto save_best = [&](const fs::path& cp) {
    if (best) save_snapshot(*best, sibling(cp, ".best"));
  };

  run.guarded([&] {
    for (std::size_t e = run.start_epoch(); e < policy.epochs; ++e) {
      std::vector<double> sv(sens.size());
      for (std::size_t i = 0; i < sens.size(); ++i) sv[i] = sens[i].sensitivity();
      const auto sparsities = model.mask_sparsities();
      update_policy(lp, sizes, sv, config.drop_threshold, sparsities, baseline - current_top1);
      const bool reverse = baseline - current_top1 > config.drop_threshold;
      const std::size_t li = sample_layers(lp.probabilities, rng, 1).front();

      GradientStats stats;
      if (!carried.empty()) {
        stats = carried[li];
        carried.clear();
      } else {
        stats = trainer.gradients(model, names[li]);
      }
      const double step = sens[li].step();
      const double cur = snap_fraction(model.targets[li]);
      const double target = reverse ? std::max(0.0, cur - snap_fraction(step)) : std::min(1.0, cur + snap_fraction(step));
      model.targets[li] = target;
      model.set_mask(li, gradient_informed_mask(model.layers[li], target, stats, config.alpha));
      run.observe_masks(reverse);

      const double pruned_top1 = trainer.evaluate(model, config.eval_split).top1;
      sens[li].record_impact(baseline, pruned_top1);
      sens[li].update_step(config.drop_threshold);
      run.row({e + 1, names[li], 1, step, baseline - pruned_top1, reverse ? "reverse" : "prune",
               model.masks[li].sparsity(), pruned_top1});

      const auto rep = run.train(policy.epoch_options(e));
      current_top1 = eval_after_train(trainer, model, rep, config.eval_split).top1;
      run.row({e + 1, "*", 0, 0.0, baseline - current_top1, "retrain", weighted_sparsity(model), current_top1});

      const double fitness = weighted_sparsity(model);
      if (baseline - current_top1 <= config.drop_threshold && fitness > best_fitness) {
        best = model;
        best_fitness = fitness;
      }
      run.end_epoch(e + 1, driver_state(), save_best);
    }
  });

  if (config.restore_best && baseline - current_top1 > config.drop_threshold && best) {
    model = *best;
    current_top1 = trainer.evaluate(model, config.eval_split).top1;
    run.row({run.log().epochs_run, "*", 0, 0.0, baseline - current_top1, "restore_best", weighted_sparsity(model),
             current_top1});
  }
  run.finish(trainer.evaluate(model, config.eval_split));
  return std::move(run.log());
}

}  // namespace prunekit
