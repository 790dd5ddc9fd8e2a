#include "prunekit/search.hpp"

#include <algorithm>
#include <cmath>

#include "prunekit/errors.hpp"
#include "prunekit/pruning_ops.hpp"

namespace prunekit {

using nlohmann::json;

RankedList::RankedList(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("ranked list capacity must be positive");
}

bool RankedList::update(const SparsityGenotype& g) {
  if (!g.feasible) return false;
  for (const auto& e : entries_)
    if (e.sparsities == g.sparsities) return false;
  if (entries_.size() == capacity_ && !(g.fitness > entries_.back().fitness)) return false;
  auto pos = std::find_if(entries_.begin(), entries_.end(),
                          [&](const SparsityGenotype& e) { return e.fitness < g.fitness; });
  entries_.insert(pos, g);
  if (entries_.size() > capacity_) entries_.pop_back();
  return true;
}

double SaSchedule::temperature(std::size_t iteration) const {
  return t0 * std::pow(alpha, static_cast<double>(iteration));
}

double acceptance_probability(double delta, double temperature) {
  if (delta <= 0.0) return 1.0;
  if (!(temperature > 0.0)) return 0.0;
  return std::exp(-delta / temperature);
}

const char* to_string(Decision d) noexcept {
  switch (d) {
    case Decision::improve: return "improve";
    case Decision::explore: return "explore";
    case Decision::restart: return "restart";
    case Decision::keep: return "keep";
  }
  return "?";
}

AcceptOutcome acceptance_step(const SparsityGenotype& current, const SparsityGenotype& candidate,
                              const RankedList& ranked, const SaSchedule& schedule,
                              std::size_t iteration, Rng& rng) {
  if (candidate.feasible && (candidate.fitness > current.fitness || !current.feasible))
    return {Decision::improve, candidate};
  if (!schedule.enabled) return {Decision::keep, current};
  const double delta = std::max(0.0, current.fitness - candidate.fitness);
  if (rng.uniform() < acceptance_probability(delta, schedule.temperature(iteration)))
    return {Decision::explore, candidate};
  if (!ranked.empty() && rng.uniform() < schedule.restart_probability)
    return {Decision::restart, ranked.entries()[rng.below(ranked.size())]};
  return {Decision::keep, current};
}

// ---------------------------------------------------------------------------
// Trace and JSON

const std::vector<std::string>& search_trace_header() {
  static const std::vector<std::string> header{"iteration", "layer",   "action",   "step",
                                               "sparsity",  "top1",    "fitness",  "accepted",
                                               "temperature", "sparsities"};
  return header;
}

std::vector<std::string> to_fields(const SearchTraceRow& row) {
  return {std::to_string(row.iteration),
          join(row.layers, '+'),
          row.reverse ? "reverse" : "prune",
          join(row.steps, '+'),
          join(row.layer_sparsities, '+'),
          format_double(row.top1),
          format_double(row.fitness),
          to_string(row.decision),
          format_double(row.temperature),
          join(row.sparsities, ';')};
}

json to_json(const SparsityGenotype& g) {
  return {{"sparsities", g.sparsities}, {"fitness", g.fitness}, {"top1", g.top1}, {"feasible", g.feasible}};
}

SparsityGenotype genotype_from_json(const json& j) {
  SparsityGenotype g;
  g.sparsities = j.at("sparsities").get<std::vector<double>>();
  g.fitness = j.at("fitness").get<double>();
  g.top1 = j.at("top1").get<double>();
  g.feasible = j.at("feasible").get<bool>();
  return g;
}

json to_json(const SearchResult& r, const std::vector<std::string>& names) {
  json per_layer = json::object();
  for (std::size_t i = 0; i < names.size() && i < r.best.sparsities.size(); ++i)
    per_layer[names[i]] = r.best.sparsities[i];
  json ranked = json::array();
  for (const auto& e : r.ranked.entries()) ranked.push_back(to_json(e));
  json out{{"baseline_top1", r.baseline_top1},
           {"best", to_json(r.best)},
           {"best_layer_sparsity", per_layer},
           {"weighted_sparsity", r.best.fitness},
           {"accuracy_drop", r.baseline_top1 - r.best.top1},
           {"iterations", r.iterations_run},
           {"ranked", ranked}};
  out["baseline_top5"] = r.baseline_top5 ? json(*r.baseline_top5) : json(nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// PruningSearch

namespace {

void validate(const SearchConfig& c) {
  if (!(c.drop_threshold >= 0.0)) throw ConfigError("drop_threshold must be >= 0");
  if (c.layers_per_turn == 0) throw ConfigError("layers_per_turn must be positive");
  if (c.sa.enabled && !(c.sa.t0 > 0.0)) throw ConfigError("sa.t0 must be positive");
  if (!(c.sa.alpha > 0.0 && c.sa.alpha <= 1.0)) throw ConfigError("sa.alpha must be in (0, 1]");
  if (!(c.sa.restart_probability >= 0.0 && c.sa.restart_probability <= 1.0))
    throw ConfigError("sa.restart_probability must be in [0, 1]");
  const auto& s = c.sensitivity;
  if (s.window == 0) throw ConfigError("sensitivity.window must be positive");
  if (!(c.max_layer_sparsity > 0.0 && c.max_layer_sparsity <= 1.0))
    throw ConfigError("max_layer_sparsity must be in (0, 1]");
  if (!(s.step_min > 0.0 && s.step_min <= s.initial_step && s.initial_step <= s.step_max && s.step_max <= 1.0))
    throw ConfigError("sensitivity steps must satisfy 0 < step_min <= initial_step <= step_max <= 1");
}

}  // namespace

PruningSearch::PruningSearch(ModelSnapshot& model, Evaluator& evaluator, SearchConfig config)
    : PruningSearch(model, evaluator, std::move(config), true) {}

PruningSearch::PruningSearch(ModelSnapshot& model, Evaluator& evaluator, SearchConfig config,
                             bool evaluate_baseline)
    : model_(&model),
      evaluator_(&evaluator),
      config_(std::move(config)),
      sizes_(model.layer_sizes()),
      names_(model.layer_names()),
      ranked_(config_.ranked_capacity),
      rng_(derive_seed(config_.seed, "search")) {
  validate(config_);
  if (model.layers.empty()) throw ContractError("model has no prunable layers");
  for (const auto& n : names_) sens_.emplace_back(n, config_.sensitivity);
  policy_.mode = config_.policy;
  policy_.priority_drop = config_.priority_drop;
  if (config_.policy == PolicyMode::prioritized)
    policy_.priority = resolve_priority(config_.priority, names_, sizes_);

  if (!evaluate_baseline) return;
  model.reset_masks();
  const auto base = evaluator.evaluate(model, config_.eval_split);
  baseline_top1_ = base.top1;
  baseline_top5_ = base.top5;
  current_ = genotype_of_model(base.top1);
  best_ = current_;
  ranked_.update(current_);
}

SparsityGenotype PruningSearch::genotype_of_model(double top1) const {
  SparsityGenotype g;
  g.sparsities = model_->targets;
  g.fitness = weighted_sparsity(*model_);
  g.top1 = top1;
  g.feasible = baseline_top1_ - top1 <= config_.drop_threshold;
  return g;
}

void PruningSearch::apply(const SparsityGenotype& g) { apply_sparsities(*model_, g.sparsities); }

const SearchTraceRow& PruningSearch::step() {
  if (done()) throw ContractError("search already finished");
  const std::size_t n = names_.size();

  std::vector<double> sens(n);
  for (std::size_t i = 0; i < n; ++i) sens[i] = sens_[i].sensitivity();
  std::vector<double> open_state = current_.sparsities;
  for (auto& v : open_state)
    if (v >= config_.max_layer_sparsity) v = 1.0;
  update_policy(policy_, sizes_, sens, config_.drop_threshold, open_state, baseline_top1_ - current_.top1);

  SearchTraceRow row;
  row.iteration = iteration_ + 1;
  row.reverse = !current_.feasible;

  std::vector<std::size_t> acted;
  if (row.reverse && !pending_reverse_.empty()) {
    acted = pending_reverse_;
  } else {
    std::size_t open = 0;
    for (double p : policy_.probabilities) open += p > 0.0;
    acted = sample_layers(policy_.probabilities, rng_, std::min(config_.layers_per_turn, std::max<std::size_t>(open, 1)));
  }

  for (auto li : acted) {
    const double s = sens_[li].step();
    double next = row.reverse ? reverse_prune_by_step(*model_, names_[li], s)
                              : prune_layer_by_step(*model_, names_[li], s);
    if (next > config_.max_layer_sparsity) {
      next = config_.max_layer_sparsity;
      model_->targets[li] = next;
      model_->set_mask(li, magnitude_mask(model_->layers[li], next));
    }
    row.layers.push_back(names_[li]);
    row.steps.push_back(s);
    row.layer_sparsities.push_back(next);
  }

  const auto result = evaluator_->evaluate(*model_, config_.eval_split);
  const SparsityGenotype candidate = genotype_of_model(result.top1);
  for (auto li : acted) sens_[li].record_impact(baseline_top1_, result.top1);

  ranked_.update(candidate);
  if (candidate.feasible && candidate.fitness > best_.fitness) best_ = candidate;

  const double temperature = config_.sa.temperature(iteration_);
  auto outcome = acceptance_step(current_, candidate, ranked_, config_.sa, iteration_, rng_);

  switch (outcome.decision) {
    case Decision::improve:
    case Decision::explore:
      pending_reverse_ = outcome.next.feasible ? std::vector<std::size_t>{} : acted;
      break;
    case Decision::restart:
      pending_reverse_.clear();
      break;
    case Decision::keep:
      break;
  }
  if (!(outcome.next.sparsities == candidate.sparsities)) apply(outcome.next);
  current_ = std::move(outcome.next);

  for (auto li : acted) sens_[li].update_step(config_.drop_threshold);

  row.top1 = candidate.top1;
  row.fitness = candidate.fitness;
  row.decision = outcome.decision;
  row.temperature = config_.sa.enabled ? temperature : 0.0;
  row.sparsities = candidate.sparsities;
  trace_.push_back(std::move(row));
  ++iteration_;
  return trace_.back();
}

SearchResult PruningSearch::run() {
  std::optional<CsvTrace> csv;
  if (config_.trace_path) {
    if (iteration_ == 0)
      csv.emplace(*config_.trace_path, search_trace_header());
    else
      csv.emplace(CsvTrace::resume(*config_.trace_path, search_trace_header(), iteration_));
  }

  while (!done()) {
    json before;
    if (config_.checkpoint_path) before = state();
    try {
      const auto& row = step();
      if (csv) csv->row(to_fields(row));
    } catch (const EvaluatorError&) {
      if (config_.checkpoint_path) save_checkpoint(before, *config_.checkpoint_path);
      throw;
    }
    if (config_.checkpoint_path && config_.checkpoint_every > 0 && iteration_ % config_.checkpoint_every == 0)
      save_state(*config_.checkpoint_path);
    if (on_iteration) on_iteration(*this);
  }
  if (config_.checkpoint_path) save_state(*config_.checkpoint_path);

  apply(best_);
  SearchResult r;
  r.baseline_top1 = baseline_top1_;
  r.baseline_top5 = baseline_top5_;
  r.best = best_;
  r.final_current = current_;
  r.ranked = ranked_;
  r.trace = trace_;
  r.iterations_run = iteration_;
  return r;
}

json PruningSearch::state() const {
  json sens = json::array();
  for (const auto& s : sens_)
    sens.push_back({{"layer", s.layer_name()},
                    {"window", std::vector<double>(s.window().begin(), s.window().end())},
                    {"step", s.step()}});
  json ranked = json::array();
  for (const auto& e : ranked_.entries()) ranked.push_back(to_json(e));
  json trace = json::array();
  for (const auto& r : trace_) trace.push_back(to_fields(r));
  json st{{"kind", "search"},
          {"layers", names_},
          {"iteration", iteration_},
          {"baseline_top1", baseline_top1_},
          {"current", to_json(current_)},
          {"best", to_json(best_)},
          {"ranked", ranked},
          {"sensitivity", sens},
          {"policy",
           {{"mode", to_string(policy_.mode)},
            {"probabilities", policy_.probabilities},
            {"priority", policy_.priority},
            {"priority_drop", policy_.priority_drop},
            {"priority_phase_done", policy_.priority_phase_done},
            {"initialized", policy_.initialized}}},
          {"pending_reverse", pending_reverse_},
          {"rng", {{"seed", rng_.seed()}, {"position", rng_.position()}}},
          {"trace", trace}};
  st["baseline_top5"] = baseline_top5_ ? json(*baseline_top5_) : json(nullptr);
  return st;
}

void PruningSearch::save_state(const std::filesystem::path& path) const { save_checkpoint(state(), path); }

namespace {

SearchTraceRow row_from_fields(const std::vector<std::string>& f) {
  if (f.size() != search_trace_header().size()) throw LoadError(LoadErrorKind::corrupt, "bad trace row in checkpoint");
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> out;
    if (s.empty()) return out;
    std::size_t start = 0;
    for (;;) {
      const auto pos = s.find(sep, start);
      out.push_back(s.substr(start, pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    return out;
  };
  auto doubles = [&](const std::string& s, char sep) {
    std::vector<double> out;
    for (const auto& t : split(s, sep)) out.push_back(std::stod(t));
    return out;
  };
  SearchTraceRow r;
  r.iteration = std::stoull(f[0]);
  r.layers = split(f[1], '+');
  r.reverse = f[2] == "reverse";
  r.steps = doubles(f[3], '+');
  r.layer_sparsities = doubles(f[4], '+');
  r.top1 = std::stod(f[5]);
  r.fitness = std::stod(f[6]);
  for (auto d : {Decision::improve, Decision::explore, Decision::restart, Decision::keep})
    if (f[7] == to_string(d)) r.decision = d;
  r.temperature = std::stod(f[8]);
  r.sparsities = doubles(f[9], ';');
  return r;
}

}  // namespace

PruningSearch PruningSearch::resume(ModelSnapshot& model, Evaluator& evaluator, SearchConfig config,
                                    const json& st) {
  try {
    if (st.at("kind") != "search") throw LoadError(LoadErrorKind::corrupt, "checkpoint is not a search state");
    PruningSearch s(model, evaluator, std::move(config), false);
    if (st.at("layers").get<std::vector<std::string>>() != s.names_)
      throw LoadError(LoadErrorKind::shape_mismatch, "checkpoint layers do not match the model");
    s.iteration_ = st.at("iteration").get<std::size_t>();
    s.baseline_top1_ = st.at("baseline_top1").get<double>();
    if (!st.at("baseline_top5").is_null()) s.baseline_top5_ = st.at("baseline_top5").get<double>();
    s.current_ = genotype_from_json(st.at("current"));
    s.best_ = genotype_from_json(st.at("best"));
    for (const auto& e : st.at("ranked")) s.ranked_.update(genotype_from_json(e));
    const auto& sens = st.at("sensitivity");
    if (sens.size() != s.sens_.size()) throw LoadError(LoadErrorKind::corrupt, "sensitivity entries mismatch");
    for (std::size_t i = 0; i < sens.size(); ++i) {
      auto w = sens[i].at("window").get<std::vector<double>>();
      s.sens_[i].restore(std::deque<double>(w.begin(), w.end()), sens[i].at("step").get<double>());
    }
    const auto& p = st.at("policy");
    s.policy_.mode = parse_policy_mode(p.at("mode").get<std::string>());
    s.policy_.probabilities = p.at("probabilities").get<std::vector<double>>();
    s.policy_.priority = p.at("priority").get<std::vector<std::size_t>>();
    s.policy_.priority_drop = p.at("priority_drop").get<double>();
    s.policy_.priority_phase_done = p.at("priority_phase_done").get<bool>();
    s.policy_.initialized = p.at("initialized").get<bool>();
    s.pending_reverse_ = st.at("pending_reverse").get<std::vector<std::size_t>>();
    s.rng_ = Rng::at_position(st.at("rng").at("seed").get<std::uint64_t>(),
                              st.at("rng").at("position").get<std::uint64_t>());
    for (const auto& f : st.at("trace")) s.trace_.push_back(row_from_fields(f.get<std::vector<std::string>>()));
    if (s.trace_.size() != s.iteration_) throw LoadError(LoadErrorKind::corrupt, "trace length mismatch");
    if (s.current_.sparsities.size() != s.names_.size())
      throw LoadError(LoadErrorKind::corrupt, "genotype length mismatch");
    s.apply(s.current_);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(LoadErrorKind::corrupt, std::string("malformed search checkpoint: ") + e.what());
  }
}

SearchResult run_search(ModelSnapshot& model, Evaluator& evaluator, const SearchConfig& config) {
  PruningSearch s(model, evaluator, config);
  return s.run();
}

}  // namespace prunekit
