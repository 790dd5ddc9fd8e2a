#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/evaluator.hpp"
#include "prunekit/model_store.hpp"
#include "prunekit/policy.hpp"
#include "prunekit/rng.hpp"
#include "prunekit/sensitivity.hpp"
#include "prunekit/trace.hpp"

namespace prunekit {

/// A point of the search space: one target sparsity per layer.
struct SparsityGenotype {
  std::vector<double> sparsities;
  double fitness = 0.0;  // weighted sparsity
  double top1 = 0.0;
  bool feasible = true;

  friend bool operator==(const SparsityGenotype&, const SparsityGenotype&) = default;
};

/// The k best feasible genotypes seen, fitness descending. Entries of equal
/// fitness keep insertion order; identical sparsity vectors are stored once.
class RankedList {
 public:
  explicit RankedList(std::size_t capacity = 10);

  /// Returns true if `g` was inserted.
  bool update(const SparsityGenotype& g);

  const std::vector<SparsityGenotype>& entries() const noexcept { return entries_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  friend bool operator==(const RankedList&, const RankedList&) = default;

 private:
  std::size_t capacity_;
  std::vector<SparsityGenotype> entries_;
};

/// Annealing schedule. With enabled == false the search is a pure
/// random-mutation hill climber: no worse moves and no restarts.
struct SaSchedule {
  bool enabled = true;
  double t0 = 0.1;
  double alpha = 0.97;
  double restart_probability = 0.1;

  double temperature(std::size_t iteration) const;
};

/// exp(-delta / temperature); 1 when delta <= 0.
double acceptance_probability(double delta, double temperature);

enum class Decision { improve, explore, restart, keep };

const char* to_string(Decision d) noexcept;

struct AcceptOutcome {
  Decision decision = Decision::keep;
  SparsityGenotype next;
};

/// One acceptance step. A feasible candidate replaces the current solution
/// when its fitness is higher or the current solution is infeasible.
/// Otherwise, with annealing on, the candidate is taken with probability
/// exp(-(f_cur - f_cand) / T); failing that, with probability
/// restart_probability the walk jumps to a uniformly drawn ranked entry.
AcceptOutcome acceptance_step(const SparsityGenotype& current, const SparsityGenotype& candidate,
                              const RankedList& ranked, const SaSchedule& schedule,
                              std::size_t iteration, Rng& rng);

struct SearchConfig {
  std::size_t iterations = 150;
  double drop_threshold = 1.0;  // percentage points
  std::size_t layers_per_turn = 1;
  /// Per-layer ceiling on target sparsity; layers at the ceiling are not sampled.
  double max_layer_sparsity = 1.0;
  PolicyMode policy = PolicyMode::dynamic;
  std::vector<std::string> priority;
  double priority_drop = 0.5;
  SaSchedule sa;
  std::size_t ranked_capacity = 10;
  SensitivityConfig sensitivity;
  std::uint64_t seed = 0;
  Split eval_split = Split::test;

  /// Checkpoint after every `checkpoint_every` iterations (0 = only at the end).
  std::size_t checkpoint_every = 0;
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> trace_path;
};

struct SearchTraceRow {
  std::size_t iteration = 0;
  std::vector<std::string> layers;
  bool reverse = false;
  std::vector<double> steps;
  std::vector<double> layer_sparsities;
  double top1 = 0.0;
  double fitness = 0.0;
  Decision decision = Decision::keep;
  double temperature = 0.0;
  std::vector<double> sparsities;

  friend bool operator==(const SearchTraceRow&, const SearchTraceRow&) = default;
};

const std::vector<std::string>& search_trace_header();
std::vector<std::string> to_fields(const SearchTraceRow& row);

struct SearchResult {
  double baseline_top1 = 0.0;
  std::optional<double> baseline_top5;
  SparsityGenotype best;
  SparsityGenotype final_current;
  RankedList ranked;
  std::vector<SearchTraceRow> trace;
  std::size_t iterations_run = 0;
};

nlohmann::json to_json(const SparsityGenotype& g);
SparsityGenotype genotype_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SearchResult& result, const std::vector<std::string>& layer_names);

/// Stochastic sparsity search. Each turn prunes (or, from an infeasible
/// state, reverses) sampled layers by their adaptive steps, evaluates the
/// candidate and applies the acceptance rule. The model's masks always
/// reflect the current solution; after run() they reflect the best one.
class PruningSearch {
 public:
  /// Evaluates the unpruned baseline. Existing masks are cleared.
  PruningSearch(ModelSnapshot& model, Evaluator& evaluator, SearchConfig config);

  /// Continues from a state produced by state(). The model must match the
  /// one the state was taken from.
  static PruningSearch resume(ModelSnapshot& model, Evaluator& evaluator, SearchConfig config,
                              const nlohmann::json& state);

  bool done() const noexcept { return iteration_ >= config_.iterations; }
  std::size_t iteration() const noexcept { return iteration_; }

  /// Runs a single iteration and returns its trace row.
  const SearchTraceRow& step();

  /// Runs the remaining iterations, writing trace rows and checkpoints if
  /// configured, then installs the best genotype's masks.
  SearchResult run();

  nlohmann::json state() const;
  void save_state(const std::filesystem::path& path) const;

  const SparsityGenotype& current() const noexcept { return current_; }
  const SparsityGenotype& best() const noexcept { return best_; }
  const RankedList& ranked() const noexcept { return ranked_; }
  const std::vector<SensitivityState>& sensitivities() const noexcept { return sens_; }
  const LayerPolicy& policy() const noexcept { return policy_; }
  const std::vector<SearchTraceRow>& trace() const noexcept { return trace_; }
  double baseline_top1() const noexcept { return baseline_top1_; }

  /// Invoked after each completed iteration; used to simulate interruption.
  std::function<void(const PruningSearch&)> on_iteration;

 private:
  PruningSearch(ModelSnapshot& model, Evaluator& evaluator, SearchConfig config, bool evaluate_baseline);

  void apply(const SparsityGenotype& g);
  SparsityGenotype genotype_of_model(double top1) const;

  ModelSnapshot* model_;
  Evaluator* evaluator_;
  SearchConfig config_;
  std::vector<std::size_t> sizes_;
  std::vector<std::string> names_;

  double baseline_top1_ = 0.0;
  std::optional<double> baseline_top5_;
  std::size_t iteration_ = 0;
  SparsityGenotype current_;
  SparsityGenotype best_;
  RankedList ranked_;
  std::vector<SensitivityState> sens_;
  LayerPolicy policy_;
  Rng rng_;
  std::vector<std::size_t> pending_reverse_;
  std::vector<SearchTraceRow> trace_;
};

/// Convenience wrapper: constructs a PruningSearch and runs it.
SearchResult run_search(ModelSnapshot& model, Evaluator& evaluator, const SearchConfig& config);

}  // namespace prunekit
