#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/evaluator.hpp"
#include "prunekit/model_store.hpp"
#include "prunekit/policy.hpp"
#include "prunekit/sensitivity.hpp"

namespace prunekit {

/// Zeroes gradient entries at pruned positions in place.
void apply_gradient_mask(std::span<float> gradients, const PruneMask& mask);
std::vector<double> apply_gradient_mask(std::span<const double> gradients, const PruneMask& mask);

enum class RetrainMode { simple, simple_masked, progressive, boosted, gradient_informed };

const char* to_string(RetrainMode mode) noexcept;
RetrainMode parse_retrain_mode(const std::string& text);

struct RetrainPolicy {
  RetrainMode mode = RetrainMode::simple_masked;
  bool masking = true;
  std::size_t epochs = 10;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  double progressive_start = 0.1;
  double progressive_increment = 0.01;
  std::uint64_t seed = 0;

  /// One-epoch training options with the shuffle seed derived for `epoch`.
  TrainOptions epoch_options(std::size_t epoch) const;
};

/// Boosting schedule state. Skip counts persist across epochs.
struct BoostSchedule {
  std::vector<std::string> priority_list;
  std::size_t scales = 2;
  std::size_t steps = 12;
  double step_value = 0.05;
  double reduction_factor = 0.5;
  double threshold0 = 1.0;  // percentage points
  std::size_t threshold1 = 3;
  std::map<std::string, std::size_t> skip_counts;
  std::set<std::string> permanently_skipped;

  /// step_value * reduction_factor^scale.
  double step_for_scale(std::size_t scale) const;
  void validate() const;

  /// Counts one failed attempt; returns true when the layer became
  /// permanently skipped.
  bool record_skip(const std::string& layer);
};

struct RetrainLogRow {
  std::size_t epoch = 0;
  std::string layer;
  std::size_t attempt = 0;
  double step = 0.0;
  double drop = 0.0;
  std::string action;
  double sparsity = 0.0;
  double top1 = 0.0;

  friend bool operator==(const RetrainLogRow&, const RetrainLogRow&) = default;
};

const std::vector<std::string>& retrain_trace_header();
std::vector<std::string> to_fields(const RetrainLogRow& row);
RetrainLogRow retrain_row_from_fields(const std::vector<std::string>& fields);

struct RetrainLog {
  double baseline_top1 = 0.0;
  std::optional<double> baseline_top5;
  std::vector<RetrainLogRow> rows;
  std::vector<double> epoch_loss;
  EvaluationResult final_result;
  /// Pruned-set containment held across every retrain and prune event
  /// (reverse events excepted).
  bool pruned_set_monotone = true;
  std::size_t reverse_events = 0;
  std::size_t epochs_run = 0;
};

nlohmann::json to_json(const RetrainLog& log, const ModelSnapshot& model);

/// Checkpointing and tracing shared by every retraining driver. The driver
/// state is saved at epoch boundaries next to a full model snapshot in
/// `<checkpoint>.model/`.
struct RunControl {
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> trace_path;
  std::size_t checkpoint_every = 1;
  /// State from a checkpoint to continue; the model must already be the
  /// snapshot saved with it (see load_run_checkpoint).
  std::optional<nlohmann::json> resume_state;
  /// Called after each completed epoch.
  std::function<void(std::size_t epoch)> on_epoch;
};

struct RunCheckpoint {
  nlohmann::json state;
  ModelSnapshot model;
};

RunCheckpoint load_run_checkpoint(const std::filesystem::path& path);

/// Plain retraining for policy.epochs epochs, with or without masking.
RetrainLog run_simple(ModelSnapshot& model, Evaluator& trainer, const RetrainPolicy& policy,
                      const RunControl& control = {});

/// Boosted retraining: walks the priority list each epoch trying
/// scales x steps magnitude prunes per layer, validating each one.
RetrainLog run_boosted(ModelSnapshot& model, Evaluator& trainer, BoostSchedule& schedule,
                       const RetrainPolicy& policy, const RunControl& control = {});

/// Epoch e sets every layer to start + increment * e, then retrains.
RetrainLog run_progressive(ModelSnapshot& model, Evaluator& trainer, double start, double increment,
                           const RetrainPolicy& policy, const RunControl& control = {});

struct GradientInformedConfig {
  double drop_threshold = 1.0;
  double init_sparsity = 0.0;
  double init_step = 0.05;
  double alpha = 0.5;
  PolicyMode policy = PolicyMode::dynamic;
  SensitivityConfig sensitivity;
  Split eval_split = Split::test;
  /// Keep the best feasible state if the last epoch ends infeasible.
  bool restore_best = true;
};

/// Gradient-informed pruning with retraining. Each epoch picks a layer by
/// policy, prunes (or from an infeasible state reverses) it by its adaptive
/// step using gradient-blended ranks, updates sensitivity, then retrains.
RetrainLog run_gradient_informed(ModelSnapshot& model, Evaluator& trainer,
                                 const GradientInformedConfig& config, const RetrainPolicy& policy,
                                 const RunControl& control = {});

}  // namespace prunekit
