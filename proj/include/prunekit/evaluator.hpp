#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "prunekit/model_store.hpp"
#include "prunekit/pruning_ops.hpp"
#include "prunekit/rng.hpp"

namespace prunekit {

enum class Split { train, validation, test };

const char* to_string(Split split) noexcept;

/// Samples stored as C x H x W floats, row-major, one after another.
struct Dataset {
  Shape3 sample_shape;
  std::size_t num_classes = 0;
  std::vector<float> inputs;
  std::vector<std::uint32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const float> sample(std::size_t i) const {
    return {inputs.data() + i * sample_shape.size(), sample_shape.size()};
  }
  /// Contiguous sub-range [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const;
  void validate() const;
};

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct DataBundle {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Reads `train.bin` and `test.bin` from a dataset directory; the validation
/// split is the leading `validation_fraction` of the test set.
DataBundle load_data_bundle(const std::filesystem::path& dir, double validation_fraction = 0.2);

struct EvaluationResult {
  double top1 = 0.0;           // percent
  std::optional<double> top5;  // percent; only when num_classes >= 6
  std::size_t samples = 0;
};

struct TrainerCapabilities {
  bool supports_gradients = false;
  bool supports_retrain = false;
  bool supports_activations = false;

  friend bool operator==(const TrainerCapabilities&, const TrainerCapabilities&) = default;
};

struct TrainOptions {
  std::size_t epochs = 1;
  double learning_rate = 0.01;
  bool masking = true;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  /// Multiply the rate by lr_decay every lr_step_epochs epochs (0 = fixed rate).
  std::size_t lr_step_epochs = 0;
  double lr_decay = 0.1;
  /// Shuffle seed; when absent the evaluator derives one per call.
  std::optional<std::uint64_t> seed;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  EvaluationResult result;
};

/// Per-filter mean |post-activation output| for one layer.
struct LayerActivations {
  std::string layer;
  std::vector<double> global_means;
  std::map<std::uint32_t, std::vector<double>> class_means;
  std::map<std::uint32_t, std::size_t> class_counts;
};

/// Accuracy/gradient/activation oracle used by every pruning driver.
class Evaluator {
 public:
  virtual ~Evaluator() = default;

  virtual TrainerCapabilities capabilities() const = 0;
  virtual EvaluationResult evaluate(const ModelSnapshot& model, Split split) = 0;
  EvaluationResult evaluate(const ModelSnapshot& model) { return evaluate(model, Split::test); }

  /// Retrains the model in place. With masking, gradients at pruned positions
  /// are zeroed before every update.
  virtual TrainReport train(ModelSnapshot& model, const TrainOptions& options);
  virtual GradientStats gradients(const ModelSnapshot& model, const std::string& layer);
  virtual std::vector<LayerActivations> activations(const ModelSnapshot& model, Split split);
};

/// In-process evaluator backed by the built-in engine.
class BuiltinEvaluator : public Evaluator {
 public:
  explicit BuiltinEvaluator(DataBundle data, std::uint64_t seed = 0, unsigned threads = 0);

  TrainerCapabilities capabilities() const override { return {true, true, true}; }
  using Evaluator::evaluate;
  EvaluationResult evaluate(const ModelSnapshot& model, Split split) override;
  TrainReport train(ModelSnapshot& model, const TrainOptions& options) override;
  GradientStats gradients(const ModelSnapshot& model, const std::string& layer) override;
  std::vector<LayerActivations> activations(const ModelSnapshot& model, Split split) override;

  const Dataset& split(Split s) const;
  /// Number of samples used when gradient statistics have to be measured
  /// without a preceding training interval.
  void set_gradient_probe_samples(std::size_t n) { gradient_probe_samples_ = n; }
  std::size_t evaluations() const noexcept { return evaluations_; }

 private:
  DataBundle data_;
  std::uint64_t seed_;
  unsigned threads_;
  std::uint64_t train_calls_ = 0;
  std::size_t evaluations_ = 0;
  std::size_t gradient_probe_samples_ = 1024;
  struct CachedStats {
    const void* storage = nullptr;
    std::vector<double> importance;
  };
  std::unordered_map<std::string, CachedStats> grad_cache_;
};

/// Evaluates a dataset directly; used by BuiltinEvaluator and by tests.
EvaluationResult evaluate_dataset(const ModelSnapshot& model, const Dataset& data, unsigned threads = 1);

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::size_t parameters = 0;
  std::string worst_parameter;
};

/// Compares analytic parameter gradients of the softmax cross-entropy loss
/// with central differences (h = 1e-5) in 64-bit arithmetic. The relative
/// error of one entry is |a - n| / max(|a|, |n|, 1e-6).
GradientCheckReport gradient_check(const ModelSnapshot& net, std::span<const float> input,
                                   std::size_t label);

enum class RandomNetKind { linear, conv_relu_dense };

/// Small random network (< 1000 parameters) for gradient checking.
ModelSnapshot random_network(std::uint64_t seed, RandomNetKind kind);

}  // namespace prunekit
