#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "prunekit/model_store.hpp"

namespace prunekit::engine {

/// Resolved arch graph: per-op shapes and layer bindings.
struct PlannedOp {
  ArchOp op;
  std::size_t layer_index = 0;  // valid for conv2d / dense
  Shape3 in;
  Shape3 out;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
};

struct Plan {
  Shape3 input;
  std::size_t num_classes = 0;
  std::size_t layer_count = 0;
  std::vector<PlannedOp> ops;

  /// Index of the op that produces the post-nonlinearity output of each layer.
  std::vector<std::size_t> activation_op;
};

/// Validates the graph against the layer shapes; throws ContractError on any
/// inconsistency.
Plan build_plan(const ArchGraph& graph, const std::vector<LayerTensor>& layers);
inline Plan build_plan(const ModelSnapshot& model) { return build_plan(model.graph, model.layers); }

template <typename T>
struct Params {
  std::vector<std::vector<T>> weights;  // by layer index
  std::vector<std::vector<T>> biases;

  static Params zeros_like(const Params& other);
  void add(const Params& other);
  void scale(T factor);
};

/// Effective (masked) parameters of a model.
Params<float> masked_params(const ModelSnapshot& model);
Params<double> masked_params_f64(const ModelSnapshot& model);

/// Per-sample activation storage; values[0] is the input, values[i + 1] the
/// output of op i.
template <typename T>
struct Tape {
  std::vector<std::vector<T>> values;
  std::vector<std::vector<std::uint32_t>> argmax;  // maxpool source positions
  std::vector<std::vector<T>> grads;               // scratch for backward
};

template <typename T>
void forward(const Plan& plan, const Params<T>& params, std::span<const float> input,
             Tape<T>& tape);

template <typename T>
std::span<const T> logits(const Tape<T>& tape) {
  return tape.values.back();
}

/// Softmax cross-entropy of the last forward pass; adds d(loss)/d(params)
/// into `grad` and returns the loss.
template <typename T>
double backward(const Plan& plan, const Params<T>& params, Tape<T>& tape, std::size_t label,
                Params<T>& grad);

double cross_entropy(std::span<const float> logits, std::size_t label);
double cross_entropy(std::span<const double> logits, std::size_t label);

/// argmax with ties to the lowest class index.
template <typename T>
std::size_t argmax(std::span<const T> values);

/// True when `label` ranks among the best `k` logits (ties by lower index).
template <typename T>
bool in_top_k(std::span<const T> values, std::size_t label, std::size_t k);

}  // namespace prunekit::engine
