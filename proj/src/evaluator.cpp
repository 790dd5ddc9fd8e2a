#include "prunekit/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

#include "binary_io.hpp"
#include "prunekit/engine.hpp"
#include "prunekit/errors.hpp"

namespace prunekit {

namespace fs = std::filesystem;

const char* to_string(Split split) noexcept {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Datasets

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw ContractError("dataset slice out of range");
  Dataset out;
  out.sample_shape = sample_shape;
  out.num_classes = num_classes;
  const std::size_t stride = sample_shape.size();
  out.inputs.assign(inputs.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                    inputs.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
  return out;
}

void Dataset::validate() const {
  if (inputs.size() != labels.size() * sample_shape.size())
    throw ContractError("dataset: inputs and labels disagree in length");
  for (auto l : labels)
    if (l >= num_classes) throw ContractError("dataset: label out of range");
}

namespace {
constexpr char kDatasetMagic[8] = {'P', 'K', 'D', 'S', '0', '0', '0', '1'};
}

// "PKDS0001", u32 C, H, W, u32 classes, u64 count, count*C*H*W f32, count u32.
void save_dataset(const Dataset& data, const fs::path& path) {
  data.validate();
  std::string out(kDatasetMagic, 8);
  detail::put_u32(out, static_cast<std::uint32_t>(data.sample_shape.c));
  detail::put_u32(out, static_cast<std::uint32_t>(data.sample_shape.h));
  detail::put_u32(out, static_cast<std::uint32_t>(data.sample_shape.w));
  detail::put_u32(out, static_cast<std::uint32_t>(data.num_classes));
  detail::put_u64(out, data.size());
  out.reserve(out.size() + data.inputs.size() * 4 + data.labels.size() * 4);
  for (float f : data.inputs) detail::put_f32(out, f);
  for (auto l : data.labels) detail::put_u32(out, l);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::write_file(path, out);
}

Dataset load_dataset(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 32 || std::memcmp(bytes.data(), kDatasetMagic, 8) != 0)
    throw LoadError(LoadErrorKind::corrupt, path.string() + ": not a dataset file");
  Dataset d;
  d.sample_shape = {detail::get_le(&bytes[8], 4), detail::get_le(&bytes[12], 4),
                    detail::get_le(&bytes[16], 4)};
  d.num_classes = detail::get_le(&bytes[20], 4);
  const std::size_t n = detail::get_le(&bytes[24], 8);
  const std::size_t floats = n * d.sample_shape.size();
  if (bytes.size() != 32 + floats * 4 + n * 4)
    throw LoadError(LoadErrorKind::shape_mismatch, path.string() + ": size does not match header");
  d.inputs.resize(floats);
  for (std::size_t i = 0; i < floats; ++i) {
    d.inputs[i] = detail::get_f32(&bytes[32 + 4 * i]);
    if (!std::isfinite(d.inputs[i])) throw LoadError(LoadErrorKind::non_finite, path.string());
  }
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    d.labels[i] = static_cast<std::uint32_t>(detail::get_le(&bytes[32 + floats * 4 + 4 * i], 4));
  try {
    d.validate();
  } catch (const ContractError& e) {
    throw LoadError(LoadErrorKind::corrupt, path.string() + ": " + e.what());
  }
  return d;
}

DataBundle load_data_bundle(const fs::path& dir, double validation_fraction) {
  if (!(validation_fraction > 0.0 && validation_fraction <= 1.0))
    throw ConfigError("validation fraction must lie in (0, 1]");
  DataBundle b;
  b.train = load_dataset(dir / "train.bin");
  b.test = load_dataset(dir / "test.bin");
  const std::size_t nval = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(b.test.size()))));
  b.validation = b.test.slice(0, std::min(nval, b.test.size()));
  return b;
}

// ---------------------------------------------------------------------------
// Evaluator defaults

TrainReport Evaluator::train(ModelSnapshot&, const TrainOptions&) {
  throw CapabilityError("evaluator does not support retraining");
}

GradientStats Evaluator::gradients(const ModelSnapshot&, const std::string&) {
  throw CapabilityError("evaluator does not support gradient statistics");
}

std::vector<LayerActivations> Evaluator::activations(const ModelSnapshot&, Split) {
  throw CapabilityError("evaluator does not support activation summaries");
}

// ---------------------------------------------------------------------------
// Built-in evaluator

namespace {

/// Runs fn(shard, begin, end) over `shards` contiguous ranges of [0, n),
/// on up to `threads` threads. Shard boundaries depend only on n and shards.
template <typename Fn>
void for_shards(std::size_t n, std::size_t shards, unsigned threads, Fn&& fn) {
  auto range = [&](std::size_t s) {
    return std::pair{s * n / shards, (s + 1) * n / shards};
  };
  if (threads <= 1) {
    for (std::size_t s = 0; s < shards; ++s) {
      auto [b, e] = range(s);
      fn(s, b, e);
    }
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t s = t; s < shards; s += threads) {
          auto [b, e] = range(s);
          fn(s, b, e);
        }
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

constexpr std::size_t kShards = 8;

unsigned resolve_threads(unsigned requested) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  return std::min<unsigned>(requested == 0 ? hw : requested, kShards);
}

void check_dataset_fits(const engine::Plan& plan, const Dataset& data) {
  if (!(data.sample_shape == plan.input))
    throw ContractError("dataset sample shape does not match the model input");
  if (data.num_classes > plan.num_classes)
    throw ContractError("dataset has more classes than the model outputs");
}

}  // namespace

EvaluationResult evaluate_dataset(const ModelSnapshot& model, const Dataset& data, unsigned threads) {
  const auto plan = engine::build_plan(model);
  check_dataset_fits(plan, data);
  const auto params = engine::masked_params(model);
  const std::size_t n = data.size();
  std::vector<std::uint8_t> hit1(n, 0), hit5(n, 0);
  const bool want_top5 = plan.num_classes >= 6;
  for_shards(n, kShards, resolve_threads(threads), [&](std::size_t, std::size_t b, std::size_t e) {
    engine::Tape<float> tape;
    for (std::size_t i = b; i < e; ++i) {
      engine::forward(plan, params, data.sample(i), tape);
      const auto z = engine::logits(tape);
      hit1[i] = engine::argmax(z) == data.labels[i];
      if (want_top5) hit5[i] = engine::in_top_k(z, data.labels[i], 5);
    }
  });
  EvaluationResult r;
  r.samples = n;
  if (n == 0) return r;
  const auto c1 = std::accumulate(hit1.begin(), hit1.end(), std::size_t{0});
  r.top1 = 100.0 * static_cast<double>(c1) / static_cast<double>(n);
  if (want_top5) {
    const auto c5 = std::accumulate(hit5.begin(), hit5.end(), std::size_t{0});
    r.top5 = 100.0 * static_cast<double>(c5) / static_cast<double>(n);
  }
  return r;
}

BuiltinEvaluator::BuiltinEvaluator(DataBundle data, std::uint64_t seed, unsigned threads)
    : data_(std::move(data)), seed_(seed), threads_(threads) {
  data_.train.validate();
  data_.validation.validate();
  data_.test.validate();
}

const Dataset& BuiltinEvaluator::split(Split s) const {
  switch (s) {
    case Split::train: return data_.train;
    case Split::validation: return data_.validation;
    case Split::test: return data_.test;
  }
  return data_.test;
}

EvaluationResult BuiltinEvaluator::evaluate(const ModelSnapshot& model, Split s) {
  ++evaluations_;
  return evaluate_dataset(model, split(s), threads_);
}

TrainReport BuiltinEvaluator::train(ModelSnapshot& model, const TrainOptions& options) {
  const auto& data = data_.train;
  const auto plan = engine::build_plan(model);
  check_dataset_fits(plan, data);
  if (options.batch_size == 0) throw ContractError("batch size must be >= 1");
  if (!(options.learning_rate > 0.0)) throw ContractError("learning rate must be > 0");

  TrainReport report;
  const std::uint64_t call = train_calls_++;
  Rng rng(options.seed ? *options.seed : derive_seed(seed_, "train#" + std::to_string(call)));
  auto params = engine::masked_params(model);
  auto velocity = engine::Params<float>::zeros_like(params);
  std::vector<std::vector<double>> grad_abs_sum;
  for (const auto& w : params.weights) grad_abs_sum.emplace_back(w.size(), 0.0);
  std::size_t grad_steps = 0;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  engine::Tape<float> tape;
  double lr = options.learning_rate;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    if (options.lr_step_epochs > 0 && epoch > 0 && epoch % options.lr_step_epochs == 0)
      lr *= options.lr_decay;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      auto grad = engine::Params<float>::zeros_like(params);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        engine::forward(plan, params, data.sample(idx), tape);
        loss_sum += engine::backward(plan, params, tape, data.labels[idx], grad);
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (std::size_t l = 0; l < params.weights.size(); ++l) {
        auto& g = grad.weights[l];
        const auto& mask = model.masks[l];
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] *= inv;
          if (options.masking && !mask.kept(i)) g[i] = 0.0f;
          grad_abs_sum[l][i] += std::fabs(static_cast<double>(g[i]));
        }
        auto& gb = grad.biases[l];
        for (auto& v : gb) v *= inv;
        auto& w = params.weights[l];
        auto& vw = velocity.weights[l];
        const float mom = static_cast<float>(options.momentum);
        const float rate = static_cast<float>(lr);
        for (std::size_t i = 0; i < w.size(); ++i) {
          vw[i] = mom * vw[i] + g[i];
          w[i] -= rate * vw[i];
        }
        auto& b = params.biases[l];
        auto& vb = velocity.biases[l];
        for (std::size_t i = 0; i < b.size(); ++i) {
          vb[i] = mom * vb[i] + gb[i];
          b[i] -= rate * vb[i];
        }
      }
      ++grad_steps;
    }
    const double mean_loss = data.size() ? loss_sum / static_cast<double>(data.size()) : 0.0;
    if (!std::isfinite(mean_loss))
      throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) +
                             " (lr=" + std::to_string(lr) + ")");
    report.epoch_loss.push_back(mean_loss);
  }

  if (options.epochs > 0) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      for (float v : params.weights[l])
        if (!std::isfinite(v)) throw TrainingDiverged("non-finite weight in " + model.layers[l].name());
      model.replace_layer(l, model.layers[l].with_weights(params.weights[l], params.biases[l]));
      if (!options.masking) model.masks[l] = magnitude_mask(model.layers[l], model.targets[l]);
      CachedStats stats;
      stats.storage = model.layers[l].storage_id();
      stats.importance = std::move(grad_abs_sum[l]);
      if (grad_steps > 0)
        for (auto& v : stats.importance) v /= static_cast<double>(grad_steps);
      grad_cache_[model.layers[l].name()] = std::move(stats);
    }
  }
  report.result = evaluate(model, Split::test);
  return report;
}

GradientStats BuiltinEvaluator::gradients(const ModelSnapshot& model, const std::string& layer) {
  const auto li = model.index_of(layer);
  const auto it = grad_cache_.find(layer);
  if (it != grad_cache_.end() && it->second.storage == model.layers[li].storage_id())
    return {layer, it->second.importance};

  // No training interval for these weights yet: probe one pass over a
  // leading subset of the train split.
  const auto& data = data_.train;
  const auto plan = engine::build_plan(model);
  check_dataset_fits(plan, data);
  const auto params = engine::masked_params(model);
  const std::size_t n = std::min(gradient_probe_samples_, data.size());
  std::vector<double> importance(model.layers[li].parameter_count(), 0.0);
  engine::Tape<float> tape;
  for (std::size_t i = 0; i < n; ++i) {
    auto grad = engine::Params<float>::zeros_like(params);
    engine::forward(plan, params, data.sample(i), tape);
    engine::backward(plan, params, tape, data.labels[i], grad);
    const auto& g = grad.weights[li];
    for (std::size_t k = 0; k < g.size(); ++k)
      if (model.masks[li].kept(k)) importance[k] += std::fabs(static_cast<double>(g[k]));
  }
  if (n > 0)
    for (auto& v : importance) v /= static_cast<double>(n);
  return {layer, std::move(importance)};
}

std::vector<LayerActivations> BuiltinEvaluator::activations(const ModelSnapshot& model, Split s) {
  const auto& data = split(s);
  const auto plan = engine::build_plan(model);
  check_dataset_fits(plan, data);
  const auto params = engine::masked_params(model);
  const std::size_t nl = model.layers.size();
  const std::size_t nc = data.num_classes;

  struct Partial {
    std::vector<std::vector<double>> global;                // [layer][channel]
    std::vector<std::vector<std::vector<double>>> by_class;  // [class][layer][channel]
    std::vector<std::size_t> counts;
  };
  std::vector<Partial> partials(kShards);
  for (auto& p : partials) {
    for (std::size_t l = 0; l < nl; ++l)
      p.global.emplace_back(plan.ops[plan.activation_op[l]].out.c, 0.0);
    p.by_class.assign(nc, p.global);
    p.counts.assign(nc, 0);
  }
  for_shards(data.size(), kShards, resolve_threads(threads_),
             [&](std::size_t shard, std::size_t b, std::size_t e) {
               auto& part = partials[shard];
               engine::Tape<float> tape;
               for (std::size_t i = b; i < e; ++i) {
                 engine::forward(plan, params, data.sample(i), tape);
                 const auto label = data.labels[i];
                 ++part.counts[label];
                 for (std::size_t l = 0; l < nl; ++l) {
                   const auto op = plan.activation_op[l];
                   const auto& shape = plan.ops[op].out;
                   const auto& v = tape.values[op + 1];
                   const std::size_t area = shape.h * shape.w;
                   for (std::size_t c = 0; c < shape.c; ++c) {
                     double acc = 0.0;
                     for (std::size_t k = 0; k < area; ++k)
                       acc += std::fabs(static_cast<double>(v[c * area + k]));
                     acc /= static_cast<double>(area);
                     part.global[l][c] += acc;
                     part.by_class[label][l][c] += acc;
                   }
                 }
               }
             });

  std::vector<LayerActivations> out(nl);
  std::vector<std::size_t> counts(nc, 0);
  for (const auto& p : partials)
    for (std::size_t k = 0; k < nc; ++k) counts[k] += p.counts[k];
  for (std::size_t l = 0; l < nl; ++l) {
    auto& la = out[l];
    la.layer = model.layers[l].name();
    la.global_means.assign(partials[0].global[l].size(), 0.0);
    for (const auto& p : partials)
      for (std::size_t c = 0; c < la.global_means.size(); ++c) la.global_means[c] += p.global[l][c];
    if (data.size() > 0)
      for (auto& v : la.global_means) v /= static_cast<double>(data.size());
    for (std::uint32_t k = 0; k < nc; ++k) {
      if (counts[k] == 0) continue;
      std::vector<double> means(la.global_means.size(), 0.0);
      for (const auto& p : partials)
        for (std::size_t c = 0; c < means.size(); ++c) means[c] += p.by_class[k][l][c];
      for (auto& v : means) v /= static_cast<double>(counts[k]);
      la.class_means[k] = std::move(means);
      la.class_counts[k] = counts[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

GradientCheckReport gradient_check(const ModelSnapshot& net, std::span<const float> input,
                                   std::size_t label) {
  const auto plan = engine::build_plan(net);
  auto params = engine::masked_params_f64(net);
  auto grad = engine::Params<double>::zeros_like(params);
  engine::Tape<double> tape;
  engine::forward(plan, params, input, tape);
  engine::backward(plan, params, tape, label, grad);

  auto loss_at = [&](engine::Params<double>& p) {
    engine::forward(plan, p, input, tape);
    return engine::cross_entropy(std::span<const double>(tape.values.back()), label);
  };
  constexpr double h = 1e-5;
  GradientCheckReport report;
  auto check = [&](std::vector<double>& values, const std::vector<double>& analytic,
                   const std::string& name) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss_at(params);
      values[i] = saved - h;
      const double down = loss_at(params);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.parameters;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_parameter = name + "[" + std::to_string(i) + "]";
      }
    }
  };
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    check(params.weights[l], grad.weights[l], net.layers[l].name() + ".weight");
    check(params.biases[l], grad.biases[l], net.layers[l].name() + ".bias");
  }
  return report;
}

ModelSnapshot random_network(std::uint64_t seed, RandomNetKind kind) {
  Rng rng(derive_seed(seed, "random_network"));
  auto randn = [&](std::size_t n, double scale) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal() * scale);
    return v;
  };
  ModelSnapshot m;
  if (kind == RandomNetKind::linear) {
    m.graph.input = {1, 4, 4};
    m.graph.num_classes = 3;
    m.layers.emplace_back("fc", LayerKind::dense, std::vector<std::size_t>{3, 16}, randn(48, 0.5),
                          randn(3, 0.1));
    m.graph.ops = {ArchOp::flatten(), ArchOp::dense("fc")};
  } else {
    m.graph.input = {2, 6, 6};
    m.graph.num_classes = 4;
    m.layers.emplace_back("conv", LayerKind::conv2d, std::vector<std::size_t>{3, 2, 3, 3},
                          randn(54, 0.5), randn(3, 0.1));
    m.layers.emplace_back("fc1", LayerKind::dense, std::vector<std::size_t>{8, 27}, randn(216, 0.4),
                          randn(8, 0.1));
    m.layers.emplace_back("fc2", LayerKind::dense, std::vector<std::size_t>{4, 8}, randn(32, 0.5),
                          randn(4, 0.1));
    m.graph.ops = {ArchOp::conv2d("conv", 1, 1), ArchOp::relu(),       ArchOp::maxpool(2),
                   ArchOp::flatten(),             ArchOp::dense("fc1"), ArchOp::relu(),
                   ArchOp::dense("fc2")};
  }
  m.reset_masks();
  return m;
}

}  // namespace prunekit
