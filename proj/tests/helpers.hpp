#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "prunekit/evaluator.hpp"
#include "prunekit/model_store.hpp"
#include "prunekit/rng.hpp"

namespace testing {

namespace fs = std::filesystem;

/// Directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = fs::temp_directory_path() /
            ("prunekit-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline std::vector<float> random_weights(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  prunekit::Rng rng(seed);
  std::vector<float> w(n);
  for (auto& x : w) x = static_cast<float>(rng.normal() * scale);
  return w;
}

/// Chain of dense layers: input width -> widths..., relu between layers.
inline prunekit::ModelSnapshot dense_chain(std::size_t input, const std::vector<std::size_t>& widths,
                                           std::uint64_t seed) {
  using namespace prunekit;
  ModelSnapshot m;
  m.graph.input = {1, 1, input};
  m.graph.num_classes = widths.back();
  m.graph.ops.push_back(ArchOp::flatten());
  std::size_t in = input;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    m.layers.emplace_back(name, LayerKind::dense, std::vector<std::size_t>{widths[i], in},
                          random_weights(widths[i] * in, seed + i, 0.5), random_weights(widths[i], seed + 100 + i, 0.1));
    if (i > 0) m.graph.ops.push_back(ArchOp::relu());
    m.graph.ops.push_back(ArchOp::dense(name));
    in = widths[i];
  }
  m.reset_masks();
  return m;
}

/// conv(c1) -> relu -> pool -> conv(c2) -> relu -> pool -> flatten -> fc(classes)
/// on a 1 x 8 x 8 input.
inline prunekit::ModelSnapshot small_cnn(std::size_t c1, std::size_t c2, std::size_t classes, std::uint64_t seed) {
  using namespace prunekit;
  ModelSnapshot m;
  m.graph.input = {1, 8, 8};
  m.graph.num_classes = classes;
  m.layers.emplace_back("conv1", LayerKind::conv2d, std::vector<std::size_t>{c1, 1, 3, 3},
                        random_weights(c1 * 9, seed, 0.5), random_weights(c1, seed + 1, 0.1));
  m.layers.emplace_back("conv2", LayerKind::conv2d, std::vector<std::size_t>{c2, c1, 3, 3},
                        random_weights(c2 * c1 * 9, seed + 2, 0.3), random_weights(c2, seed + 3, 0.1));
  m.layers.emplace_back("fc", LayerKind::dense, std::vector<std::size_t>{classes, c2 * 4},
                        random_weights(classes * c2 * 4, seed + 4, 0.3), random_weights(classes, seed + 5, 0.1));
  m.graph.ops = {ArchOp::conv2d("conv1", 1, 1), ArchOp::relu(), ArchOp::maxpool(2),
                 ArchOp::conv2d("conv2", 1, 1), ArchOp::relu(), ArchOp::maxpool(2),
                 ArchOp::flatten(),             ArchOp::dense("fc")};
  m.reset_masks();
  return m;
}

inline prunekit::Dataset random_dataset(prunekit::Shape3 shape, std::size_t classes, std::size_t n,
                                        std::uint64_t seed) {
  prunekit::Dataset d;
  d.sample_shape = shape;
  d.num_classes = classes;
  d.inputs = random_weights(shape.size() * n, seed);
  prunekit::Rng rng(seed + 1);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<std::uint32_t>(rng.below(classes)));
  return d;
}

inline prunekit::DataBundle random_bundle(prunekit::Shape3 shape, std::size_t classes, std::size_t n,
                                          std::uint64_t seed) {
  prunekit::DataBundle b;
  b.train = random_dataset(shape, classes, n, seed);
  b.test = random_dataset(shape, classes, n, seed + 7);
  b.validation = b.test.slice(0, std::max<std::size_t>(1, n / 5));
  return b;
}

/// Independent magnitude-mask oracle: sort (|w|, index) pairs and prune the
/// first round-half-even(s * n).
inline std::vector<bool> oracle_kept(const std::vector<float>& w, double sparsity) {
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const float fa = std::fabs(w[a]), fb = std::fabs(w[b]);
    return fa != fb ? fa < fb : a < b;
  });
  const double exact = sparsity * static_cast<double>(w.size());
  double prune = std::floor(exact);
  const double frac = exact - prune;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(prune, 2.0) != 0.0)) prune += 1.0;
  std::vector<bool> kept(w.size(), true);
  for (std::size_t i = 0; i < static_cast<std::size_t>(prune) && i < w.size(); ++i) kept[idx[i]] = false;
  return kept;
}

/// Evaluator driven by a callback; training and gradients are optional.
class ScriptedEvaluator : public prunekit::Evaluator {
 public:
  using EvalFn = std::function<double(const prunekit::ModelSnapshot&, prunekit::Split)>;

  explicit ScriptedEvaluator(EvalFn fn, prunekit::TrainerCapabilities caps = {false, false, false})
      : fn_(std::move(fn)), caps_(caps) {}

  prunekit::TrainerCapabilities capabilities() const override { return caps_; }
  using prunekit::Evaluator::evaluate;
  prunekit::EvaluationResult evaluate(const prunekit::ModelSnapshot& m, prunekit::Split s) override {
    ++evaluations;
    return {fn_(m, s), std::nullopt, 1};
  }
  prunekit::TrainReport train(prunekit::ModelSnapshot& m, const prunekit::TrainOptions& o) override {
    if (!caps_.supports_retrain) return Evaluator::train(m, o);
    ++train_calls;
    if (on_train) on_train(m, o);
    prunekit::TrainReport r;
    r.epoch_loss.assign(o.epochs, 0.0);
    r.result = evaluate(m, prunekit::Split::test);
    return r;
  }
  prunekit::GradientStats gradients(const prunekit::ModelSnapshot& m, const std::string& layer) override {
    if (!caps_.supports_gradients) return Evaluator::gradients(m, layer);
    return {layer, std::vector<double>(m.layer(layer).parameter_count(), 0.0)};
  }

  std::function<void(prunekit::ModelSnapshot&, const prunekit::TrainOptions&)> on_train;
  std::size_t evaluations = 0;
  std::size_t train_calls = 0;

 private:
  EvalFn fn_;
  prunekit::TrainerCapabilities caps_;
};

}  // namespace testing
