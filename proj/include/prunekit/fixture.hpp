#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/evaluator.hpp"
#include "prunekit/model_store.hpp"

namespace prunekit {

/// Synthetic shape-classification fixture. `arch` is "cnn" (two conv
/// blocks and two dense layers) or "mlp3" (three dense layers).
struct FixtureSpec {
  std::string arch = "cnn";
  std::size_t classes = 10;
  std::size_t image_size = 16;
  std::size_t samples = 5000;
  double train_fraction = 0.6;
  double noise = 0.3;
  std::size_t hidden = 192;
  std::size_t epochs = 8;
  double learning_rate = 0.02;
  std::uint64_t seed = 1;
};

inline constexpr std::size_t kMaxFixtureParameters = 100000;
inline constexpr std::size_t kMaxFixtureSamples = 10000;
inline constexpr std::size_t kMaxShapeClasses = 10;

/// Throws ConfigError when the spec leaves the desk-scale bounds.
void validate(const FixtureSpec& spec);

nlohmann::json to_json(const FixtureSpec& spec);
FixtureSpec fixture_spec_from_json(const nlohmann::json& j);

/// Balanced labeled shapes drawn on a 1 x size x size canvas with Gaussian
/// pixel noise; sample order is shuffled.
Dataset generate_shapes(std::size_t classes, std::size_t image_size, std::size_t samples, double noise,
                        std::uint64_t seed);

/// Untrained model with He-normal weights and zero biases.
ModelSnapshot init_fixture_model(const FixtureSpec& spec);

struct Fixture {
  ModelSnapshot model;
  DataBundle data;
  EvaluationResult baseline;
  double validation_top1 = 0.0;
  std::vector<double> loss_curve;
  nlohmann::json metadata;
};

/// Generates and trains the fixture in memory.
Fixture build_fixture(const FixtureSpec& spec);

/// Builds the fixture and writes `model/`, `data/{train,test}.bin` and
/// `fixture.json` under `dir`.
Fixture make_fixture(const FixtureSpec& spec, const std::filesystem::path& dir);

}  // namespace prunekit
