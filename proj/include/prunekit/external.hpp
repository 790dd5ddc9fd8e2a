#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <sys/types.h>
#include <vector>

#include <json.hpp>

#include "prunekit/evaluator.hpp"

namespace prunekit {

struct ExternalOptions {
  /// Run through /bin/sh -c.
  std::string command;
  std::map<std::string, std::string> env;
  std::chrono::milliseconds timeout{std::chrono::minutes(10)};
  /// Where mask files referenced by masks_uri are written.
  std::filesystem::path work_dir = std::filesystem::temp_directory_path();
};

/// Evaluator served by a child process over line-delimited JSON on its
/// stdin/stdout. Each request carries an id and the matching response must
/// echo it; responses with other ids are discarded. A call that times out
/// is retried once under a new id, after which the session is closed.
///
/// Retraining happens on the remote side only: local weights are not
/// updated by train().
class ExternalEvaluator : public Evaluator {
 public:
  /// Spawns the process and checks its describe reply against `model`.
  ExternalEvaluator(const ModelSnapshot& model, ExternalOptions options);
  ~ExternalEvaluator() override;
  ExternalEvaluator(const ExternalEvaluator&) = delete;
  ExternalEvaluator& operator=(const ExternalEvaluator&) = delete;

  TrainerCapabilities capabilities() const override { return caps_; }
  using Evaluator::evaluate;
  EvaluationResult evaluate(const ModelSnapshot& model, Split split) override;
  TrainReport train(ModelSnapshot& model, const TrainOptions& options) override;
  GradientStats gradients(const ModelSnapshot& model, const std::string& layer) override;
  std::vector<LayerActivations> activations(const ModelSnapshot& model, Split split) override;

  /// Sends `message` (an "id" is added) and returns the matching response.
  nlohmann::json request(nlohmann::json message);

  bool alive() const noexcept { return pid_ > 0; }
  /// Sends shutdown and reaps the child.
  void close();

 private:
  nlohmann::json model_request(const ModelSnapshot& model, const char* op);
  bool send_line(const std::string& line);
  /// Reads until a response with `id` arrives or the deadline passes.
  std::optional<nlohmann::json> await(std::uint64_t id, std::chrono::steady_clock::time_point deadline);
  void kill_child();

  ExternalOptions options_;
  TrainerCapabilities caps_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
  std::uint64_t next_id_ = 1;
  std::uint64_t mask_files_ = 0;
};

/// Parses an evaluate/retrain reply.
EvaluationResult evaluation_from_json(const nlohmann::json& reply);

}  // namespace prunekit
