#include "prunekit/external.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include "prunekit/errors.hpp"

namespace prunekit {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

EvaluationResult evaluation_from_json(const json& reply) {
  try {
    EvaluationResult r;
    r.top1 = reply.at("top1").get<double>();
    if (reply.contains("top5") && !reply["top5"].is_null()) r.top5 = reply["top5"].get<double>();
    if (reply.contains("samples")) r.samples = reply["samples"].get<std::size_t>();
    if (!(r.top1 >= 0.0 && r.top1 <= 100.0) || (r.top5 && !(*r.top5 >= r.top1 && *r.top5 <= 100.0)))
      throw ProtocolError("evaluation reply out of range: " + reply.dump());
    return r;
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed evaluation reply: ") + e.what());
  }
}

ExternalEvaluator::ExternalEvaluator(const ModelSnapshot& model, ExternalOptions options)
    : options_(std::move(options)) {
  if (options_.command.empty()) throw ConfigError("external evaluator command is empty");
  std::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2], out_pipe[2];
  if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0)
    throw EvaluatorError(std::string("pipe: ") + std::strerror(errno));
  pid_ = ::fork();
  if (pid_ < 0) throw EvaluatorError(std::string("fork: ") + std::strerror(errno));
  if (pid_ == 0) {
    ::setpgid(0, 0);
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    for (const auto& [k, v] : options_.env) ::setenv(k.c_str(), v.c_str(), 1);
    ::execl("/bin/sh", "sh", "-c", options_.command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::setpgid(pid_, pid_);
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  ::fcntl(to_child_, F_SETFD, FD_CLOEXEC);
  ::fcntl(from_child_, F_SETFD, FD_CLOEXEC);

  const json reply = request({{"op", "describe"}});
  try {
    const auto& layers = reply.at("layers");
    if (layers.size() != model.layers.size())
      throw ProtocolError("describe lists " + std::to_string(layers.size()) + " layers, model has " +
                          std::to_string(model.layers.size()));
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto name = layers[i].at("name").get<std::string>();
      const auto shape = layers[i].at("shape").get<std::vector<std::size_t>>();
      if (name != model.layers[i].name() || shape != model.layers[i].shape())
        throw ProtocolError("describe layer " + std::to_string(i) + " (" + name + ") does not match the manifest");
    }
    const auto& c = reply.at("capabilities");
    caps_.supports_gradients = c.value("gradients", false);
    caps_.supports_retrain = c.value("retrain", false);
    caps_.supports_activations = c.value("activations", false);
  } catch (const json::exception& e) {
    kill_child();
    throw ProtocolError(std::string("malformed describe reply: ") + e.what());
  } catch (...) {
    kill_child();
    throw;
  }
}

ExternalEvaluator::~ExternalEvaluator() {
  try {
    close();
  } catch (...) {
  }
}

void ExternalEvaluator::close() {
  if (pid_ <= 0) return;
  send_line(json{{"id", next_id_++}, {"op", "shutdown"}}.dump() + "\n");
  ::close(to_child_);
  to_child_ = -1;
  const auto deadline = Clock::now() + std::chrono::seconds(5);
  int status = 0;
  while (::waitpid(pid_, &status, WNOHANG) == 0) {
    if (Clock::now() > deadline) {
      kill_child();
      return;
    }
    ::usleep(10000);
  }
  pid_ = -1;
  ::close(from_child_);
  from_child_ = -1;
}

void ExternalEvaluator::kill_child() {
  if (pid_ > 0) {
    ::kill(-pid_, SIGKILL);
    ::kill(pid_, SIGKILL);
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
  pid_ = -1;
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  to_child_ = from_child_ = -1;
}

bool ExternalEvaluator::send_line(const std::string& line) {
  std::size_t off = 0;
  while (off < line.size()) {
    const auto n = ::write(to_child_, line.data() + off, line.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

std::optional<json> ExternalEvaluator::await(std::uint64_t id, Clock::time_point deadline) {
  for (;;) {
    for (auto nl = buffer_.find('\n'); nl != std::string::npos; nl = buffer_.find('\n')) {
      const std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      json msg;
      try {
        msg = json::parse(line);
      } catch (const json::exception&) {
        kill_child();
        throw ProtocolError("external evaluator sent invalid JSON: " + line.substr(0, 200));
      }
      if (!msg.is_object() || !msg.contains("id")) {
        kill_child();
        throw ProtocolError("external evaluator reply lacks an id: " + line.substr(0, 200));
      }
      if (msg["id"] == json(id)) return msg;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (left.count() <= 0) return std::nullopt;
    pollfd pfd{from_child_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw EvaluatorError(std::string("poll: ") + std::strerror(errno));
    }
    if (rc == 0) return std::nullopt;
    char buf[65536];
    const auto n = ::read(from_child_, buf, sizeof buf);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw EvaluatorError(std::string("read: ") + std::strerror(errno));
    }
    if (n == 0) {
      kill_child();
      throw EvaluatorError("external evaluator exited");
    }
    buffer_.append(buf, static_cast<std::size_t>(n));
  }
}

json ExternalEvaluator::request(json message) {
  if (!alive()) throw EvaluatorError("external evaluator session is closed");
  const std::string op = message.value("op", std::string("?"));
  for (int attempt = 0; attempt < 2; ++attempt) {
    const std::uint64_t id = next_id_++;
    message["id"] = id;
    if (!send_line(message.dump() + "\n")) {
      kill_child();
      throw EvaluatorError("external evaluator closed its input");
    }
    auto reply = await(id, Clock::now() + options_.timeout);
    if (!reply) continue;
    if (reply->contains("error")) {
      const auto& e = (*reply)["error"];
      const std::string code = e.is_object() ? e.value("code", std::string("unknown")) : "unknown";
      const std::string text = e.is_object() ? e.value("message", std::string()) : e.dump();
      throw EvaluatorError("external evaluator error in " + op + " [" + code + "]: " + text);
    }
    return std::move(*reply);
  }
  kill_child();
  throw EvaluatorError("external evaluator timed out on " + op + " twice; session aborted");
}

json ExternalEvaluator::model_request(const ModelSnapshot& model, const char* op) {
  json sparsities = json::object();
  bool custom = false;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    sparsities[model.layers[i].name()] = model.masks[i].sparsity();
    if (!(model.masks[i] == magnitude_mask(model.layers[i], model.masks[i].sparsity()))) custom = true;
  }
  json msg{{"op", op}, {"sparsities", sparsities}};
  if (custom) {
    std::filesystem::create_directories(options_.work_dir);
    const auto path = options_.work_dir / ("masks-" + std::to_string(::getpid()) + "-" +
                                           std::to_string(mask_files_++) + ".bin");
    save_masks(model.masks, path);
    msg["masks_uri"] = path.string();
  }
  return msg;
}

EvaluationResult ExternalEvaluator::evaluate(const ModelSnapshot& model, Split split) {
  auto msg = model_request(model, "evaluate");
  msg["split"] = to_string(split);
  return evaluation_from_json(request(std::move(msg)));
}

TrainReport ExternalEvaluator::train(ModelSnapshot& model, const TrainOptions& options) {
  if (!caps_.supports_retrain) throw CapabilityError("external evaluator does not support retrain");
  auto msg = model_request(model, "retrain");
  msg["epochs"] = options.epochs;
  msg["masking"] = options.masking;
  msg["learning_rate"] = options.learning_rate;
  if (options.seed) msg["seed"] = *options.seed;
  const auto reply = request(std::move(msg));
  TrainReport rep;
  rep.result = evaluation_from_json(reply);
  if (reply.contains("epoch_loss")) rep.epoch_loss = reply["epoch_loss"].get<std::vector<double>>();
  return rep;
}

GradientStats ExternalEvaluator::gradients(const ModelSnapshot& model, const std::string& layer) {
  if (!caps_.supports_gradients) throw CapabilityError("external evaluator does not support gradients");
  const auto li = model.index_of(layer);
  const auto reply = request({{"op", "gradients"}, {"layer", layer}});
  try {
    GradientStats g{layer, reply.at("importance").get<std::vector<double>>()};
    if (g.per_weight_importance.size() != model.layers[li].parameter_count())
      throw ProtocolError("gradient importance for " + layer + " has wrong length");
    return g;
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed gradients reply: ") + e.what());
  }
}

std::vector<LayerActivations> ExternalEvaluator::activations(const ModelSnapshot& model, Split split) {
  if (!caps_.supports_activations) throw CapabilityError("external evaluator does not support activations");
  std::vector<LayerActivations> out;
  for (const auto& layer : model.layers) {
    auto msg = model_request(model, "activations");
    msg["layer"] = layer.name();
    msg["split"] = to_string(split);
    const auto reply = request(std::move(msg));
    try {
      LayerActivations la;
      la.layer = layer.name();
      la.global_means = reply.at("filter_means").get<std::vector<double>>();
      if (la.global_means.size() != layer.out_channels())
        throw ProtocolError("activation means for " + layer.name() + " have wrong length");
      if (reply.contains("class_means"))
        for (const auto& [k, v] : reply["class_means"].items()) {
          const auto cls = static_cast<std::uint32_t>(std::stoul(k));
          la.class_means[cls] = v.get<std::vector<double>>();
          if (la.class_means[cls].size() != layer.out_channels())
            throw ProtocolError("class activation means for " + layer.name() + " have wrong length");
        }
      if (reply.contains("class_counts"))
        for (const auto& [k, v] : reply["class_counts"].items())
          la.class_counts[static_cast<std::uint32_t>(std::stoul(k))] = v.get<std::size_t>();
      out.push_back(std::move(la));
    } catch (const json::exception& e) {
      throw ProtocolError(std::string("malformed activations reply: ") + e.what());
    } catch (const std::logic_error& e) {
      throw ProtocolError(std::string("malformed activations reply: ") + e.what());
    }
  }
  return out;
}

}  // namespace prunekit
