// Line-JSON evaluator server backed by the built-in engine, with fault
// injection switches for protocol tests. --hang-once leaves the first
// matching request unanswered; --hang blocks forever on it.
//
//   mock_trainer --model DIR --data DIR [--hang OP] [--hang-once OP]
//                [--bad-describe] [--fixed-top1 X] [--no-caps]
//                [--noise-line] [--log FILE]

#include <chrono>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "prunekit/evaluator.hpp"
#include "prunekit/model_store.hpp"

using nlohmann::json;
using namespace prunekit;

namespace {

Split split_of(const json& msg) {
  const std::string s = msg.value("split", std::string("test"));
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  return Split::test;
}

void apply_request_masks(ModelSnapshot& m, const json& msg) {
  if (msg.contains("masks_uri")) {
    install_masks(m, msg["masks_uri"].get<std::string>());
    return;
  }
  m.reset_masks();
  if (!msg.contains("sparsities")) return;
  for (const auto& [name, s] : msg["sparsities"].items()) {
    const auto i = m.index_of(name);
    m.set_mask(i, magnitude_mask(m.layers[i], s.get<double>()));
    m.targets[i] = s.get<double>();
  }
}

json result_json(const EvaluationResult& r) {
  json j{{"top1", r.top1}, {"samples", r.samples}};
  if (r.top5) j["top5"] = *r.top5;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mock evaluator"};
  std::string model_dir, data_dir, hang, hang_once, log_path;
  bool bad_describe = false, no_caps = false, noise_line = false;
  double fixed_top1 = -1.0;
  app.add_option("--model", model_dir)->required();
  app.add_option("--data", data_dir)->required();
  app.add_option("--hang", hang);
  app.add_option("--hang-once", hang_once);
  app.add_option("--fixed-top1", fixed_top1);
  app.add_option("--log", log_path);
  app.add_flag("--bad-describe", bad_describe);
  app.add_flag("--no-caps", no_caps);
  app.add_flag("--noise-line", noise_line);
  CLI11_PARSE(app, argc, argv);

  ModelSnapshot model = load_model(model_dir);
  BuiltinEvaluator ev(load_data_bundle(data_dir), 11);
  std::ofstream log;
  if (!log_path.empty()) log.open(log_path, std::ios::app);

  std::string line;
  while (std::getline(std::cin, line)) {
    if (log.is_open()) log << line << std::endl;
    json msg = json::parse(line, nullptr, false);
    if (msg.is_discarded() || !msg.is_object()) {
      std::cout << json{{"id", nullptr}, {"error", {{"code", "bad_request"}, {"message", "not JSON"}}}}.dump()
                << std::endl;
      continue;
    }
    const json id = msg.value("id", json(nullptr));
    const std::string op = msg.value("op", std::string());
    if (op == hang) std::this_thread::sleep_for(std::chrono::hours(1));
    if (op == hang_once) {
      hang_once.clear();
      continue;
    }
    if (noise_line) std::cout << json{{"id", 999999}, {"note", "stale"}}.dump() << '\n';
    json reply;
    try {
      if (op == "describe") {
        json layers = json::array();
        for (const auto& l : model.layers) {
          auto shape = l.shape();
          if (bad_describe) shape.front() += 1;
          layers.push_back({{"name", l.name()}, {"shape", shape}});
        }
        reply = {{"layers", layers},
                 {"capabilities",
                  {{"gradients", !no_caps}, {"retrain", !no_caps}, {"activations", !no_caps}}}};
      } else if (op == "evaluate") {
        apply_request_masks(model, msg);
        reply = result_json(ev.evaluate(model, split_of(msg)));
        if (fixed_top1 >= 0) reply["top1"] = fixed_top1, reply.erase("top5");
      } else if (op == "retrain") {
        apply_request_masks(model, msg);
        TrainOptions o;
        o.epochs = msg.at("epochs").get<std::size_t>();
        o.masking = msg.at("masking").get<bool>();
        o.learning_rate = msg.value("learning_rate", 0.01);
        if (msg.contains("seed")) o.seed = msg["seed"].get<std::uint64_t>();
        const auto rep = ev.train(model, o);
        reply = result_json(rep.result);
        reply["epoch_loss"] = rep.epoch_loss;
      } else if (op == "gradients") {
        const auto g = ev.gradients(model, msg.at("layer").get<std::string>());
        reply = {{"importance", g.per_weight_importance}};
      } else if (op == "activations") {
        apply_request_masks(model, msg);
        const std::string layer = msg.at("layer").get<std::string>();
        for (const auto& a : ev.activations(model, split_of(msg))) {
          if (a.layer != layer) continue;
          json cm = json::object(), cc = json::object();
          for (const auto& [c, v] : a.class_means) cm[std::to_string(c)] = v;
          for (const auto& [c, n] : a.class_counts) cc[std::to_string(c)] = n;
          reply = {{"filter_means", a.global_means}, {"class_means", cm}, {"class_counts", cc}};
        }
        if (reply.is_null()) throw std::runtime_error("unknown layer " + layer);
      } else if (op == "shutdown") {
        std::cout << json{{"id", id}, {"ok", true}}.dump() << std::endl;
        return 0;
      } else {
        reply = {{"error", {{"code", "unknown_op"}, {"message", op}}}};
      }
    } catch (const std::exception& e) {
      reply = {{"error", {{"code", "failed"}, {"message", e.what()}}}};
    }
    reply["id"] = id;
    std::cout << reply.dump() << std::endl;
  }
  return 0;
}
