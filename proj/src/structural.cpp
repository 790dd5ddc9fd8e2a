#include "prunekit/structural.hpp"

#include <cmath>
#include <optional>

#include "prunekit/errors.hpp"
#include "prunekit/pruning_ops.hpp"
#include "prunekit/trace.hpp"

namespace prunekit {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<LayerChannels> channel_summary(const ModelSnapshot& model) {
  std::vector<LayerChannels> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind() != LayerKind::conv2d) continue;
    out.push_back({l.name(), l.out_channels(), l.out_channels() - removed_channels(model, i).size()});
  }
  return out;
}

std::size_t channels_to_remove(std::size_t remaining, double fraction) {
  if (remaining <= 1) return 0;
  const auto n = static_cast<std::size_t>(std::nearbyint(fraction * static_cast<double>(remaining)));
  return std::clamp<std::size_t>(n, 1, remaining - 1);
}

namespace {

fs::path model_dir(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p += ".model";
  return p;
}

void fill_summary(StructuralResult& r, const ModelSnapshot& model) {
  r.channels = channel_summary(model);
  std::size_t total = 0, remaining = 0;
  for (const auto& c : r.channels) {
    total += c.total;
    remaining += c.remaining;
  }
  r.channel_reduction = total ? static_cast<double>(total - remaining) / static_cast<double>(total) : 0.0;
  r.parameter_reduction = weighted_sparsity(model);
}

}  // namespace

StructuralResult run_structural(ModelSnapshot& model, Evaluator& trainer, const StructuralConfig& config,
                                const RetrainPolicy& policy, const RunControl& control) {
  if (!(config.fraction_per_iter > 0.0 && config.fraction_per_iter < 1.0))
    throw ConfigError("fraction_per_iter must be in (0, 1)");
  if (!(config.drop_budget >= 0.0)) throw ConfigError("drop_budget must be >= 0");
  bool has_conv = false;
  for (const auto& l : model.layers) has_conv |= l.kind() == LayerKind::conv2d;
  if (!has_conv) throw ContractError("structural pruning needs at least one conv2d layer");
  if (!trainer.capabilities().supports_retrain) throw CapabilityError("evaluator cannot retrain");

  RetrainPolicy train_policy = policy;
  train_policy.masking = true;

  StructuralResult r;
  std::size_t start = 0;
  double current_top1 = 0.0;
  if (control.resume_state) {
    try {
      const auto& st = *control.resume_state;
      if (st.at("kind") != "structural") throw LoadError(LoadErrorKind::corrupt, "not a structural checkpoint");
      start = st.at("iteration").get<std::size_t>();
      r.baseline_top1 = st.at("baseline_top1").get<double>();
      current_top1 = st.at("current_top1").get<double>();
      for (const auto& f : st.at("rows")) r.rows.push_back(retrain_row_from_fields(f.get<std::vector<std::string>>()));
    } catch (const json::exception& e) {
      throw LoadError(LoadErrorKind::corrupt, std::string("malformed structural checkpoint: ") + e.what());
    }
  } else {
    r.baseline_top1 = trainer.evaluate(model, config.eval_split).top1;
    current_top1 = r.baseline_top1;
  }
  r.accepted_iterations = start;

  std::optional<CsvTrace> csv;
  if (control.trace_path)
    csv.emplace(control.resume_state ? CsvTrace::resume(*control.trace_path, retrain_trace_header(), r.rows.size())
                                     : CsvTrace(*control.trace_path, retrain_trace_header()));
  auto row = [&](RetrainLogRow row) {
    if (csv) csv->row(to_fields(row));
    r.rows.push_back(std::move(row));
  };

  json boundary;
  ModelSnapshot boundary_model = model;
  auto mark_boundary = [&](std::size_t iteration) {
    json rows = json::array();
    for (const auto& x : r.rows) rows.push_back(to_fields(x));
    boundary = {{"kind", "structural"},
                {"iteration", iteration},
                {"baseline_top1", r.baseline_top1},
                {"current_top1", current_top1},
                {"rows", rows}};
    boundary_model = model;
  };
  auto write_boundary = [&] {
    if (!control.checkpoint_path || boundary.is_null()) return;
    save_snapshot(boundary_model, model_dir(*control.checkpoint_path));
    save_checkpoint(boundary, *control.checkpoint_path);
  };
  mark_boundary(start);

  try {
    for (std::size_t it = start; it < config.max_iterations; ++it) {
      const ModelSnapshot before = model;
      bool removed_any = false;
      for (std::size_t li = 0; li < model.layers.size(); ++li) {
        if (model.layers[li].kind() != LayerKind::conv2d) continue;
        const std::size_t live = model.layers[li].out_channels() - removed_channels(model, li).size();
        const std::size_t count = channels_to_remove(live, config.fraction_per_iter);
        if (count == 0) continue;
        remove_lowest_channels(model, li, count);
        removed_any = true;
        row({it + 1, model.layers[li].name(), count, config.fraction_per_iter, 0.0, "remove",
             model.masks[li].sparsity(), 0.0});
      }
      if (!removed_any) break;

      EvaluationResult result;
      for (std::size_t k = 0; k < config.retrain_epochs; ++k) {
        const auto rep = trainer.train(model, train_policy.epoch_options(it * config.retrain_epochs + k));
        result = rep.result;
      }
      if (config.retrain_epochs == 0 || config.eval_split != Split::test)
        result = trainer.evaluate(model, config.eval_split);
      const double drop = r.baseline_top1 - result.top1;
      if (drop <= config.drop_budget) {
        current_top1 = result.top1;
        r.accepted_iterations = it + 1;
        row({it + 1, "*", 0, 0.0, drop, "accept", weighted_sparsity(model), result.top1});
        mark_boundary(it + 1);
        if (control.checkpoint_path) write_boundary();
        if (control.on_epoch) control.on_epoch(it + 1);
      } else {
        model = before;
        row({it + 1, "*", 0, 0.0, drop, "revert", weighted_sparsity(model), result.top1});
        break;
      }
    }
  } catch (const EvaluatorError&) {
    write_boundary();
    throw;
  }

  r.final_top1 = current_top1;
  fill_summary(r, model);
  return r;
}

json to_json(const StructuralResult& r) {
  json layers = json::array();
  for (const auto& c : r.channels)
    layers.push_back({{"layer", c.layer}, {"total", c.total}, {"remaining", c.remaining}});
  return {{"baseline_top1", r.baseline_top1},
          {"final_top1", r.final_top1},
          {"accuracy_drop", r.baseline_top1 - r.final_top1},
          {"accepted_iterations", r.accepted_iterations},
          {"channels", layers},
          {"channel_reduction", r.channel_reduction},
          {"parameter_reduction", r.parameter_reduction}};
}

}  // namespace prunekit
