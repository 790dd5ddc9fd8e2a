#include "prunekit/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "prunekit/errors.hpp"
#include "prunekit/rng.hpp"

namespace prunekit {

namespace fs = std::filesystem;
using nlohmann::json;

void validate(const FixtureSpec& s) {
  if (s.arch != "cnn" && s.arch != "mlp3") throw ConfigError("fixture arch must be cnn or mlp3");
  if (s.samples == 0) throw ConfigError("fixture samples must be positive");
  if (s.samples > kMaxFixtureSamples)
    throw ConfigError("fixture samples exceed " + std::to_string(kMaxFixtureSamples));
  if (s.classes < 2 || s.classes > kMaxShapeClasses) throw ConfigError("fixture classes must be in [2, 10]");
  if (s.image_size < 8 || s.image_size > 64) throw ConfigError("fixture image_size must be in [8, 64]");
  if (s.arch == "cnn" && s.image_size % 4 != 0) throw ConfigError("cnn fixture image_size must be a multiple of 4");
  if (!(s.train_fraction > 0.0 && s.train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0, 1)");
  if (!(s.noise >= 0.0)) throw ConfigError("noise must be >= 0");
  if (s.hidden == 0) throw ConfigError("hidden width must be positive");
  if (!(s.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  const auto train = static_cast<std::size_t>(std::floor(s.train_fraction * static_cast<double>(s.samples)));
  if (train == 0 || train == s.samples) throw ConfigError("fixture split leaves train or test empty");
  const auto params = init_fixture_model(s).layer_sizes();
  const auto total = std::accumulate(params.begin(), params.end(), std::size_t{0});
  if (total > kMaxFixtureParameters)
    throw ConfigError("fixture has " + std::to_string(total) + " parameters, limit " +
                      std::to_string(kMaxFixtureParameters));
}

json to_json(const FixtureSpec& s) {
  return {{"arch", s.arch},       {"classes", s.classes},         {"image_size", s.image_size},
          {"samples", s.samples}, {"train_fraction", s.train_fraction}, {"noise", s.noise},
          {"hidden", s.hidden},   {"epochs", s.epochs},           {"learning_rate", s.learning_rate},
          {"seed", s.seed}};
}

FixtureSpec fixture_spec_from_json(const json& j) {
  FixtureSpec s;
  for (const auto& [k, v] : j.items()) {
    if (k == "arch") s.arch = v.get<std::string>();
    else if (k == "classes") s.classes = v.get<std::size_t>();
    else if (k == "image_size") s.image_size = v.get<std::size_t>();
    else if (k == "samples") s.samples = v.get<std::size_t>();
    else if (k == "train_fraction") s.train_fraction = v.get<double>();
    else if (k == "noise") s.noise = v.get<double>();
    else if (k == "hidden") s.hidden = v.get<std::size_t>();
    else if (k == "epochs") s.epochs = v.get<std::size_t>();
    else if (k == "learning_rate") s.learning_rate = v.get<double>();
    else if (k == "seed") s.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown fixture key: " + k);
  }
  return s;
}

namespace {

struct ShapeParams {
  double cy, cx, r, t;
};

/// Coverage of pixel offset (dy, dx) by the class template.
bool covers(std::size_t cls, const ShapeParams& p, double dy, double dx) {
  const double ady = std::fabs(dy), adx = std::fabs(dx), h = p.t / 2.0, r = p.r;
  const bool inside = ady <= r && adx <= r;
  switch (cls) {
    case 0: return ady <= h && adx <= r;                                  // horizontal bar
    case 1: return adx <= h && ady <= r;                                  // vertical bar
    case 2: return inside && std::fabs(dx - dy) / std::sqrt(2.0) <= h;    // falling diagonal
    case 3: return inside && std::fabs(dx + dy) / std::sqrt(2.0) <= h;    // rising diagonal
    case 4: return std::max(ady, adx) <= r && std::max(ady, adx) >= r - p.t;  // square outline
    case 5: return std::max(ady, adx) <= 0.6 * r;                          // filled square
    case 6: return (ady <= h && adx <= r) || (adx <= h && ady <= r);       // plus
    case 7: return inside && (std::fabs(dx - dy) / std::sqrt(2.0) <= h || std::fabs(dx + dy) / std::sqrt(2.0) <= h);
    case 8: return std::fabs(std::sqrt(dx * dx + dy * dy) - r) <= h;        // ring
    default:                                                                 // corner
      return (adx <= r && dy >= r - p.t && dy <= r) || (dx >= -r && dx <= -r + p.t && ady <= r);
  }
}

}  // namespace

Dataset generate_shapes(std::size_t classes, std::size_t size, std::size_t samples, double noise,
                        std::uint64_t seed) {
  if (classes < 2 || classes > kMaxShapeClasses) throw ConfigError("shape classes must be in [2, 10]");
  Rng rng(derive_seed(seed, "shapes"));
  Dataset d;
  d.sample_shape = {1, size, size};
  d.num_classes = classes;
  const std::size_t area = size * size;
  const double n = static_cast<double>(size);
  std::vector<float> inputs(samples * area);
  std::vector<std::uint32_t> labels(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    const auto cls = static_cast<std::uint32_t>(i % classes);
    labels[i] = cls;
    ShapeParams p;
    const double mid = (n - 1.0) / 2.0;
    p.cy = mid + (rng.uniform() - 0.5) * n / 4.0;
    p.cx = mid + (rng.uniform() - 0.5) * n / 4.0;
    p.r = n * (0.22 + 0.14 * rng.uniform());
    p.t = 1.0 + rng.uniform();
    const double intensity = 0.6 + 0.4 * rng.uniform();
    float* px = inputs.data() + i * area;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double v = covers(cls, p, static_cast<double>(y) - p.cy, static_cast<double>(x) - p.cx) ? intensity : 0.0;
        px[y * size + x] = static_cast<float>(v + noise * rng.normal());
      }
  }
  std::vector<std::size_t> order(samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = samples; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  d.inputs.resize(inputs.size());
  d.labels.resize(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(order[i] * area), area,
                d.inputs.begin() + static_cast<std::ptrdiff_t>(i * area));
    d.labels[i] = labels[order[i]];
  }
  return d;
}

ModelSnapshot init_fixture_model(const FixtureSpec& s) {
  Rng rng(derive_seed(s.seed, "init"));
  auto he = [&](std::size_t n, std::size_t fan_in) {
    std::vector<float> v(n);
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& x : v) x = static_cast<float>(rng.normal() * scale);
    return v;
  };
  ModelSnapshot m;
  const std::size_t hw = s.image_size;
  m.graph.input = {1, hw, hw};
  m.graph.num_classes = s.classes;
  if (s.arch == "mlp3") {
    const std::size_t in = hw * hw, h1 = std::max<std::size_t>(s.hidden, 2), h2 = std::max<std::size_t>(s.hidden / 2, 2);
    m.layers.emplace_back("fc1", LayerKind::dense, std::vector<std::size_t>{h1, in}, he(h1 * in, in),
                          std::vector<float>(h1, 0.0f));
    m.layers.emplace_back("fc2", LayerKind::dense, std::vector<std::size_t>{h2, h1}, he(h2 * h1, h1),
                          std::vector<float>(h2, 0.0f));
    m.layers.emplace_back("fc3", LayerKind::dense, std::vector<std::size_t>{s.classes, h2},
                          he(s.classes * h2, h2), std::vector<float>(s.classes, 0.0f));
    m.graph.ops = {ArchOp::flatten(), ArchOp::dense("fc1"), ArchOp::relu(),
                   ArchOp::dense("fc2"), ArchOp::relu(),    ArchOp::dense("fc3")};
  } else {
    const std::size_t flat = 16 * (hw / 4) * (hw / 4);
    m.layers.emplace_back("conv1", LayerKind::conv2d, std::vector<std::size_t>{8, 1, 3, 3}, he(72, 9),
                          std::vector<float>(8, 0.0f));
    m.layers.emplace_back("conv2", LayerKind::conv2d, std::vector<std::size_t>{16, 8, 3, 3}, he(1152, 72),
                          std::vector<float>(16, 0.0f));
    m.layers.emplace_back("fc1", LayerKind::dense, std::vector<std::size_t>{s.hidden, flat},
                          he(s.hidden * flat, flat), std::vector<float>(s.hidden, 0.0f));
    m.layers.emplace_back("fc2", LayerKind::dense, std::vector<std::size_t>{s.classes, s.hidden},
                          he(s.classes * s.hidden, s.hidden), std::vector<float>(s.classes, 0.0f));
    m.graph.ops = {ArchOp::conv2d("conv1", 1, 1), ArchOp::relu(), ArchOp::maxpool(2),
                   ArchOp::conv2d("conv2", 1, 1), ArchOp::relu(), ArchOp::maxpool(2),
                   ArchOp::flatten(),             ArchOp::dense("fc1"), ArchOp::relu(),
                   ArchOp::dense("fc2")};
  }
  m.reset_masks();
  return m;
}

Fixture build_fixture(const FixtureSpec& spec) {
  validate(spec);
  Fixture f;
  const Dataset all = generate_shapes(spec.classes, spec.image_size, spec.samples, spec.noise, spec.seed);
  const auto train_n = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(spec.samples)));
  f.data.train = all.slice(0, train_n);
  f.data.test = all.slice(train_n, spec.samples - train_n);
  const auto val_n = static_cast<std::size_t>(std::floor(0.2 * static_cast<double>(f.data.test.size())));
  f.data.validation = f.data.test.slice(0, std::max<std::size_t>(val_n, 1));

  f.model = init_fixture_model(spec);
  BuiltinEvaluator ev(f.data, derive_seed(spec.seed, "evaluator"));
  TrainOptions opts;
  opts.epochs = spec.epochs;
  opts.learning_rate = spec.learning_rate;
  opts.masking = false;
  opts.seed = derive_seed(spec.seed, "fixture-train");
  const auto rep = ev.train(f.model, opts);
  f.loss_curve = rep.epoch_loss;
  f.baseline = ev.evaluate(f.model, Split::test);
  f.validation_top1 = ev.evaluate(f.model, Split::validation).top1;

  std::size_t params = 0;
  for (auto n : f.model.layer_sizes()) params += n;
  f.metadata = {{"format", "prunekit-fixture"},
                {"version", 1},
                {"spec", to_json(spec)},
                {"parameters", params},
                {"train_samples", f.data.train.size()},
                {"test_samples", f.data.test.size()},
                {"validation_samples", f.data.validation.size()},
                {"baseline_top1", f.baseline.top1},
                {"validation_top1", f.validation_top1},
                {"loss_curve", f.loss_curve}};
  f.metadata["baseline_top5"] = f.baseline.top5 ? json(*f.baseline.top5) : json(nullptr);
  return f;
}

Fixture make_fixture(const FixtureSpec& spec, const fs::path& dir) {
  auto f = build_fixture(spec);
  fs::create_directories(dir / "data");
  save_model(f.model, dir / "model");
  save_dataset(f.data.train, dir / "data" / "train.bin");
  save_dataset(f.data.test, dir / "data" / "test.bin");
  std::ofstream out(dir / "fixture.json");
  out << f.metadata.dump(2) << '\n';
  if (!out) throw Error("cannot write " + (dir / "fixture.json").string());
  return f;
}

}  // namespace prunekit
