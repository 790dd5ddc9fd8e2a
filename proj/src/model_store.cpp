#include "prunekit/model_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"
#include "prunekit/errors.hpp"

namespace prunekit {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(LayerKind kind) noexcept {
  return kind == LayerKind::conv2d ? "conv2d" : "dense";
}

const char* to_string(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::conv2d: return "conv2d";
    case OpKind::dense: return "dense";
    case OpKind::relu: return "relu";
    case OpKind::maxpool: return "maxpool";
    case OpKind::flatten: return "flatten";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// LayerTensor

LayerTensor::LayerTensor(std::string name, LayerKind kind, std::vector<std::size_t> shape,
                         std::vector<float> weights, std::vector<float> bias)
    : name_(std::move(name)), kind_(kind), shape_(std::move(shape)) {
  const std::size_t expected_rank = kind_ == LayerKind::conv2d ? 4 : 2;
  if (shape_.size() != expected_rank)
    throw ContractError("layer " + name_ + ": " + to_string(kind_) + " needs rank " +
                        std::to_string(expected_rank));
  const std::size_t count =
      std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  if (count == 0) throw ContractError("layer " + name_ + ": empty shape");
  if (weights.size() != count)
    throw ContractError("layer " + name_ + ": " + std::to_string(weights.size()) +
                        " weights for shape of " + std::to_string(count));
  if (!bias.empty() && bias.size() != shape_.front())
    throw ContractError("layer " + name_ + ": bias length must equal out channels");
  if (count > std::numeric_limits<std::uint32_t>::max())
    throw ContractError("layer " + name_ + ": too many parameters");

  auto storage = std::make_shared<Storage>();
  storage->weights = std::move(weights);
  storage->bias = std::move(bias);
  storage->order.resize(count);
  std::iota(storage->order.begin(), storage->order.end(), 0u);
  const auto& w = storage->weights;
  std::stable_sort(storage->order.begin(), storage->order.end(),
                   [&w](std::uint32_t a, std::uint32_t b) {
                     return std::fabs(w[a]) < std::fabs(w[b]);
                   });
  data_ = std::move(storage);
}

std::size_t LayerTensor::kernel_area() const noexcept {
  return kind_ == LayerKind::conv2d ? shape_[2] * shape_[3] : 1;
}

LayerTensor LayerTensor::with_weights(std::vector<float> weights, std::vector<float> bias) const {
  return LayerTensor(name_, kind_, shape_, std::move(weights), std::move(bias));
}

// ---------------------------------------------------------------------------
// PruneMask

PruneMask::PruneMask(std::string layer_name, std::size_t size, bool kept)
    : layer_name_(std::move(layer_name)), size_(size), words_((size + 63) / 64, 0) {
  fill(kept);
}

void PruneMask::set_kept(std::size_t i, bool keep) {
  if (i >= size_) throw ContractError("mask index out of range");
  const std::uint64_t bit = std::uint64_t{1} << (i & 63);
  const bool was = words_[i >> 6] & bit;
  if (was == keep) return;
  if (keep) {
    words_[i >> 6] |= bit;
    --pruned_;
  } else {
    words_[i >> 6] &= ~bit;
    ++pruned_;
  }
}

void PruneMask::fill(bool keep) {
  std::fill(words_.begin(), words_.end(), keep ? ~std::uint64_t{0} : 0);
  if (keep && size_ % 64 != 0) words_.back() = (std::uint64_t{1} << (size_ % 64)) - 1;
  pruned_ = keep ? 0 : size_;
}

PruneMask PruneMask::from_words(std::string layer_name, std::size_t size,
                                std::vector<std::uint64_t> words) {
  if (words.size() != (size + 63) / 64) throw ContractError("mask word count mismatch");
  PruneMask mask;
  mask.layer_name_ = std::move(layer_name);
  mask.size_ = size;
  if (size % 64 != 0) words.back() &= (std::uint64_t{1} << (size % 64)) - 1;
  std::size_t kept = 0;
  for (auto w : words) kept += static_cast<std::size_t>(std::popcount(w));
  mask.words_ = std::move(words);
  mask.pruned_ = size - kept;
  return mask;
}

bool PruneMask::pruned_subset_of(const PruneMask& other) const {
  if (other.size_ != size_) return false;
  // pruned here (bit 0) must be pruned there: ~mine & theirs == 0
  for (std::size_t i = 0; i < words_.size(); ++i) {
    std::uint64_t mine_pruned = ~words_[i];
    if (i + 1 == words_.size() && size_ % 64 != 0)
      mine_pruned &= (std::uint64_t{1} << (size_ % 64)) - 1;
    if (mine_pruned & other.words_[i]) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// ModelSnapshot

std::size_t ModelSnapshot::index_of(const std::string& layer_name) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name() == layer_name) return i;
  throw UnknownLayerError(layer_name);
}

std::vector<std::string> ModelSnapshot::layer_names() const {
  std::vector<std::string> out;
  for (const auto& l : layers) out.push_back(l.name());
  return out;
}

std::vector<std::size_t> ModelSnapshot::layer_sizes() const {
  std::vector<std::size_t> out;
  for (const auto& l : layers) out.push_back(l.parameter_count());
  return out;
}

std::vector<double> ModelSnapshot::mask_sparsities() const {
  std::vector<double> out;
  for (const auto& m : masks) out.push_back(m.sparsity());
  return out;
}

void ModelSnapshot::replace_layer(std::size_t index, LayerTensor tensor) {
  if (tensor.name() != layers.at(index).name() || tensor.shape() != layers[index].shape())
    throw ContractError("replace_layer: tensor does not match layer " + layers[index].name());
  layers[index] = std::move(tensor);
}

void ModelSnapshot::set_mask(std::size_t index, PruneMask mask) {
  if (mask.layer_name() != layers.at(index).name() ||
      mask.size() != layers[index].parameter_count())
    throw ContractError("set_mask: mask does not match layer " + layers[index].name());
  masks[index] = std::move(mask);
}

void ModelSnapshot::reset_masks() {
  masks.clear();
  for (const auto& l : layers) masks.emplace_back(l.name(), l.parameter_count(), true);
  targets.assign(layers.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Sparsity arithmetic

std::size_t pruned_count_for(double sparsity, std::size_t count) {
  if (!std::isfinite(sparsity)) throw ContractError("sparsity must be finite");
  const double clamped = std::clamp(sparsity, 0.0, 1.0);
  // nearbyint honours the default round-to-nearest-even mode.
  const double raw = std::nearbyint(clamped * static_cast<double>(count));
  return std::min(count, static_cast<std::size_t>(raw));
}

double snap_fraction(double value) {
  return std::ldexp(std::nearbyint(std::ldexp(value, 32)), -32);
}

PruneMask magnitude_mask(const LayerTensor& layer, double sparsity) {
  const std::size_t n = layer.parameter_count();
  const std::size_t prune = pruned_count_for(sparsity, n);
  PruneMask mask(layer.name(), n, true);
  const auto order = layer.magnitude_order();
  for (std::size_t r = 0; r < prune; ++r) mask.set_kept(order[r], false);
  return mask;
}

double weighted_sparsity(const ModelSnapshot& model) {
  std::size_t pruned = 0, total = 0;
  for (const auto& m : model.masks) {
    pruned += m.pruned_count();
    total += m.size();
  }
  return total == 0 ? 0.0 : static_cast<double>(pruned) / static_cast<double>(total);
}

double weighted_sparsity(std::span<const std::size_t> sizes, std::span<const double> sparsities) {
  if (sizes.size() != sparsities.size())
    throw ContractError("weighted_sparsity: sizes and sparsities differ in length");
  std::size_t pruned = 0, total = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    pruned += pruned_count_for(sparsities[i], sizes[i]);
    total += sizes[i];
  }
  return total == 0 ? 0.0 : static_cast<double>(pruned) / static_cast<double>(total);
}

std::vector<float> effective_weights(const LayerTensor& layer, const PruneMask& mask) {
  if (mask.size() != layer.parameter_count())
    throw ContractError("effective_weights: mask length " + std::to_string(mask.size()) +
                        " != " + std::to_string(layer.parameter_count()));
  const auto w = layer.weights();
  std::vector<float> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = mask.kept(i) ? w[i] : 0.0f;
  return out;
}

void apply_sparsities(ModelSnapshot& model, std::span<const double> targets) {
  if (targets.size() != model.layers.size())
    throw ContractError("apply_sparsities: one target per layer required");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    model.targets[i] = snap_fraction(targets[i]);
    model.masks[i] = magnitude_mask(model.layers[i], model.targets[i]);
  }
}

// ---------------------------------------------------------------------------
// Binary helpers

namespace {

using detail::get_le;
using detail::put_u32;
using detail::put_u64;
using detail::read_file;
using detail::write_file;

std::string encode_floats(std::span<const float> values) {
  std::string out;
  out.reserve(values.size() * 4);
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

std::vector<float> read_tensor(const fs::path& dir, const json& ref, std::size_t expected,
                               const std::string& what) {
  const fs::path file = dir / ref.at("file").get<std::string>();
  const auto offset = ref.value("offset", std::size_t{0});
  const auto bytes = read_file(file);
  const std::size_t length = ref.contains("length") ? ref.at("length").get<std::size_t>()
                                                    : bytes.size() - std::min(offset, bytes.size());
  if (offset + length > bytes.size())
    throw LoadError(LoadErrorKind::shape_mismatch,
                    what + ": byte range exceeds " + file.string());
  if (length != expected * 4)
    throw LoadError(LoadErrorKind::shape_mismatch,
                    what + ": expected " + std::to_string(expected) + " floats, file holds " +
                        std::to_string(length / 4) + (length % 4 ? " (+partial)" : ""));
  std::vector<float> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(&bytes[offset + 4 * i], 4)));
    if (!std::isfinite(out[i]))
      throw LoadError(LoadErrorKind::non_finite, what + " index " + std::to_string(i));
  }
  return out;
}

OpKind parse_op_kind(const std::string& s) {
  if (s == "conv2d") return OpKind::conv2d;
  if (s == "dense") return OpKind::dense;
  if (s == "relu") return OpKind::relu;
  if (s == "maxpool") return OpKind::maxpool;
  if (s == "flatten") return OpKind::flatten;
  throw LoadError(LoadErrorKind::malformed_manifest, "unknown op " + s);
}

}  // namespace

ModelSnapshot load_model(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path))
    throw LoadError(LoadErrorKind::missing_file, manifest_path.string());
  json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::malformed_manifest, e.what());
  }

  ModelSnapshot model;
  try {
    const auto in_shape = manifest.at("input_shape").get<std::vector<std::size_t>>();
    if (in_shape.size() != 3) throw LoadError(LoadErrorKind::malformed_manifest, "input_shape");
    model.graph.input = {in_shape[0], in_shape[1], in_shape[2]};
    model.graph.num_classes = manifest.at("num_classes").get<std::size_t>();

    for (const auto& entry : manifest.at("layers")) {
      const auto name = entry.at("name").get<std::string>();
      const auto kind_s = entry.at("kind").get<std::string>();
      if (kind_s != "conv2d" && kind_s != "dense")
        throw LoadError(LoadErrorKind::malformed_manifest, name + ": kind " + kind_s);
      if (entry.value("dtype", std::string("f32")) != "f32")
        throw LoadError(LoadErrorKind::malformed_manifest, name + ": dtype must be f32");
      const auto kind = kind_s == "conv2d" ? LayerKind::conv2d : LayerKind::dense;
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != (kind == LayerKind::conv2d ? 4u : 2u))
        throw LoadError(LoadErrorKind::shape_mismatch, name + ": rank does not match kind");
      const std::size_t count =
          std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
      auto weights = read_tensor(dir, entry, count, name);
      std::vector<float> bias;
      if (entry.contains("bias")) bias = read_tensor(dir, entry.at("bias"), shape[0], name + ".bias");
      model.layers.emplace_back(name, kind, shape, std::move(weights), std::move(bias));
    }

    for (const auto& op : manifest.at("arch_graph")) {
      ArchOp a;
      a.kind = parse_op_kind(op.at("op").get<std::string>());
      a.layer = op.value("layer", std::string());
      a.stride = op.value("stride", 1);
      a.pad = op.value("pad", 0);
      a.size = op.value("size", 2);
      if ((a.kind == OpKind::conv2d || a.kind == OpKind::dense)) {
        bool found = false;
        for (const auto& l : model.layers) found = found || l.name() == a.layer;
        if (!found)
          throw LoadError(LoadErrorKind::malformed_manifest, "arch_graph references " + a.layer);
      }
      model.graph.ops.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::malformed_manifest, e.what());
  }
  model.reset_masks();
  return model;
}

void save_model(const ModelSnapshot& model, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "prunekit-model";
  manifest["version"] = 1;
  manifest["input_shape"] = {model.graph.input.c, model.graph.input.h, model.graph.input.w};
  manifest["num_classes"] = model.graph.num_classes;
  manifest["layers"] = json::array();
  for (const auto& layer : model.layers) {
    const std::string wfile = layer.name() + ".weight.bin";
    write_file(dir / wfile, encode_floats(layer.weights()));
    json entry = {{"name", layer.name()},
                  {"kind", to_string(layer.kind())},
                  {"shape", layer.shape()},
                  {"dtype", "f32"},
                  {"file", wfile},
                  {"offset", 0},
                  {"length", layer.parameter_count() * 4}};
    if (!layer.bias().empty()) {
      const std::string bfile = layer.name() + ".bias.bin";
      write_file(dir / bfile, encode_floats(layer.bias()));
      entry["bias"] = {{"file", bfile}, {"offset", 0}, {"length", layer.bias().size() * 4}};
    }
    manifest["layers"].push_back(std::move(entry));
  }
  manifest["arch_graph"] = json::array();
  for (const auto& op : model.graph.ops) {
    json j = {{"op", to_string(op.kind)}};
    if (op.kind == OpKind::conv2d || op.kind == OpKind::dense) j["layer"] = op.layer;
    if (op.kind == OpKind::conv2d) {
      j["stride"] = op.stride;
      j["pad"] = op.pad;
    }
    if (op.kind == OpKind::maxpool) j["size"] = op.size;
    manifest["arch_graph"].push_back(std::move(j));
  }
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Mask files: "PKMASK01", u64 layer count, then per layer
// u32 name length, name bytes, u64 bit length, ceil(bits/64) u64 words.
// All integers little-endian; bit i of the stream is flat index i.

namespace {
constexpr char kMaskMagic[8] = {'P', 'K', 'M', 'A', 'S', 'K', '0', '1'};
}

void save_masks(std::span<const PruneMask> masks, const fs::path& path) {
  std::string out(kMaskMagic, sizeof kMaskMagic);
  put_u64(out, masks.size());
  for (const auto& m : masks) {
    put_u32(out, static_cast<std::uint32_t>(m.layer_name().size()));
    out += m.layer_name();
    put_u64(out, m.size());
    for (auto w : m.words()) put_u64(out, w);
  }
  write_file(path, out);
}

std::vector<PruneMask> load_masks(const fs::path& path) {
  const auto bytes = read_file(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw LoadError(LoadErrorKind::corrupt, path.string() + " truncated");
  };
  need(16);
  if (std::memcmp(bytes.data(), kMaskMagic, 8) != 0)
    throw LoadError(LoadErrorKind::corrupt, path.string() + ": bad magic");
  pos = 8;
  const auto count = get_le(&bytes[pos], 8);
  pos += 8;
  std::vector<PruneMask> masks;
  for (std::uint64_t l = 0; l < count; ++l) {
    need(4);
    const auto name_len = get_le(&bytes[pos], 4);
    pos += 4;
    need(name_len + 8);
    std::string name(&bytes[pos], name_len);
    pos += name_len;
    const auto bits = get_le(&bytes[pos], 8);
    pos += 8;
    const std::size_t nwords = (bits + 63) / 64;
    need(nwords * 8);
    std::vector<std::uint64_t> words(nwords);
    for (auto& w : words) {
      w = get_le(&bytes[pos], 8);
      pos += 8;
    }
    masks.push_back(PruneMask::from_words(std::move(name), bits, std::move(words)));
  }
  if (pos != bytes.size()) throw LoadError(LoadErrorKind::corrupt, path.string() + ": trailing bytes");
  return masks;
}

void install_masks(ModelSnapshot& model, const fs::path& path) {
  for (auto& m : load_masks(path)) {
    const auto i = model.index_of(m.layer_name());
    if (m.size() != model.layers[i].parameter_count())
      throw LoadError(LoadErrorKind::shape_mismatch, "mask for " + m.layer_name());
    model.targets[i] = m.sparsity();
    model.masks[i] = std::move(m);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const json& state, const fs::path& path) {
  json doc = {{"format", "prunekit-checkpoint"}, {"version", kCheckpointVersion}, {"state", state}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  write_file(tmp, doc.dump() + "\n");
  fs::rename(tmp, path);
}

json load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError(LoadErrorKind::missing_file, path.string());
  json doc;
  try {
    std::ifstream in(path);
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::corrupt, path.string() + ": " + e.what());
  }
  if (!doc.is_object() || doc.value("format", std::string()) != "prunekit-checkpoint" ||
      !doc.contains("version") || !doc.contains("state"))
    throw LoadError(LoadErrorKind::corrupt, path.string() + ": not a checkpoint");
  if (!doc["version"].is_number_integer() || doc["version"].get<int>() != kCheckpointVersion)
    throw LoadError(LoadErrorKind::version_mismatch,
                    "checkpoint version " + doc["version"].dump() + ", expected " +
                        std::to_string(kCheckpointVersion));
  return doc["state"];
}

void save_snapshot(const ModelSnapshot& model, const fs::path& dir) {
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  save_model(model, tmp);
  save_masks(model.masks, tmp / "masks.bin");
  write_file(tmp / "targets.json", json(model.targets).dump() + "\n");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

ModelSnapshot load_snapshot(const fs::path& dir) {
  auto model = load_model(dir);
  install_masks(model, dir / "masks.bin");
  try {
    std::ifstream in(dir / "targets.json");
    if (!in) throw LoadError(LoadErrorKind::missing_file, (dir / "targets.json").string());
    auto targets = json::parse(in).get<std::vector<double>>();
    if (targets.size() != model.layers.size())
      throw LoadError(LoadErrorKind::shape_mismatch, "targets do not match layer count");
    model.targets = std::move(targets);
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::corrupt, std::string("targets.json: ") + e.what());
  }
  return model;
}

}  // namespace prunekit
