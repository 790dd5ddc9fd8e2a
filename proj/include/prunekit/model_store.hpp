#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace prunekit {

enum class LayerKind { conv2d, dense };

const char* to_string(LayerKind kind) noexcept;

/// A named weight tensor. Weight storage is shared and immutable; retraining
/// produces a new tensor through with_weights().
class LayerTensor {
 public:
  LayerTensor(std::string name, LayerKind kind, std::vector<std::size_t> shape,
              std::vector<float> weights, std::vector<float> bias = {});

  const std::string& name() const noexcept { return name_; }
  LayerKind kind() const noexcept { return kind_; }
  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t parameter_count() const noexcept { return data_->weights.size(); }

  std::size_t out_channels() const noexcept { return shape_.front(); }
  /// Weights per output channel (in_channels*kH*kW for conv, in for dense).
  std::size_t slice_size() const noexcept { return parameter_count() / out_channels(); }
  std::size_t in_channels() const noexcept { return shape_[1]; }
  /// kH*kW for conv2d, 1 for dense.
  std::size_t kernel_area() const noexcept;

  std::span<const float> weights() const noexcept { return data_->weights; }
  std::span<const float> bias() const noexcept { return data_->bias; }

  /// Flat indices ordered by ascending |w|, ties by ascending index.
  std::span<const std::uint32_t> magnitude_order() const noexcept { return data_->order; }

  LayerTensor with_weights(std::vector<float> weights, std::vector<float> bias) const;

  /// Identity of the underlying storage; equal ids mean the same weights.
  const void* storage_id() const noexcept { return data_.get(); }

 private:
  struct Storage {
    std::vector<float> weights;
    std::vector<float> bias;
    std::vector<std::uint32_t> order;
  };

  std::string name_;
  LayerKind kind_;
  std::vector<std::size_t> shape_;
  std::shared_ptr<const Storage> data_;
};

/// Per-layer bitset; bit i set means flat weight i is kept.
class PruneMask {
 public:
  PruneMask() = default;
  PruneMask(std::string layer_name, std::size_t size, bool kept = true);

  const std::string& layer_name() const noexcept { return layer_name_; }
  std::size_t size() const noexcept { return size_; }

  bool kept(std::size_t i) const noexcept { return (words_[i >> 6] >> (i & 63)) & 1u; }
  void set_kept(std::size_t i, bool kept);
  void fill(bool kept);

  std::size_t pruned_count() const noexcept { return pruned_; }
  std::size_t kept_count() const noexcept { return size_ - pruned_; }
  /// Exactly pruned_count() / size().
  double sparsity() const noexcept {
    return size_ == 0 ? 0.0 : static_cast<double>(pruned_) / static_cast<double>(size_);
  }

  std::span<const std::uint64_t> words() const noexcept { return words_; }
  static PruneMask from_words(std::string layer_name, std::size_t size,
                              std::vector<std::uint64_t> words);

  /// True when every position pruned here is also pruned in `other`.
  bool pruned_subset_of(const PruneMask& other) const;

  friend bool operator==(const PruneMask&, const PruneMask&) = default;

 private:
  std::string layer_name_;
  std::size_t size_ = 0;
  std::size_t pruned_ = 0;
  std::vector<std::uint64_t> words_;
};

enum class OpKind { conv2d, dense, relu, maxpool, flatten };

const char* to_string(OpKind kind) noexcept;

struct ArchOp {
  OpKind kind = OpKind::relu;
  std::string layer;  // conv2d / dense only
  int stride = 1;
  int pad = 0;
  int size = 2;  // maxpool window (stride equals window)

  static ArchOp conv2d(std::string layer, int stride = 1, int pad = 0) {
    return {OpKind::conv2d, std::move(layer), stride, pad, 2};
  }
  static ArchOp dense(std::string layer) { return {OpKind::dense, std::move(layer), 1, 0, 2}; }
  static ArchOp relu() { return {OpKind::relu, {}, 1, 0, 2}; }
  static ArchOp maxpool(int size = 2) { return {OpKind::maxpool, {}, 1, 0, size}; }
  static ArchOp flatten() { return {OpKind::flatten, {}, 1, 0, 2}; }

  friend bool operator==(const ArchOp&, const ArchOp&) = default;
};

struct Shape3 {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const noexcept { return c * h * w; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct ArchGraph {
  Shape3 input;
  std::size_t num_classes = 0;
  std::vector<ArchOp> ops;
};

/// Loaded model plus the mutable pruning state.
///
/// `targets` holds the per-layer sparsity the pruning drivers are aiming
/// for; the mask realizes round(target * count) pruned weights.
struct ModelSnapshot {
  std::vector<LayerTensor> layers;
  std::vector<PruneMask> masks;
  std::vector<double> targets;
  ArchGraph graph;

  std::size_t index_of(const std::string& layer_name) const;
  const LayerTensor& layer(const std::string& name) const { return layers[index_of(name)]; }
  const PruneMask& mask(const std::string& name) const { return masks[index_of(name)]; }

  std::vector<std::string> layer_names() const;
  std::vector<std::size_t> layer_sizes() const;
  std::vector<double> mask_sparsities() const;

  void replace_layer(std::size_t index, LayerTensor tensor);
  void set_mask(std::size_t index, PruneMask mask);
  void reset_masks();
};

/// round(s * count) with ties to even, clamped to [0, count].
std::size_t pruned_count_for(double sparsity, std::size_t count);

/// Snaps a sparsity or step onto the 2^-32 grid used for mask targets, so
/// that adding and subtracting the same step is exact.
double snap_fraction(double value);

/// Mask pruning the round(s*n) smallest-|w| weights, lower index first on ties.
PruneMask magnitude_mask(const LayerTensor& layer, double sparsity);

/// Sum of pruned counts over sum of parameter counts.
double weighted_sparsity(const ModelSnapshot& model);
double weighted_sparsity(std::span<const std::size_t> sizes, std::span<const double> sparsities);

std::vector<float> effective_weights(const LayerTensor& layer, const PruneMask& mask);

/// Applies magnitude masks for the given per-layer targets, stored snapped.
void apply_sparsities(ModelSnapshot& model, std::span<const double> targets);

ModelSnapshot load_model(const std::filesystem::path& dir);
void save_model(const ModelSnapshot& model, const std::filesystem::path& dir);

void save_masks(std::span<const PruneMask> masks, const std::filesystem::path& path);
std::vector<PruneMask> load_masks(const std::filesystem::path& path);
/// Loads a mask file and installs it on the matching layers of `model`.
void install_masks(ModelSnapshot& model, const std::filesystem::path& path);

/// Saves weights, masks and targets into `dir`, replacing it atomically.
void save_snapshot(const ModelSnapshot& model, const std::filesystem::path& dir);
ModelSnapshot load_snapshot(const std::filesystem::path& dir);

inline constexpr int kCheckpointVersion = 1;

/// Writes `state` wrapped in a versioned envelope; the write is atomic.
void save_checkpoint(const nlohmann::json& state, const std::filesystem::path& path);
nlohmann::json load_checkpoint(const std::filesystem::path& path);

}  // namespace prunekit
