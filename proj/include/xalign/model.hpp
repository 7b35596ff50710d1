#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xalign/graph.hpp"
#include "xalign/tensor.hpp"

namespace xalign {

enum class LayerKind {
  dense,
  conv2d,
  max_pool,
  mean_pool,
  token_mean,
  relu,
  gelu,
  layernorm,
  flatten,
  patch_embed,
  self_attention,
  residual,
};

std::string_view layer_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

/// One layer and its dimensional attributes. Unused fields stay zero.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::int64_t in = 0;   // input channels / features
  std::int64_t out = 0;  // output channels / features
  std::int64_t kernel = 0;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t heads = 0;
  std::int64_t patch = 0;
  std::int64_t tokens = 0;
  std::vector<LayerSpec> body;  // residual: x + body(x)

  bool operator==(const LayerSpec&) const = default;
};

/// Per-sample input shape (channels, height, width).
struct InputShape {
  std::int64_t channels = 1;
  std::int64_t height = 64;
  std::int64_t width = 64;

  bool operator==(const InputShape&) const = default;
};

/// A sequential multi-label classifier. Parameters are stored as constants;
/// `bind` turns them into graph leaves for one training or explanation step.
///
/// Output is (batch, num_labels) logits with no activation across labels.
class Model {
 public:
  Model() = default;
  /// Validates that the layers compose on `input` and end in
  /// (batch, num_labels). Parameters are zero until `initialize`.
  Model(std::string architecture, InputShape input, std::int64_t num_labels, std::vector<LayerSpec> layers);

  const std::string& architecture() const { return architecture_; }
  const InputShape& input_shape() const { return input_; }
  std::int64_t num_labels() const { return num_labels_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  std::span<const Tensor> parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::int64_t parameter_count() const;
  void set_parameters(std::vector<Tensor> params);

  /// Kaiming-uniform for conv/dense weights, truncated normal (std 0.02) for
  /// attention projections and position embeddings, zero biases, unit
  /// layernorm gains.
  void initialize(std::uint64_t seed);
  /// Re-initializes only the final dense layer.
  void reset_head(std::uint64_t seed);

  /// Parameters as leaves of `graph`, in `parameters()` order.
  std::vector<Tensor> bind(Graph& graph) const;

  /// Logits for `batch` of shape (B, C, H, W).
  Tensor forward(std::span<const Tensor> params, const Tensor& batch) const;
  Tensor forward(const Tensor& batch) const { return forward(params_, batch); }

  /// Output of top-level layer `index` applied to `x`.
  Tensor apply_layer(std::size_t index, std::span<const Tensor> params, const Tensor& x) const;
  /// Offset of the first parameter of top-level layer `index`.
  std::size_t parameter_offset(std::size_t index) const { return offsets_.at(index); }

 private:
  std::string architecture_;
  InputShape input_;
  std::int64_t num_labels_ = 0;
  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> offsets_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

/// Three (conv 3x3 pad 1, relu, max-pool 2) stages with 8/16/32 base
/// channels scaled by `width_multiplier`, then a dense head.
Model build_small_cnn(InputShape input, std::int64_t num_labels, double width_multiplier = 1.0);

/// Patch embedding with learned positions, `depth` pre-norm blocks of
/// (self-attention, gelu MLP of width 2*dim), token mean, dense head.
Model build_tiny_vit(InputShape input, std::int64_t num_labels, std::int64_t patch, std::int64_t depth,
                     std::int64_t heads, std::int64_t dim);

/// Shape of a (B, ...) activation after `layer`, or ShapeError.
Shape infer_layer_shape(const LayerSpec& layer, const Shape& in);

// Checkpoints: magic "XALGNCKP", u32 version, u64 descriptor length,
// canonical JSON descriptor, u64 tensor count, then per tensor a u64 value
// count followed by little-endian doubles.

struct Checkpoint {
  Model model;
  std::map<std::string, std::string> metadata;  // seed, epochs, dataset id, ...
};

void save_checkpoint(const std::string& path, const Model& model, const std::map<std::string, std::string>& metadata);
Checkpoint load_checkpoint(const std::string& path);

/// Canonical JSON text of the architecture (layers, input shape, labels).
std::string architecture_descriptor(const Model& model);

}  // namespace xalign
