#include "xalign/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "xalign/ops.hpp"

namespace xalign {

namespace {

struct ParamSpec {
  std::string name;
  Shape shape;
};

void layer_params(const LayerSpec& layer, const std::string& prefix, std::vector<ParamSpec>& out) {
  switch (layer.kind) {
    case LayerKind::dense:
      out.push_back({prefix + "weight", {layer.in, layer.out}});
      out.push_back({prefix + "bias", {layer.out}});
      break;
    case LayerKind::conv2d:
      out.push_back({prefix + "weight", {layer.out, layer.in, layer.kernel, layer.kernel}});
      out.push_back({prefix + "bias", {layer.out}});
      break;
    case LayerKind::layernorm:
      out.push_back({prefix + "gamma", {layer.in}});
      out.push_back({prefix + "beta", {layer.in}});
      break;
    case LayerKind::patch_embed:
      out.push_back({prefix + "weight", {layer.out, layer.in, layer.patch, layer.patch}});
      out.push_back({prefix + "bias", {layer.out}});
      out.push_back({prefix + "position", {layer.tokens, layer.out}});
      break;
    case LayerKind::self_attention:
      out.push_back({prefix + "qkv_weight", {layer.in, 3 * layer.in}});
      out.push_back({prefix + "qkv_bias", {3 * layer.in}});
      out.push_back({prefix + "out_weight", {layer.in, layer.in}});
      out.push_back({prefix + "out_bias", {layer.in}});
      break;
    case LayerKind::residual:
      for (std::size_t i = 0; i < layer.body.size(); ++i) {
        layer_params(layer.body[i], prefix + std::to_string(i) + ".", out);
      }
      break;
    default:
      break;
  }
}

std::size_t param_count(const LayerSpec& layer) {
  std::vector<ParamSpec> specs;
  layer_params(layer, "", specs);
  return specs.size();
}

[[noreturn]] void bad_layer(const LayerSpec& layer, const Shape& in, const std::string& why) {
  throw ShapeError(std::string(layer_name(layer.kind)) + ": " + why + " for input " + to_string(in));
}

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride, std::int64_t padding) {
  return add(conv2d(x, w, stride, padding), reshape(b, {1, b.numel(), 1, 1}));
}

Tensor attention_forward(const Tensor& x, std::int64_t heads, std::span<const Tensor> p) {
  const auto batch = x.size(0), tokens = x.size(1), dim = x.size(2);
  const auto head_dim = dim / heads;
  const Tensor qkv = dense_forward(x, p[0], p[1]);
  auto split = [&](std::int64_t part) {
    const Tensor t = slice(qkv, 2, part * dim, (part + 1) * dim);
    return permute(reshape(t, {batch, tokens, heads, head_dim}), {0, 2, 1, 3});
  };
  const Tensor q = split(0), k = split(1), v = split(2);
  const Tensor scores = scale(matmul(q, transpose(k, -2, -1)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  const Tensor context = matmul(softmax(scores, -1), v);
  const Tensor merged = reshape(permute(context, {0, 2, 1, 3}), {batch, tokens, dim});
  return dense_forward(merged, p[2], p[3]);
}

Tensor run_layer(const LayerSpec& layer, std::span<const Tensor> p, const Tensor& x) {
  switch (layer.kind) {
    case LayerKind::dense: return dense_forward(x, p[0], p[1]);
    case LayerKind::conv2d: return conv_forward(x, p[0], p[1], layer.stride, layer.padding);
    case LayerKind::max_pool: return max_pool2d(x, layer.kernel);
    case LayerKind::mean_pool: return mean_pool2d(x, layer.kernel);
    case LayerKind::token_mean: return mean(x, {1});
    case LayerKind::relu: return relu(x);
    case LayerKind::gelu: return gelu(x);
    case LayerKind::layernorm: return layernorm(x, p[0], p[1]);
    case LayerKind::flatten: return reshape(x, {x.size(0), -1});
    case LayerKind::patch_embed: {
      const Tensor grid = conv_forward(x, p[0], p[1], layer.patch, 0);
      const Tensor tokens = transpose(reshape(grid, {x.size(0), layer.out, layer.tokens}), 1, 2);
      return add(tokens, p[2]);
    }
    case LayerKind::self_attention: return attention_forward(x, layer.heads, p);
    case LayerKind::residual: {
      Tensor h = x;
      std::size_t offset = 0;
      for (const auto& inner : layer.body) {
        const auto n = param_count(inner);
        h = run_layer(inner, p.subspan(offset, n), h);
        offset += n;
      }
      return add(x, h);
    }
  }
  throw std::logic_error("run_layer: unknown layer kind");
}

double truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  double z = dist(rng);
  while (std::fabs(z) > 2.0) z = dist(rng);
  return z * stddev;
}

void init_layer(const LayerSpec& layer, std::span<Tensor> params, std::mt19937_64& rng) {
  auto kaiming = [&](Tensor& w, std::int64_t fan_in) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.mutable_values()) v = bound * dist(rng);
  };
  auto trunc = [&](Tensor& w) {
    for (auto& v : w.mutable_values()) v = truncated_normal(rng, 0.02);
  };
  auto fill = [](Tensor& t, double value) {
    for (auto& v : t.mutable_values()) v = value;
  };
  switch (layer.kind) {
    case LayerKind::dense:
      kaiming(params[0], layer.in);
      fill(params[1], 0.0);
      break;
    case LayerKind::conv2d:
      kaiming(params[0], layer.in * layer.kernel * layer.kernel);
      fill(params[1], 0.0);
      break;
    case LayerKind::layernorm:
      fill(params[0], 1.0);
      fill(params[1], 0.0);
      break;
    case LayerKind::patch_embed:
      kaiming(params[0], layer.in * layer.patch * layer.patch);
      fill(params[1], 0.0);
      trunc(params[2]);
      break;
    case LayerKind::self_attention:
      trunc(params[0]);
      fill(params[1], 0.0);
      trunc(params[2]);
      fill(params[3], 0.0);
      break;
    case LayerKind::residual: {
      std::size_t offset = 0;
      for (const auto& inner : layer.body) {
        const auto n = param_count(inner);
        init_layer(inner, params.subspan(offset, n), rng);
        offset += n;
      }
      break;
    }
    default:
      break;
  }
}

}  // namespace

std::string_view layer_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::mean_pool: return "mean_pool";
    case LayerKind::token_mean: return "token_mean";
    case LayerKind::relu: return "relu";
    case LayerKind::gelu: return "gelu";
    case LayerKind::layernorm: return "layernorm";
    case LayerKind::flatten: return "flatten";
    case LayerKind::patch_embed: return "patch_embed";
    case LayerKind::self_attention: return "self_attention";
    case LayerKind::residual: return "residual";
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (auto kind : {LayerKind::dense, LayerKind::conv2d, LayerKind::max_pool, LayerKind::mean_pool,
                    LayerKind::token_mean, LayerKind::relu, LayerKind::gelu, LayerKind::layernorm, LayerKind::flatten,
                    LayerKind::patch_embed, LayerKind::self_attention, LayerKind::residual}) {
    if (layer_name(kind) == name) return kind;
  }
  throw std::invalid_argument("unknown layer kind '" + std::string(name) + "'");
}

Shape infer_layer_shape(const LayerSpec& layer, const Shape& in) {
  const auto rank = in.size();
  switch (layer.kind) {
    case LayerKind::dense:
      if (rank < 2 || in.back() != layer.in) bad_layer(layer, in, "expected last extent " + std::to_string(layer.in));
      {
        Shape out = in;
        out.back() = layer.out;
        return out;
      }
    case LayerKind::conv2d: {
      if (rank != 4 || in[1] != layer.in) bad_layer(layer, in, "expected " + std::to_string(layer.in) + " channels");
      const auto oh = (in[2] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
      const auto ow = (in[3] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
      if (oh < 1 || ow < 1) bad_layer(layer, in, "kernel larger than padded input");
      return {in[0], layer.out, oh, ow};
    }
    case LayerKind::max_pool:
    case LayerKind::mean_pool:
      if (rank != 4 || layer.kernel < 1 || in[2] % layer.kernel != 0 || in[3] % layer.kernel != 0) {
        bad_layer(layer, in, "spatial extent not divisible by " + std::to_string(layer.kernel));
      }
      return {in[0], in[1], in[2] / layer.kernel, in[3] / layer.kernel};
    case LayerKind::token_mean:
      if (rank != 3) bad_layer(layer, in, "expected (B, T, D)");
      return {in[0], in[2]};
    case LayerKind::relu:
    case LayerKind::gelu:
      return in;
    case LayerKind::layernorm:
      if (rank < 2 || in.back() != layer.in) bad_layer(layer, in, "expected last extent " + std::to_string(layer.in));
      return in;
    case LayerKind::flatten:
      if (rank < 2) bad_layer(layer, in, "expected a batch axis");
      return {in[0], numel(in) / in[0]};
    case LayerKind::patch_embed: {
      if (rank != 4 || in[1] != layer.in) bad_layer(layer, in, "expected " + std::to_string(layer.in) + " channels");
      if (layer.patch < 1 || in[2] % layer.patch != 0 || in[3] % layer.patch != 0) {
        bad_layer(layer, in, "spatial extent not divisible by patch " + std::to_string(layer.patch));
      }
      const auto tokens = (in[2] / layer.patch) * (in[3] / layer.patch);
      if (tokens != layer.tokens) bad_layer(layer, in, "expected " + std::to_string(layer.tokens) + " tokens");
      return {in[0], tokens, layer.out};
    }
    case LayerKind::self_attention:
      if (rank != 3 || in[2] != layer.in) bad_layer(layer, in, "expected (B, T, " + std::to_string(layer.in) + ")");
      if (layer.heads < 1 || layer.in % layer.heads != 0) bad_layer(layer, in, "dim not divisible by heads");
      return in;
    case LayerKind::residual: {
      Shape h = in;
      for (const auto& inner : layer.body) h = infer_layer_shape(inner, h);
      if (h != in) bad_layer(layer, in, "body changes shape to " + to_string(h));
      return in;
    }
  }
  throw std::logic_error("infer_layer_shape: unknown layer kind");
}

Model::Model(std::string architecture, InputShape input, std::int64_t num_labels, std::vector<LayerSpec> layers)
    : architecture_(std::move(architecture)), input_(input), num_labels_(num_labels), layers_(std::move(layers)) {
  if (num_labels_ < 1) throw std::invalid_argument("model: num_labels must be positive");
  if (input_.channels < 1 || input_.height < 1 || input_.width < 1) throw std::invalid_argument("model: empty input");
  Shape shape{1, input_.channels, input_.height, input_.width};
  for (const auto& layer : layers_) shape = infer_layer_shape(layer, shape);
  if (shape != Shape{1, num_labels_}) {
    throw ShapeError("model: layers produce " + to_string(shape) + ", expected [1," + std::to_string(num_labels_) + "]");
  }
  std::vector<ParamSpec> specs;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    offsets_.push_back(specs.size());
    layer_params(layers_[i], std::to_string(i) + "." + std::string(layer_name(layers_[i].kind)) + ".", specs);
  }
  offsets_.push_back(specs.size());
  for (auto& spec : specs) {
    params_.push_back(Tensor::zeros(spec.shape));
    names_.push_back(std::move(spec.name));
  }
}

std::int64_t Model::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : params_) total += p.numel();
  return total;
}

void Model::set_parameters(std::vector<Tensor> params) {
  if (params.size() != params_.size()) throw std::invalid_argument("set_parameters: wrong parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != params_[i].shape()) {
      throw ShapeError("set_parameters: " + names_[i] + " expects " + to_string(params_[i].shape()) + ", got " +
                       to_string(params[i].shape()));
    }
    params[i] = params[i].detach();
  }
  params_ = std::move(params);
}

void Model::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    init_layer(layers_[i], std::span<Tensor>(params_).subspan(offsets_[i], offsets_[i + 1] - offsets_[i]), rng);
  }
}

void Model::reset_head(std::uint64_t seed) {
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (layers_[i].kind != LayerKind::dense) continue;
    std::mt19937_64 rng(seed);
    init_layer(layers_[i], std::span<Tensor>(params_).subspan(offsets_[i], offsets_[i + 1] - offsets_[i]), rng);
    return;
  }
}

std::vector<Tensor> Model::bind(Graph& graph) const {
  std::vector<Tensor> leaves;
  leaves.reserve(params_.size());
  for (const auto& p : params_) leaves.push_back(graph.leaf(p));
  return leaves;
}

Tensor Model::apply_layer(std::size_t index, std::span<const Tensor> params, const Tensor& x) const {
  return run_layer(layers_.at(index), params.subspan(offsets_[index], offsets_[index + 1] - offsets_[index]), x);
}

Tensor Model::forward(std::span<const Tensor> params, const Tensor& batch) const {
  if (params.size() != params_.size()) throw std::invalid_argument("forward: wrong parameter count");
  if (batch.dim() != 4 || batch.size(1) != input_.channels || batch.size(2) != input_.height ||
      batch.size(3) != input_.width) {
    throw ShapeError("forward: expected (B," + std::to_string(input_.channels) + "," + std::to_string(input_.height) +
                     "," + std::to_string(input_.width) + "), got " + to_string(batch.shape()));
  }
  Tensor h = batch;
  for (std::size_t i = 0; i < layers_.size(); ++i) h = apply_layer(i, params, h);
  return h;
}

Model build_small_cnn(InputShape input, std::int64_t num_labels, double width_multiplier) {
  if (!(width_multiplier > 0.0)) throw std::invalid_argument("build_small_cnn: width multiplier must be positive");
  if (input.height % 8 != 0 || input.width % 8 != 0) {
    throw ShapeError("build_small_cnn: input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                     " not divisible by the pooling factor 8");
  }
  std::vector<LayerSpec> layers;
  std::int64_t channels = input.channels;
  for (std::int64_t base : {8, 16, 32}) {
    const auto width = std::max<std::int64_t>(1, std::llround(static_cast<double>(base) * width_multiplier));
    layers.push_back({.kind = LayerKind::conv2d, .in = channels, .out = width, .kernel = 3, .padding = 1});
    layers.push_back({.kind = LayerKind::relu});
    layers.push_back({.kind = LayerKind::max_pool, .kernel = 2});
    channels = width;
  }
  layers.push_back({.kind = LayerKind::flatten});
  const auto features = channels * (input.height / 8) * (input.width / 8);
  layers.push_back({.kind = LayerKind::dense, .in = features, .out = num_labels});
  return Model("cnn", input, num_labels, std::move(layers));
}

Model build_tiny_vit(InputShape input, std::int64_t num_labels, std::int64_t patch, std::int64_t depth,
                     std::int64_t heads, std::int64_t dim) {
  if (depth < 1) throw std::invalid_argument("build_tiny_vit: depth must be at least 1");
  if (patch < 1 || input.height % patch != 0 || input.width % patch != 0) {
    throw ShapeError("build_tiny_vit: input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                     " not divisible by patch " + std::to_string(patch));
  }
  if (heads < 1 || dim % heads != 0) throw std::invalid_argument("build_tiny_vit: dim must be divisible by heads");
  const auto tokens = (input.height / patch) * (input.width / patch);
  std::vector<LayerSpec> layers;
  layers.push_back(
      {.kind = LayerKind::patch_embed, .in = input.channels, .out = dim, .patch = patch, .tokens = tokens});
  for (std::int64_t d = 0; d < depth; ++d) {
    LayerSpec attention{.kind = LayerKind::residual};
    attention.body = {{.kind = LayerKind::layernorm, .in = dim}, {.kind = LayerKind::self_attention, .in = dim, .heads = heads}};
    LayerSpec mlp{.kind = LayerKind::residual};
    mlp.body = {{.kind = LayerKind::layernorm, .in = dim},
                {.kind = LayerKind::dense, .in = dim, .out = 2 * dim},
                {.kind = LayerKind::gelu},
                {.kind = LayerKind::dense, .in = 2 * dim, .out = dim}};
    layers.push_back(std::move(attention));
    layers.push_back(std::move(mlp));
  }
  layers.push_back({.kind = LayerKind::layernorm, .in = dim});
  layers.push_back({.kind = LayerKind::token_mean});
  layers.push_back({.kind = LayerKind::dense, .in = dim, .out = num_labels});
  return Model("vit", input, num_labels, std::move(layers));
}

}  // namespace xalign
