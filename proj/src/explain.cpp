#include "xalign/explain.hpp"

#include <cctype>
#include <random>
#include <stdexcept>

#include "xalign/graph.hpp"
#include "xalign/ops.hpp"

namespace xalign {

namespace {

bool lrp_supported(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense:
    case LayerKind::conv2d:
    case LayerKind::max_pool:
    case LayerKind::mean_pool:
    case LayerKind::relu:
    case LayerKind::flatten:
      return true;
    default:
      return false;
  }
}

void check_input(const Model& model, const Tensor& x, std::int64_t label) {
  const auto& in = model.input_shape();
  if (x.dim() != 4 || x.size(1) != in.channels || x.size(2) != in.height || x.size(3) != in.width) {
    throw ShapeError("explain: expected (B," + std::to_string(in.channels) + "," + std::to_string(in.height) + "," +
                     std::to_string(in.width) + "), got " + to_string(x.shape()));
  }
  if (label < 0 || label >= model.num_labels()) {
    throw std::out_of_range("explain: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(model.num_labels()) + ")");
  }
}

std::vector<Tensor> constant_params(std::span<const Tensor> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.detach());
  return out;
}

Graph* recording_graph(std::span<const Tensor> params) {
  Graph* graph = nullptr;
  for (const auto& p : params) {
    if (!p.requires_grad()) continue;
    if (graph && p.graph() != graph) throw std::invalid_argument("explain: parameters span several graphs");
    graph = p.graph();
  }
  if (!graph) throw std::invalid_argument("explain: record=true needs parameters bound to a graph");
  return graph;
}

/// d(sum_b logit[b, label]) / d point, recorded when `record`.
Tensor input_gradient(const Model& model, std::span<const Tensor> params, const Tensor& point, std::int64_t label,
                      bool record) {
  detail::GradModeGuard on(true);
  if (record) {
    Graph* graph = recording_graph(params);
    const Tensor leaf = graph->leaf(point);
    const Tensor out = sum(slice(model.forward(params, leaf), 1, label, label + 1));
    return backward(out, {leaf}, true).get(leaf);
  }
  Graph local;
  const auto fixed = constant_params(params);
  const Tensor leaf = local.leaf(point.detach());
  const Tensor out = sum(slice(model.forward(fixed, leaf), 1, label, label + 1));
  return backward(out, {leaf}).get(leaf);
}

Tensor baseline_for(const ExplainerConfig& config, const Tensor& x) {
  if (!config.baseline) return Tensor(x.shape(), config.baseline_fill);
  const auto& b = *config.baseline;
  if (b.shape() != Shape{x.size(1), x.size(2), x.size(3)}) {
    throw ShapeError("explain_ig: baseline " + to_string(b.shape()) + " does not match input " + to_string(x.shape()));
  }
  NoGradGuard off;
  return broadcast_to(reshape(b.detach(), {1, x.size(1), x.size(2), x.size(3)}), x.shape());
}

Tensor explain_vg(const Model& model, std::span<const Tensor> params, const Tensor& x, std::int64_t label,
                  bool record) {
  return input_gradient(model, params, x, label, record);
}

Tensor explain_ig(const Model& model, std::span<const Tensor> params, const Tensor& x, std::int64_t label,
                  const ExplainerConfig& config, bool record) {
  const Tensor base = baseline_for(config, x);
  const auto xv = x.values(), bv = base.values();
  std::vector<double> delta(xv.size());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = xv[i] - bv[i];
  Tensor total;
  const auto n = config.ig_steps;
  for (std::int64_t step = 1; step <= n; ++step) {
    const double alpha = static_cast<double>(step) / static_cast<double>(n);
    std::vector<double> point(xv.size());
    for (std::size_t i = 0; i < point.size(); ++i) point[i] = bv[i] + alpha * delta[i];
    const Tensor grad = input_gradient(model, params, Tensor(x.shape(), std::move(point)), label, record);
    total = total.defined() ? add(total, grad) : grad;
  }
  return mul(scale(total, 1.0 / static_cast<double>(n)), Tensor(x.shape(), std::move(delta)));
}

Tensor explain_sg(const Model& model, std::span<const Tensor> params, const Tensor& x, std::int64_t label,
                  const ExplainerConfig& config, bool record) {
  std::mt19937_64 rng(config.noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto xv = x.values();
  Tensor total;
  for (std::int64_t k = 0; k < config.sg_samples; ++k) {
    std::vector<double> point(xv.begin(), xv.end());
    if (config.sg_sigma > 0.0) {
      for (auto& v : point) v += config.sg_sigma * noise(rng);
    }
    const Tensor grad = input_gradient(model, params, Tensor(x.shape(), std::move(point)), label, record);
    total = total.defined() ? add(total, grad) : grad;
  }
  return scale(total, 1.0 / static_cast<double>(config.sg_samples));
}

Tensor stabilizer(const Tensor& z, double epsilon) {
  std::vector<double> v(static_cast<std::size_t>(z.numel()));
  const auto zv = z.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = zv[i] >= 0.0 ? epsilon : -epsilon;
  return Tensor(z.shape(), std::move(v));
}

Tensor per_sample_total(const Tensor& r) {
  std::vector<std::int64_t> axes;
  for (std::int64_t a = 1; a < r.dim(); ++a) axes.push_back(a);
  return sum(r, axes).detach();
}

}  // namespace

std::string_view method_name(Method method) {
  switch (method) {
    case Method::vg: return "VG";
    case Method::ig: return "IG";
    case Method::sg: return "SG";
    case Method::lrp: return "LRP";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  std::string upper(name);
  for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (auto m : {Method::vg, Method::ig, Method::sg, Method::lrp}) {
    if (method_name(m) == upper) return m;
  }
  throw std::invalid_argument("unknown explainer '" + std::string(name) + "' (expected VG, IG, SG or LRP)");
}

void ExplainerConfig::validate() const {
  if (ig_steps < 1) throw std::invalid_argument("explainer: ig_steps must be at least 1");
  if (sg_samples < 1) throw std::invalid_argument("explainer: sg_samples must be at least 1");
  if (!(sg_sigma >= 0.0)) throw std::invalid_argument("explainer: sg_sigma must be nonnegative");
  if (!(lrp_epsilon > 0.0)) throw std::invalid_argument("explainer: lrp_epsilon must be positive");
}

void check_supported(const Model& model, Method method) {
  if (method != Method::lrp) return;
  for (const auto& layer : model.layers()) {
    if (!lrp_supported(layer.kind)) {
      throw std::invalid_argument("LRP: unsupported layer '" + std::string(layer_name(layer.kind)) + "' in " +
                                  model.architecture() + " model");
    }
  }
}

Tensor reduce_channels(const Tensor& raw) {
  if (raw.dim() == 3) return sum(clamp_min(raw, 0.0), {0});
  if (raw.dim() != 4) throw ShapeError("reduce_channels: expected (B, C, H, W), got " + to_string(raw.shape()));
  return sum(clamp_min(raw, 0.0), {1});
}

Tensor lrp_relevance(const Model& model, std::span<const Tensor> params, const Tensor& x, std::int64_t label,
                     double epsilon, std::vector<Tensor>* trace) {
  check_supported(model, Method::lrp);
  check_input(model, x, label);
  const auto& layers = model.layers();
  std::vector<Tensor> acts{x};
  for (std::size_t l = 0; l < layers.size(); ++l) acts.push_back(model.apply_layer(l, params, acts.back()));

  const Tensor& logits = acts.back();
  Tensor onehot(logits.shape(), 0.0);
  for (std::int64_t b = 0; b < logits.size(0); ++b) onehot.mutable_values()[static_cast<std::size_t>(b * logits.size(1) + label)] = 1.0;
  Tensor r = mul(logits, onehot);
  if (trace) trace->push_back(per_sample_total(r));

  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    const Tensor& a = acts[l];
    const auto p = params.subspan(model.parameter_offset(l));
    switch (layer.kind) {
      case LayerKind::dense: {
        const Tensor z = matmul(a, p[0]);
        const Tensor s = div(r, add(z, stabilizer(z, epsilon)));
        r = mul(a, matmul(s, transpose(p[0], 0, 1)));
        break;
      }
      case LayerKind::conv2d: {
        const Tensor z = conv2d(a, p[0], layer.stride, layer.padding);
        const Tensor s = div(r, add(z, stabilizer(z, epsilon)));
        const auto geom = detail::conv_geometry(a.shape(), p[0].shape(), layer.stride, layer.padding);
        r = mul(a, detail::conv2d_input_grad(s, p[0], geom));
        break;
      }
      case LayerKind::max_pool:
        r = scatter_add(r, detail::max_pool_indices(a, layer.kernel), a.shape());
        break;
      case LayerKind::mean_pool: {
        const auto k = layer.kernel;
        const auto b = r.size(0), c = r.size(1), oh = r.size(2), ow = r.size(3);
        const Tensor spread = broadcast_to(reshape(r, {b, c, oh, 1, ow, 1}), {b, c, oh, k, ow, k});
        r = scale(reshape(spread, a.shape()), 1.0 / static_cast<double>(k * k));
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::flatten:
        r = reshape(r, a.shape());
        break;
      default:
        throw std::invalid_argument("LRP: unsupported layer '" + std::string(layer_name(layer.kind)) + "'");
    }
    if (trace) trace->push_back(per_sample_total(r));
  }
  return r;
}

Explanation explain(const Model& model, std::span<const Tensor> params, const Tensor& x, std::int64_t label,
                    const ExplainerConfig& config, bool record) {
  config.validate();
  check_supported(model, config.method);
  check_input(model, x, label);
  Explanation e;
  e.label = label;
  e.method = config.method;
  e.differentiable = record;
  switch (config.method) {
    case Method::vg: e.raw = explain_vg(model, params, x, label, record); break;
    case Method::ig: e.raw = explain_ig(model, params, x, label, config, record); break;
    case Method::sg: e.raw = explain_sg(model, params, x, label, config, record); break;
    case Method::lrp: {
      if (record) {
        recording_graph(params);
        detail::GradModeGuard on(true);
        e.raw = lrp_relevance(model, params, x, label, config.lrp_epsilon);
      } else {
        NoGradGuard off;
        e.raw = lrp_relevance(model, constant_params(params), x, label, config.lrp_epsilon);
      }
      break;
    }
  }
  if (record) {
    detail::GradModeGuard on(true);
    e.attributions = reduce_channels(e.raw);
  } else {
    NoGradGuard off;
    e.raw = e.raw.detach();
    e.attributions = reduce_channels(e.raw);
  }
  return e;
}

Explanation explain(const Model& model, const Tensor& x, std::int64_t label, const ExplainerConfig& config) {
  return explain(model, model.parameters(), x, label, config, false);
}

}  // namespace xalign
