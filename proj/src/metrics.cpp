#include "xalign/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

#include "xalign/ops.hpp"

namespace xalign {
namespace {

void check_pair(std::span<const double> e, std::span<const double> mask, const char* what) {
  if (e.size() != mask.size()) {
    throw ShapeError(std::string(what) + ": explanation has " + std::to_string(e.size()) + " pixels, mask has " +
                     std::to_string(mask.size()));
  }
}

std::size_t mask_size(std::span<const double> mask, const char* what) {
  const auto k = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](double m) { return m > 0.5; }));
  if (k == 0) throw std::invalid_argument(std::string(what) + ": empty mask");
  return k;
}

// Indices of the k largest values; ties go to the smaller index.
std::vector<std::size_t> top_k(std::span<const double> e, std::size_t k) {
  std::vector<std::size_t> order(e.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return e[a] > e[b] || (e[a] == e[b] && a < b); });
  order.resize(k);
  return order;
}

std::size_t hits_in_mask(std::span<const std::size_t> indices, std::span<const double> mask) {
  return static_cast<std::size_t>(
      std::count_if(indices.begin(), indices.end(), [&](std::size_t i) { return mask[i] > 0.5; }));
}

// (B, 1, 1) per-sample min and reciprocal range of a (B, H, W) constant.
std::pair<Tensor, Tensor> extrema(const Tensor& e3) {
  const std::int64_t batch = e3.size(0), plane = e3.size(1) * e3.size(2);
  Tensor lo({batch, 1, 1}), inv({batch, 1, 1});
  const auto v = e3.values();
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto first = v.begin() + b * plane;
    const auto [mn, mx] = std::minmax_element(first, first + plane);
    lo.mutable_values()[static_cast<std::size_t>(b)] = *mn;
    inv.mutable_values()[static_cast<std::size_t>(b)] = *mx > *mn ? 1.0 / (*mx - *mn) : 0.0;
  }
  return {lo, inv};
}

Tensor select_rows(const Tensor& x, std::span<const std::int64_t> rows) {
  Shape shape = x.shape();
  const std::int64_t stride = x.numel() / shape[0];
  shape[0] = static_cast<std::int64_t>(rows.size());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(stride) * rows.size());
  for (auto r : rows) {
    const auto first = x.values().begin() + r * stride;
    out.insert(out.end(), first, first + stride);
  }
  return Tensor(std::move(shape), std::move(out));
}

LossTerms explained_term(const Model& model, std::span<const Tensor> params, const MaskedBatch& batch,
                         std::int64_t label, const ExplainerConfig& config, Scenario scenario, ScaleGradient mode) {
  if (static_cast<std::int64_t>(batch.masks.size()) != batch.images.size(0)) {
    throw std::invalid_argument("alignment loss: " + std::to_string(batch.masks.size()) + " masks for " +
                                std::to_string(batch.images.size(0)) + " images");
  }
  std::vector<std::int64_t> rows;
  std::vector<Tensor> masks;
  for (std::size_t i = 0; i < batch.masks.size(); ++i) {
    if (!batch.masks[i].defined()) continue;
    rows.push_back(static_cast<std::int64_t>(i));
    masks.push_back(batch.masks[i]);
  }
  LossTerms terms;
  terms.skipped = static_cast<std::int64_t>(batch.masks.size() - rows.size());
  if (rows.empty()) {
    terms.alignment = Tensor::scalar(0.0);
    terms.total = terms.alignment;
    return terms;
  }
  const auto e = explain(model, params, select_rows(batch.images, rows), label, config, true);
  auto inner = alignment_term(e.attributions, masks, scenario, mode);
  inner.skipped = terms.skipped;
  return inner;
}

}  // namespace

Tensor minmax_scale(const Tensor& e, ScaleGradient mode) {
  if (e.dim() != 2 && e.dim() != 3) throw ShapeError("minmax_scale: expected (H, W) or (B, H, W), got " + to_string(e.shape()));
  const Tensor e3 = e.dim() == 3 ? e : reshape(e, {1, e.size(0), e.size(1)});
  Tensor out;
  if (mode == ScaleGradient::detached) {
    const auto [lo, inv] = extrema(e3.detach());
    out = mul(sub(e3, lo), inv);
  } else {
    const Tensor lo = min(e3, {1, 2}, true);
    const Tensor range = sub(max(e3, {1, 2}, true), lo);
    // A constant map has e - lo == 0; offsetting its range by one keeps the
    // quotient at zero without dividing by zero.
    Tensor degenerate(range.shape(), 0.0);
    for (std::int64_t b = 0; b < range.numel(); ++b) {
      if (range.at(b) == 0.0) degenerate.mutable_values()[static_cast<std::size_t>(b)] = 1.0;
    }
    out = div(sub(e3, lo), add(range, degenerate));
  }
  return e.dim() == 3 ? out : reshape(out, e.shape());
}

std::optional<double> mass_accuracy(std::span<const double> e, std::span<const double> mask) {
  check_pair(e, mask, "mass_accuracy");
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    total += e[i];
    if (mask[i] > 0.5) inside += e[i];
  }
  if (total == 0.0) return std::nullopt;
  return inside / total;
}

double rank_accuracy(std::span<const double> e, std::span<const double> mask) {
  check_pair(e, mask, "rank_accuracy");
  const std::size_t k = mask_size(mask, "rank_accuracy");
  const auto top = top_k(e, k);
  return static_cast<double>(hits_in_mask(top, mask)) / static_cast<double>(k);
}

bool hit_single(std::span<const double> e, std::span<const double> mask) {
  check_pair(e, mask, "hit_single");
  mask_size(mask, "hit_single");
  const auto best = static_cast<std::size_t>(std::max_element(e.begin(), e.end()) - e.begin());
  return mask[best] > 0.5;
}

double iou_single(std::span<const double> e, std::span<const double> mask) {
  check_pair(e, mask, "iou_single");
  const std::size_t k = mask_size(mask, "iou_single");
  const auto top = top_k(e, k);
  const std::size_t inter = hits_in_mask(top, mask);
  return static_cast<double>(inter) / static_cast<double>(2 * k - inter);
}

AlignmentScores score_alignment(const Tensor& e, const Tensor& mask) {
  const Tensor scaled = minmax_scale(e.detach());
  const auto v = scaled.values(), m = mask.values();
  return {mass_accuracy(v, m), rank_accuracy(v, m), hit_single(v, m), iou_single(v, m)};
}

std::string_view scenario_name(Scenario scenario) {
  switch (scenario) {
    case Scenario::base: return "base";
    case Scenario::align: return "align";
    case Scenario::misalign: return "misalign";
  }
  return "?";
}

Scenario parse_scenario(std::string_view name) {
  for (auto s : {Scenario::base, Scenario::align, Scenario::misalign}) {
    if (scenario_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown scenario '" + std::string(name) + "'");
}

LossTerms alignment_term(const Tensor& attributions, std::span<const Tensor> masks, Scenario scenario,
                         ScaleGradient mode) {
  if (scenario == Scenario::base) throw std::invalid_argument("alignment term: scenario must be align or misalign");
  if (attributions.dim() != 3 || static_cast<std::int64_t>(masks.size()) != attributions.size(0)) {
    throw ShapeError("alignment term: " + std::to_string(masks.size()) + " masks for attributions " +
                     to_string(attributions.shape()));
  }
  const std::int64_t plane = attributions.size(1) * attributions.size(2);
  std::vector<std::int64_t> rows;
  std::vector<double> target;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (!masks[i].defined()) continue;
    if (masks[i].numel() != plane) {
      throw ShapeError("alignment term: mask " + to_string(masks[i].shape()) + " vs attributions " +
                       to_string(attributions.shape()));
    }
    rows.push_back(static_cast<std::int64_t>(i));
    for (double m : masks[i].values()) target.push_back(scenario == Scenario::align ? m : 1.0 - m);
  }
  LossTerms terms;
  terms.used = static_cast<std::int64_t>(rows.size());
  terms.skipped = static_cast<std::int64_t>(masks.size()) - terms.used;
  if (rows.empty()) {
    terms.alignment = Tensor::scalar(0.0);
    terms.total = terms.alignment;
    return terms;
  }
  Tensor e = attributions;
  if (terms.skipped > 0) {
    std::vector<Tensor> parts;
    for (auto r : rows) parts.push_back(slice(attributions, 0, r, r + 1));
    e = concat(parts, 0);
  }
  const Tensor residual = sub(minmax_scale(e, mode), Tensor(e.shape(), std::move(target)));
  terms.alignment = scale(sum(mul(residual, residual)), 1.0 / static_cast<double>(terms.used));
  terms.total = terms.alignment;
  return terms;
}

LossTerms loss_align(const Model& model, std::span<const Tensor> params, const MaskedBatch& batch,
                     std::int64_t label, const ExplainerConfig& config, ScaleGradient mode) {
  return explained_term(model, params, batch, label, config, Scenario::align, mode);
}

LossTerms loss_misalign(const Model& model, std::span<const Tensor> params, const MaskedBatch& batch,
                        std::int64_t label, const ExplainerConfig& config, ScaleGradient mode) {
  return explained_term(model, params, batch, label, config, Scenario::misalign, mode);
}

LossTerms loss_total(const Model& model, std::span<const Tensor> params, const MaskedBatch& batch,
                     std::int64_t label, const ExplainerConfig& config, Scenario scenario, double alpha,
                     ScaleGradient mode) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("loss_total: alpha must be >= 0, got " + std::to_string(alpha));
  if (scenario == Scenario::base) throw std::invalid_argument("loss_total: scenario must be align or misalign");
  LossTerms terms = explained_term(model, params, batch, label, config, scenario, mode);
  terms.classification = bce_with_logits(model.forward(params, batch.images), batch.targets);
  terms.total = alpha == 0.0 ? terms.classification : add(terms.classification, scale(terms.alignment, alpha));
  return terms;
}

}  // namespace xalign
