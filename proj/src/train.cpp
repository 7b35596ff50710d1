#include "xalign/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <json.hpp>
#include <numeric>

#include "xalign/graph.hpp"
#include "xalign/ops.hpp"
#include "xalign/seed.hpp"
#include "xalign/stats.hpp"

namespace xalign {
namespace {

constexpr std::int64_t kEvalChunk = 64;

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Source coordinate of output pixel (r, c) for a counter-clockwise rotation.
struct Rotation {
  double cos_t, sin_t, cx, cy;

  Rotation(double degrees, std::int64_t height, std::int64_t width)
      : cx((static_cast<double>(width) - 1.0) / 2.0), cy((static_cast<double>(height) - 1.0) / 2.0) {
    const double quarter = degrees / 90.0;
    if (quarter == std::round(quarter)) {
      const auto q = ((static_cast<long long>(std::llround(quarter)) % 4) + 4) % 4;
      cos_t = q == 0 ? 1.0 : (q == 2 ? -1.0 : 0.0);
      sin_t = q == 1 ? 1.0 : (q == 3 ? -1.0 : 0.0);
    } else {
      const double rad = degrees * M_PI / 180.0;
      cos_t = std::cos(rad);
      sin_t = std::sin(rad);
    }
  }

  std::pair<double, double> source(std::int64_t r, std::int64_t c) const {
    const double dx = static_cast<double>(c) - cx, dy = static_cast<double>(r) - cy;
    return {cx + cos_t * dx - sin_t * dy, cy + sin_t * dx + cos_t * dy};
  }
};

double lr_at(const TrainConfig& config, std::int64_t step) {
  if (config.warmup_steps <= 0) return config.optimizer.lr;
  return config.optimizer.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps));
}

double random_angle(std::mt19937_64& rng, double range) {
  if (range == 0.0) return 0.0;
  return std::uniform_real_distribution<double>(-range, range)(rng);
}

std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> order, std::int64_t batch_size,
                                                    std::mt19937_64& rng) {
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

void check_finite_loss(const Tensor& loss, std::int64_t epoch, const char* what) {
  if (!std::isfinite(loss.item())) {
    throw TrainingDiverged(epoch, std::string(what) + " became non-finite in epoch " + std::to_string(epoch));
  }
}

// Augmented batch: one angle per sample, applied to the image and to the
// masks of every requested label.
struct AugmentedBatch {
  Batch batch;
  std::vector<std::vector<Tensor>> masks;  // [label position][sample]
};

AugmentedBatch augment(const Dataset& dataset, std::span<const std::size_t> indices,
                       std::span<const std::int64_t> labels, double range, std::mt19937_64& rng) {
  AugmentedBatch out;
  out.masks.assign(labels.size(), std::vector<Tensor>(indices.size()));
  const auto& shape = dataset.shape;
  const std::int64_t plane = shape.channels * shape.height * shape.width;
  std::vector<double> images;
  images.reserve(static_cast<std::size_t>(plane) * indices.size());
  std::vector<double> targets;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = dataset.samples[indices[b]];
    const double angle = random_angle(rng, range);
    const Tensor img = angle == 0.0 ? s.image : rotate_image(s.image, angle);
    images.insert(images.end(), img.values().begin(), img.values().end());
    for (auto l : s.labels) targets.push_back(l);
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const auto it = s.masks.find(labels[k]);
      if (it == s.masks.end()) continue;
      out.masks[k][b] = angle == 0.0 ? it->second : rotate_mask(it->second, angle);
    }
  }
  const auto n = static_cast<std::int64_t>(indices.size());
  out.batch.images = Tensor({n, shape.channels, shape.height, shape.width}, std::move(images));
  out.batch.targets = Tensor({n, dataset.num_labels}, std::move(targets));
  return out;
}

std::optional<double> mean_of(double total, std::int64_t count) {
  if (count == 0) return std::nullopt;
  return total / static_cast<double>(count);
}

}  // namespace

OptimizerState make_adamw(std::span<const Tensor> params, const AdamWConfig& config) {
  OptimizerState state;
  state.config = config;
  for (const auto& p : params) {
    state.m.push_back(Tensor::zeros(p.shape()));
    state.v.push_back(Tensor::zeros(p.shape()));
  }
  return state;
}

void adamw_step(std::vector<Tensor>& params, std::span<const Tensor> grads, OptimizerState& state,
                std::span<const std::string> names, std::optional<double> lr) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw std::invalid_argument("adamw_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw ShapeError("adamw_step: gradient " + to_string(grads[i].shape()) + " for parameter " +
                       to_string(params[i].shape()));
    }
    if (!all_finite(grads[i].values())) {
      const std::string name = i < names.size() ? names[i] : "#" + std::to_string(i);
      throw NonFiniteGradient("adamw_step: non-finite gradient for parameter '" + name + "'");
    }
  }
  const auto& c = state.config;
  const double rate = lr.value_or(c.lr);
  ++state.step;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor next = params[i].detach();
    auto theta = next.mutable_values();
    auto m = state.m[i].mutable_values();
    auto v = state.v[i].mutable_values();
    const auto g = grads[i].values();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      theta[j] -= rate * c.weight_decay * theta[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      theta[j] -= rate * (m[j] / correction1) / (std::sqrt(v[j] / correction2) + c.eps);
    }
    params[i] = next;
  }
}

Tensor rotate_image(const Tensor& image, double degrees) {
  if (image.dim() != 3) throw ShapeError("rotate_image: expected (C, H, W), got " + to_string(image.shape()));
  const std::int64_t C = image.size(0), H = image.size(1), W = image.size(2);
  const Rotation rot(degrees, H, W);
  Tensor out(image.shape(), 0.0);
  auto o = out.mutable_values();
  const auto in = image.values();
  auto pixel = [&](std::int64_t ch, std::int64_t y, std::int64_t x) {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0.0;
    return in[static_cast<std::size_t>((ch * H + y) * W + x)];
  };
  for (std::int64_t r = 0; r < H; ++r) {
    for (std::int64_t c = 0; c < W; ++c) {
      const auto [sx, sy] = rot.source(r, c);
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double ax = sx - fx0, ay = sy - fy0;
      const auto x0 = static_cast<std::int64_t>(fx0), y0 = static_cast<std::int64_t>(fy0);
      for (std::int64_t ch = 0; ch < C; ++ch) {
        double v = (1 - ax) * (1 - ay) * pixel(ch, y0, x0);
        if (ax > 0) v += ax * (1 - ay) * pixel(ch, y0, x0 + 1);
        if (ay > 0) v += (1 - ax) * ay * pixel(ch, y0 + 1, x0);
        if (ax > 0 && ay > 0) v += ax * ay * pixel(ch, y0 + 1, x0 + 1);
        o[static_cast<std::size_t>((ch * H + r) * W + c)] = v;
      }
    }
  }
  return out;
}

Tensor rotate_mask(const Tensor& mask, double degrees) {
  if (mask.dim() != 2) throw ShapeError("rotate_mask: expected (H, W), got " + to_string(mask.shape()));
  const std::int64_t H = mask.size(0), W = mask.size(1);
  const Rotation rot(degrees, H, W);
  Tensor out(mask.shape(), 0.0);
  auto o = out.mutable_values();
  for (std::int64_t r = 0; r < H; ++r) {
    for (std::int64_t c = 0; c < W; ++c) {
      const auto [sx, sy] = rot.source(r, c);
      const auto x = static_cast<std::int64_t>(std::llround(sx)), y = static_cast<std::int64_t>(std::llround(sy));
      if (x >= 0 && x < W && y >= 0 && y < H) o[static_cast<std::size_t>(r * W + c)] = mask.at(y * W + x);
    }
  }
  return out;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(optimizer.lr > 0)) fail("lr must be positive");
  if (optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 || optimizer.beta2 >= 1) fail("betas must lie in [0, 1)");
  if (!(optimizer.eps > 0)) fail("eps must be positive");
  if (optimizer.weight_decay < 0) fail("weight_decay must be >= 0");
  if (rotation < 0 || rotation > 180) fail("rotation range must lie in [0, 180] degrees");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(alpha >= 0)) fail("alpha must be >= 0");
  if (validate_every < 0 || val_limit < 0) fail("validate_every and val_limit must be >= 0");
}

std::string to_json_lines(std::span<const EpochRecord> log, bool include_time) {
  std::string out;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  for (const auto& r : log) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["classification_loss"] = r.classification_loss;
    j["alignment_loss"] = opt(r.alignment_loss);
    j["val_auroc"] = opt(r.val_auroc);
    j["val_mass"] = opt(r.val_mass);
    j["val_rank"] = opt(r.val_rank);
    j["skipped_masks"] = r.skipped_masks;
    if (include_time) j["wall_seconds"] = r.wall_seconds;
    out += j.dump() + "\n";
  }
  return out;
}

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  std::mt19937_64 unused(0);
  return augment(dataset, indices, {}, 0.0, unused).batch;
}

std::optional<double> evaluate_auroc(const Model& model, const Dataset& dataset, std::span<const std::size_t> indices) {
  NoGradGuard off;
  std::vector<double> scores;
  std::vector<std::uint8_t> targets;
  for (std::size_t i = 0; i < indices.size(); i += kEvalChunk) {
    const auto part = indices.subspan(i, std::min<std::size_t>(kEvalChunk, indices.size() - i));
    const auto batch = make_batch(dataset, part);
    const auto logits = model.forward(batch.images);
    scores.insert(scores.end(), logits.values().begin(), logits.values().end());
    for (auto idx : part) {
      for (auto l : dataset.samples[idx].labels) targets.push_back(l);
    }
  }
  if (scores.empty()) return std::nullopt;
  try {
    return macro_auroc(scores, targets, model.num_labels()).value;
  } catch (const std::invalid_argument&) {
    return std::nullopt;
  }
}

AlignmentSummary evaluate_alignment(const Model& model, const ExplainerConfig& explainer, const Dataset& dataset,
                                    std::span<const std::size_t> indices, std::int64_t label, std::int64_t limit) {
  std::vector<std::size_t> chosen;
  for (auto idx : indices) {
    if (dataset.samples[idx].masks.count(label)) chosen.push_back(idx);
    if (limit > 0 && static_cast<std::int64_t>(chosen.size()) == limit) break;
  }
  AlignmentSummary summary;
  double mass = 0.0, rank = 0.0;
  std::int64_t mass_count = 0;
  for (std::size_t i = 0; i < chosen.size(); i += kEvalChunk) {
    const std::span<const std::size_t> part(chosen.data() + i, std::min<std::size_t>(kEvalChunk, chosen.size() - i));
    const auto batch = make_batch(dataset, part);
    const auto e = explain(model, batch.images, label, explainer);
    const std::int64_t plane = e.attributions.size(1) * e.attributions.size(2);
    for (std::size_t b = 0; b < part.size(); ++b) {
      const auto first = e.attributions.values().begin() + static_cast<std::ptrdiff_t>(b) * plane;
      const Tensor map({e.attributions.size(1), e.attributions.size(2)}, std::vector<double>(first, first + plane));
      const auto s = score_alignment(map, dataset.samples[part[b]].masks.at(label));
      ++summary.evaluated;
      rank += s.rank;
      if (s.mass) {
        mass += *s.mass;
        ++mass_count;
      } else {
        ++summary.missing_mass;
      }
    }
  }
  summary.mass = mean_of(mass, mass_count);
  summary.rank = mean_of(rank, summary.evaluated);
  return summary;
}

TrainResult train_base(const Model& model, const Dataset& dataset, std::span<const std::size_t> train,
                       std::span<const std::size_t> val, const TrainConfig& config) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("train_base: empty training set");
  if (model.num_labels() != dataset.num_labels) {
    throw std::invalid_argument("train_base: model has " + std::to_string(model.num_labels()) + " labels, dataset " +
                                std::to_string(dataset.num_labels));
  }
  TrainResult result{model, {}};
  std::vector<Tensor> params(model.parameters().begin(), model.parameters().end());
  auto state = make_adamw(params, config.optimizer);
  std::mt19937_64 rng(config.seed);
  const std::vector<std::size_t> order(train.begin(), train.end());
  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double loss_total = 0.0;
    std::int64_t steps = 0;
    for (const auto& idx : epoch_batches(order, config.batch_size, rng)) {
      const auto aug = augment(dataset, idx, {}, config.rotation, rng);
      Graph g;
      const auto p = result.model.bind(g);
      const auto loss = bce_with_logits(result.model.forward(p, aug.batch.images), aug.batch.targets);
      check_finite_loss(loss, epoch, "classification loss");
      const auto grads = backward(loss, p);
      std::vector<Tensor> gs;
      for (const auto& t : p) gs.push_back(grads.get(t));
      adamw_step(params, gs, state, result.model.parameter_names(), lr_at(config, state.step));
      result.model.set_parameters(params);
      loss_total += loss.item();
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.classification_loss = loss_total / static_cast<double>(steps);
    if (!val.empty()) rec.val_auroc = evaluate_auroc(result.model, dataset, val);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(rec);
  }
  return result;
}

TrainResult finetune_alignment(const Model& model, const ExplainerConfig& explainer, const Dataset& dataset,
                               std::span<const std::size_t> train, std::span<const std::size_t> val,
                               const TrainConfig& config) {
  config.validate();
  explainer.validate();
  if (config.scenario == Scenario::base) throw std::invalid_argument("finetune_alignment: scenario must be align or misalign");
  if (config.labels.empty()) throw std::invalid_argument("finetune_alignment: no target labels");
  for (auto l : config.labels) {
    if (l < 0 || l >= dataset.num_labels) throw std::out_of_range("finetune_alignment: label " + std::to_string(l) + " out of range");
  }
  check_supported(model, explainer.method);
  if (train.empty()) throw std::invalid_argument("finetune_alignment: empty training set");

  TrainResult result{model, {}};
  std::vector<Tensor> params(model.parameters().begin(), model.parameters().end());
  auto state = make_adamw(params, config.optimizer);
  std::mt19937_64 rng(config.seed);
  const std::vector<std::size_t> order(train.begin(), train.end());
  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double cls_total = 0.0, align_total = 0.0;
    std::int64_t steps = 0, align_steps = 0;
    EpochRecord rec;
    rec.epoch = epoch;
    for (const auto& idx : epoch_batches(order, config.batch_size, rng)) {
      const auto aug = augment(dataset, idx, config.labels, config.rotation, rng);
      ExplainerConfig step_explainer = explainer;
      step_explainer.noise_seed = derive_seed(explainer.noise_seed, static_cast<std::uint64_t>(state.step));
      Graph g;
      const auto p = result.model.bind(g);
      MaskedBatch mb{aug.batch.images, aug.batch.targets, aug.masks[0]};
      auto terms = loss_total(result.model, p, mb, config.labels[0], step_explainer, config.scenario, config.alpha,
                              config.scale_mode);
      Tensor total = terms.total, alignment = terms.alignment;
      std::int64_t used = terms.used;
      rec.skipped_masks += terms.skipped;
      for (std::size_t k = 1; k < config.labels.size(); ++k) {
        mb.masks = aug.masks[k];
        const auto extra = config.scenario == Scenario::align
                               ? loss_align(result.model, p, mb, config.labels[k], step_explainer, config.scale_mode)
                               : loss_misalign(result.model, p, mb, config.labels[k], step_explainer, config.scale_mode);
        alignment = add(alignment, extra.alignment);
        total = add(total, scale(extra.alignment, config.alpha));
        used += extra.used;
        rec.skipped_masks += extra.skipped;
      }
      check_finite_loss(total, epoch, "fine-tuning loss");
      const auto grads = backward(total, p);
      std::vector<Tensor> gs;
      for (const auto& t : p) gs.push_back(grads.get(t));
      adamw_step(params, gs, state, result.model.parameter_names(), lr_at(config, state.step));
      result.model.set_parameters(params);
      cls_total += terms.classification.item();
      ++steps;
      if (used > 0) {
        align_total += alignment.item();
        ++align_steps;
      }
    }
    rec.classification_loss = cls_total / static_cast<double>(steps);
    rec.alignment_loss = mean_of(align_total, align_steps);
    const bool validate_now =
        (config.validate_every > 0 && epoch % config.validate_every == 0) || epoch == config.epochs;
    if (!val.empty() && validate_now) {
      rec.val_auroc = evaluate_auroc(result.model, dataset, val);
      double mass = 0.0, rank = 0.0;
      std::int64_t mass_n = 0, rank_n = 0;
      for (auto l : config.labels) {
        const auto s = evaluate_alignment(result.model, explainer, dataset, val, l, config.val_limit);
        if (s.mass) mass += *s.mass, ++mass_n;
        if (s.rank) rank += *s.rank, ++rank_n;
      }
      rec.val_mass = mean_of(mass, mass_n);
      rec.val_rank = mean_of(rank, rank_n);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(rec);
  }
  return result;
}

}  // namespace xalign
