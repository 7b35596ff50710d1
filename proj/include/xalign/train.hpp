#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xalign/data.hpp"
#include "xalign/explain.hpp"
#include "xalign/metrics.hpp"
#include "xalign/model.hpp"

namespace xalign {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<Tensor> m;  // first moments, one per parameter
  std::vector<Tensor> v;  // second moments
};

OptimizerState make_adamw(std::span<const Tensor> params, const AdamWConfig& config);

/// Raised when a gradient holds NaN or infinity. No parameter is modified.
class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One decoupled-weight-decay Adam step with bias correction:
///   theta -= lr * wd * theta
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
///   theta -= lr * m_hat / (sqrt(v_hat) + eps)
/// `lr` overrides config.lr when given (warmup).
void adamw_step(std::vector<Tensor>& params, std::span<const Tensor> grads, OptimizerState& state,
                std::span<const std::string> names, std::optional<double> lr = std::nullopt);

/// Rotates a (C, H, W) image about its centre, counter-clockwise by
/// `degrees`, with bilinear sampling and zero fill. Multiples of 90 degrees
/// on square images are exact pixel permutations.
Tensor rotate_image(const Tensor& image, double degrees);
/// Same geometry for an (H, W) mask with nearest-neighbour sampling.
Tensor rotate_mask(const Tensor& mask, double degrees);

struct TrainConfig {
  std::int64_t epochs = 25;
  std::int64_t batch_size = 32;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  double rotation = 15.0;             // uniform in [-rotation, rotation] degrees; 0 disables
  std::int64_t warmup_steps = 0;      // linear warmup of the learning rate
  Scenario scenario = Scenario::base;
  double alpha = 1.0;
  std::vector<std::int64_t> labels;   // fine-tuning targets; one label per run by default
  ScaleGradient scale_mode = ScaleGradient::detached;
  std::int64_t validate_every = 1;    // epochs between alignment validations (0: last epoch only)
  std::int64_t val_limit = 0;         // cap on validation samples per label (0: all)

  /// Throws std::invalid_argument on the first violated constraint.
  void validate() const;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double classification_loss = 0.0;
  std::optional<double> alignment_loss;
  std::optional<double> val_auroc;
  std::optional<double> val_mass;
  std::optional<double> val_rank;
  std::int64_t skipped_masks = 0;
  double wall_seconds = 0.0;  // excluded from determinism comparisons
};

/// One JSON object per line. Wall time is omitted when include_time is false.
std::string to_json_lines(std::span<const EpochRecord> log, bool include_time = true);

struct TrainResult {
  Model model;
  std::vector<EpochRecord> log;
};

/// Raised when a loss turns NaN or infinite.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::int64_t epoch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch) {}
  std::int64_t epoch() const { return epoch_; }

 private:
  std::int64_t epoch_;
};

/// Samples of `dataset` listed by index, batched into images and targets.
struct Batch {
  Tensor images;  // (B, C, H, W)
  Tensor targets;  // (B, L)
};
Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices);

/// Macro AUROC of `model` on the listed samples; nullopt when no label has
/// both classes.
std::optional<double> evaluate_auroc(const Model& model, const Dataset& dataset, std::span<const std::size_t> indices);

/// Mean mass and rank accuracy of `model` + explainer on the samples that
/// are positive for `label` and carry its mask.
struct AlignmentSummary {
  std::optional<double> mass;
  std::optional<double> rank;
  std::int64_t evaluated = 0;
  std::int64_t missing_mass = 0;
};
AlignmentSummary evaluate_alignment(const Model& model, const ExplainerConfig& explainer, const Dataset& dataset,
                                    std::span<const std::size_t> indices, std::int64_t label,
                                    std::int64_t limit = 0);

/// Trains `model` from its current parameters with mean binary
/// cross-entropy on `train`, logging validation macro AUROC on `val`.
TrainResult train_base(const Model& model, const Dataset& dataset, std::span<const std::size_t> train,
                       std::span<const std::size_t> val, const TrainConfig& config);

/// Fine-tunes with classification loss + alpha * (mis)alignment loss for
/// config.labels (summed when several are given). The explanation is rebuilt
/// on the current parameters every step. SG noise seeds advance per step.
TrainResult finetune_alignment(const Model& model, const ExplainerConfig& explainer, const Dataset& dataset,
                               std::span<const std::size_t> train, std::span<const std::size_t> val,
                               const TrainConfig& config);

}  // namespace xalign
