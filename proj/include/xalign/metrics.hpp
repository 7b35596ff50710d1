#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "xalign/explain.hpp"
#include "xalign/model.hpp"
#include "xalign/tensor.hpp"

namespace xalign {

/// How gradients treat the per-sample min and max inside minmax_scale.
enum class ScaleGradient {
  detached,  // min and max are constants for the step
  full,      // gradients flow through the selected extrema
};

/// Per-sample min-max scaling over the trailing two axes of an (H, W) or
/// (B, H, W) map. Constant maps become all zeros.
Tensor minmax_scale(const Tensor& e, ScaleGradient mode = ScaleGradient::detached);

// Alignment metrics on one (H, W) map and one binary mask of equal size.
// `e` is expected to be scaled and nonnegative.

/// Share of attribution mass inside the mask; nullopt when sum(e) == 0.
std::optional<double> mass_accuracy(std::span<const double> e, std::span<const double> mask);
/// Share of the k = |mask| highest-attributed pixels that fall inside the
/// mask. Ties are broken by ascending flat index. Throws on an empty mask.
double rank_accuracy(std::span<const double> e, std::span<const double> mask);
/// Flat argmax of e (first on ties) lies inside the mask.
bool hit_single(std::span<const double> e, std::span<const double> mask);
/// IoU of the top-k pixels of e (k = |mask|, same tie rule) with the mask.
double iou_single(std::span<const double> e, std::span<const double> mask);

struct AlignmentScores {
  std::optional<double> mass;
  double rank = 0.0;
  bool hit = false;
  double iou = 0.0;
};

/// All four metrics on the min-max scaled version of `e`.
AlignmentScores score_alignment(const Tensor& e, const Tensor& mask);

enum class Scenario { base, align, misalign };
std::string_view scenario_name(Scenario scenario);
Scenario parse_scenario(std::string_view name);

/// Images and per-sample masks for one label; a missing mask is an undefined
/// tensor.
struct MaskedBatch {
  Tensor images;              // (B, C, H, W)
  Tensor targets;             // (B, L) 0/1, used by the classification term
  std::vector<Tensor> masks;  // B entries of (H, W) or undefined
};

struct LossTerms {
  Tensor total;           // equals alignment for the alignment-only losses
  Tensor classification;  // undefined for the alignment-only losses
  Tensor alignment;
  std::int64_t used = 0;     // samples contributing to the alignment term
  std::int64_t skipped = 0;  // samples without a mask
};

/// Mean over samples of sum((scaled e - target)^2), target = mask for align
/// and 1 - mask for misalign. `attributions` is (B, H, W), `masks` has B
/// entries; samples with an undefined mask are skipped and counted.
LossTerms alignment_term(const Tensor& attributions, std::span<const Tensor> masks, Scenario scenario,
                         ScaleGradient mode = ScaleGradient::detached);

/// Explains the masked samples of `batch` with record=true on `params` and
/// returns the alignment (or misalignment) term. `params` must be graph leaves.
LossTerms loss_align(const Model& model, std::span<const Tensor> params, const MaskedBatch& batch,
                     std::int64_t label, const ExplainerConfig& config, ScaleGradient mode = ScaleGradient::detached);
LossTerms loss_misalign(const Model& model, std::span<const Tensor> params, const MaskedBatch& batch,
                        std::int64_t label, const ExplainerConfig& config,
                        ScaleGradient mode = ScaleGradient::detached);

/// Mean binary cross-entropy on all labels plus alpha times the alignment
/// term of `scenario` (align or misalign). Throws on alpha < 0 or base.
LossTerms loss_total(const Model& model, std::span<const Tensor> params, const MaskedBatch& batch,
                     std::int64_t label, const ExplainerConfig& config, Scenario scenario, double alpha = 1.0,
                     ScaleGradient mode = ScaleGradient::detached);

}  // namespace xalign
