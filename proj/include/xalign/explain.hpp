#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xalign/model.hpp"
#include "xalign/tensor.hpp"

namespace xalign {

enum class Method { vg, ig, sg, lrp };

std::string_view method_name(Method method);
Method parse_method(std::string_view name);

struct ExplainerConfig {
  Method method = Method::vg;
  double baseline_fill = 0.0;
  std::optional<Tensor> baseline;  // (C, H, W); overrides baseline_fill
  std::int64_t ig_steps = 20;
  std::int64_t sg_samples = 20;
  double sg_sigma = 0.1;
  double lrp_epsilon = 1e-6;
  std::uint64_t noise_seed = 0;

  /// Throws std::invalid_argument on n < 1, sigma < 0 or epsilon <= 0.
  void validate() const;
};

/// Attribution maps for a batch, all for the same label.
struct Explanation {
  Tensor attributions;  // (B, H, W), channel-reduced, nonnegative
  Tensor raw;           // (B, C, H, W), signed, before channel reduction
  std::int64_t label = 0;
  Method method = Method::vg;
  bool differentiable = false;
};

/// (B, C, H, W) -> (B, H, W): negatives clamped to zero per channel, then
/// summed over channels. Also accepts a single (C, H, W) map.
Tensor reduce_channels(const Tensor& raw);

/// Explains `x` of shape (B, C, H, W) for `label`.
///
/// With record=false the model parameters are treated as constants and the
/// result carries no graph. With record=true `params` must be leaves of one
/// graph (see Model::bind) and the explanation is recorded on it, so a loss
/// on the attributions can be differentiated with respect to `params`.
Explanation explain(const Model& model, std::span<const Tensor> params, const Tensor& x, std::int64_t label,
                    const ExplainerConfig& config, bool record);

/// Same as explain() with the model's stored parameters and record=false.
Explanation explain(const Model& model, const Tensor& x, std::int64_t label, const ExplainerConfig& config);

/// LRP epsilon rule. When `trace` is given it receives the per-sample total
/// relevance entering each layer, from the output layer down to the input:
/// trace[k] has shape (B,).
Tensor lrp_relevance(const Model& model, std::span<const Tensor> params, const Tensor& x, std::int64_t label,
                     double epsilon, std::vector<Tensor>* trace = nullptr);

/// Throws std::invalid_argument when `method` cannot explain `model`.
void check_supported(const Model& model, Method method);

}  // namespace xalign
