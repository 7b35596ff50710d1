#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace xalign {

/// Mann-Whitney AUROC of one label; ties count one half. nullopt when the
/// targets lack a positive or a negative.
std::optional<double> auroc(std::span<const double> scores, std::span<const std::uint8_t> targets);

struct MacroAuroc {
  double value = 0.0;
  std::vector<std::optional<double>> per_label;
  std::vector<std::int64_t> excluded;  // labels without both classes
};

/// Mean AUROC over labels. `scores` and `targets` are row-major (n, labels).
/// Throws std::invalid_argument when no label has both classes.
MacroAuroc macro_auroc(std::span<const double> scores, std::span<const std::uint8_t> targets, std::int64_t labels);

/// Plug-in mutual information in bits between two binary sequences.
double mutual_information(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> target);

struct Robustness {
  double mean = 0.0;
  std::vector<std::int64_t> ids;       // samples with both values present
  std::vector<double> differences;     // aligned - misaligned, per id
  std::int64_t missing = 0;            // ids dropped for an undefined value
};

/// Mean over shared ids of aligned - misaligned. Both maps must cover the
/// same ids; otherwise std::invalid_argument lists the unmatched ids.
Robustness robustness(const std::map<std::int64_t, std::optional<double>>& aligned,
                      const std::map<std::int64_t, std::optional<double>>& misaligned);

/// 1-based ranks with ties replaced by their average.
std::vector<double> average_ranks(std::span<const double> x);

struct Correlation {
  std::optional<double> pearson;
  std::optional<double> spearman;
};

/// Pearson on values and on average ranks. Zero variance gives nullopt.
/// Throws on unequal lengths or fewer than 3 points.
Correlation correlations(std::span<const double> x, std::span<const double> y);

/// Student t cumulative distribution, via the regularized incomplete beta.
double student_t_cdf(double t, double dof);
/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double incomplete_beta(double a, double b, double x);

struct RegressionResult {
  std::vector<std::string> names;
  std::vector<double> coefficients;
  std::vector<double> std_errors;
  std::vector<double> t_values;
  std::vector<double> p_values;  // two-sided
  std::int64_t dof = 0;
  double rss = 0.0;
};

/// Ordinary least squares of `response` on the row-major (n, p) `design`.
/// Throws std::invalid_argument naming columns that are linear combinations
/// of earlier ones, or when n <= p.
RegressionResult ols_fit(std::span<const double> design, std::int64_t columns, std::span<const double> response,
                         std::vector<std::string> names);

}  // namespace xalign
