#include "xalign/stats.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace xalign {

std::optional<double> auroc(std::span<const double> scores, std::span<const std::uint8_t> targets) {
  if (scores.size() != targets.size()) throw std::invalid_argument("auroc: scores and targets differ in length");
  const auto ranks = average_ranks(scores);
  double positives = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!targets[i]) continue;
    positives += 1.0;
    rank_sum += ranks[i];
  }
  const double negatives = static_cast<double>(targets.size()) - positives;
  if (positives == 0.0 || negatives == 0.0) return std::nullopt;
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

MacroAuroc macro_auroc(std::span<const double> scores, std::span<const std::uint8_t> targets, std::int64_t labels) {
  if (labels < 1 || scores.size() != targets.size() || scores.size() % static_cast<std::size_t>(labels) != 0) {
    throw std::invalid_argument("macro_auroc: scores/targets do not form an (n, labels) table");
  }
  const std::size_t n = scores.size() / static_cast<std::size_t>(labels);
  MacroAuroc result;
  double total = 0.0;
  std::int64_t counted = 0;
  std::vector<double> s(n);
  std::vector<std::uint8_t> t(n);
  for (std::int64_t l = 0; l < labels; ++l) {
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores[i * static_cast<std::size_t>(labels) + static_cast<std::size_t>(l)];
      t[i] = targets[i * static_cast<std::size_t>(labels) + static_cast<std::size_t>(l)];
    }
    const auto a = auroc(s, t);
    result.per_label.push_back(a);
    if (!a) {
      result.excluded.push_back(l);
      continue;
    }
    total += *a;
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("macro_auroc: no label has both positive and negative samples");
  result.value = total / static_cast<double>(counted);
  return result;
}

double mutual_information(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> target) {
  if (pred.size() != target.size() || pred.empty()) {
    throw std::invalid_argument("mutual_information: need equal, non-zero lengths");
  }
  double joint[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < pred.size(); ++i) joint[pred[i] ? 1 : 0][target[i] ? 1 : 0] += 1.0;
  const double n = static_cast<double>(pred.size());
  double mi = 0.0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      if (joint[a][b] == 0.0) continue;
      const double p = joint[a][b] / n;
      const double row = (joint[a][0] + joint[a][1]) / n, col = (joint[0][b] + joint[1][b]) / n;
      mi += p * std::log2(p / (row * col));
    }
  }
  return std::max(mi, 0.0);
}

Robustness robustness(const std::map<std::int64_t, std::optional<double>>& aligned,
                      const std::map<std::int64_t, std::optional<double>>& misaligned) {
  std::vector<std::int64_t> unmatched;
  for (const auto& [id, v] : aligned) {
    if (!misaligned.count(id)) unmatched.push_back(id);
  }
  for (const auto& [id, v] : misaligned) {
    if (!aligned.count(id)) unmatched.push_back(id);
  }
  if (!unmatched.empty()) {
    std::sort(unmatched.begin(), unmatched.end());
    std::string list;
    for (auto id : unmatched) list += (list.empty() ? "" : ", ") + std::to_string(id);
    throw std::invalid_argument("robustness: sample ids present in only one report: " + list);
  }
  Robustness r;
  double total = 0.0;
  for (const auto& [id, a] : aligned) {
    const auto& m = misaligned.at(id);
    if (!a || !m) {
      ++r.missing;
      continue;
    }
    r.ids.push_back(id);
    r.differences.push_back(*a - *m);
    total += *a - *m;
  }
  r.mean = r.ids.empty() ? 0.0 : total / static_cast<double>(r.ids.size());
  return r;
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Modified Lentz evaluation of the incomplete beta continued fraction.
double beta_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double step = d * c;
    h *= step;
    if (std::fabs(step - 1.0) < eps) return h;
  }
  throw std::runtime_error("incomplete_beta: continued fraction did not converge");
}

}  // namespace

Correlation correlations(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("correlations: vectors differ in length");
  if (x.size() < 3) throw std::invalid_argument("correlations: need at least 3 points");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  return {pearson(x, y), pearson(rx, ry)};
}

double incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0 || x < 0.0 || x > 1.0) throw std::invalid_argument("incomplete_beta: argument out of range");
  if (x == 0.0 || x == 1.0) return x;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_fraction(a, b, x) / a;
  return 1.0 - front * beta_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student_t_cdf: dof must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
  return t > 0.0 ? 1.0 - tail : tail;
}

RegressionResult ols_fit(std::span<const double> design, std::int64_t columns, std::span<const double> response,
                         std::vector<std::string> names) {
  const auto p = static_cast<Eigen::Index>(columns);
  if (columns < 1 || design.size() != response.size() * static_cast<std::size_t>(columns)) {
    throw std::invalid_argument("ols_fit: design is not (n, columns) for n = response length");
  }
  if (names.size() != static_cast<std::size_t>(columns)) throw std::invalid_argument("ols_fit: one name per column required");
  const auto n = static_cast<Eigen::Index>(response.size());
  if (n <= p) throw std::invalid_argument("ols_fit: need more rows than columns");
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(design.data(), n, p);
  const Eigen::Map<const Eigen::VectorXd> y(response.data(), n);

  std::vector<std::string> collinear;
  Eigen::Index rank = 0;
  for (Eigen::Index j = 0; j < p; ++j) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X.leftCols(j + 1));
    if (qr.rank() == rank) collinear.push_back(names[static_cast<std::size_t>(j)]);
    rank = qr.rank();
  }
  if (!collinear.empty()) {
    std::string list;
    for (const auto& c : collinear) list += (list.empty() ? "" : ", ") + c;
    throw std::invalid_argument("ols_fit: rank-deficient design; collinear columns: " + list);
  }

  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(X);
  const Eigen::MatrixXd R = qr.matrixQR().topLeftCorner(p, p).triangularView<Eigen::Upper>();
  const Eigen::VectorXd beta = qr.solve(y);
  const Eigen::MatrixXd Rinv = R.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::MatrixXd cov = Rinv * Rinv.transpose();

  RegressionResult r;
  r.names = std::move(names);
  r.dof = static_cast<std::int64_t>(n - p);
  r.rss = (y - X * beta).squaredNorm();
  const double sigma2 = r.rss / static_cast<double>(r.dof);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double se = std::sqrt(sigma2 * cov(j, j));
    const double t = se > 0.0 ? beta(j) / se : (beta(j) == 0.0 ? 0.0 : std::copysign(HUGE_VAL, beta(j)));
    r.coefficients.push_back(beta(j));
    r.std_errors.push_back(se);
    r.t_values.push_back(t);
    r.p_values.push_back(std::isinf(t) ? 0.0 : incomplete_beta(static_cast<double>(r.dof) / 2.0, 0.5,
                                                                 static_cast<double>(r.dof) / (static_cast<double>(r.dof) + t * t)));
  }
  return r;
}

}  // namespace xalign
