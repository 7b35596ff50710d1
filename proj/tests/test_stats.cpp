#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "stats_oracles.hpp"
#include "xalign/stats.hpp"

using namespace xalign;

namespace {

double brute_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& t) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!t[i] || t[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

double entropy(const std::vector<std::uint8_t>& v) {
  double p = 0;
  for (auto x : v) p += x;
  p /= static_cast<double>(v.size());
  return p == 0 || p == 1 ? 0.0 : -(p * std::log2(p) + (1 - p) * std::log2(1 - p));
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_DOUBLE_EQ(*auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<std::uint8_t>{0, 0, 1, 1}), 0.75);
  EXPECT_DOUBLE_EQ(*auroc(std::vector<double>{0.1, 0.2, 0.7, 0.8}, std::vector<std::uint8_t>{0, 0, 1, 1}), 1.0);
  EXPECT_FALSE(auroc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1, 1}).has_value());
}

TEST(Auroc, MatchesPairCountingWithTies) {
  std::mt19937_64 rng(61);
  std::uniform_int_distribution<int> level(0, 6);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(40);
    std::vector<std::uint8_t> t(40);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = level(rng) / 6.0;
      t[i] = coin(rng);
    }
    t[0] = 1;
    t[1] = 0;
    EXPECT_NEAR(*auroc(s, t), brute_auroc(s, t), 1e-14);
  }
}

TEST(Auroc, InvariantUnderIncreasingTransform) {
  std::mt19937_64 rng(62);
  std::normal_distribution<double> z;
  std::vector<double> s(100), e(100);
  std::vector<std::uint8_t> t(100);
  for (std::size_t i = 0; i < s.size(); ++i) {
    t[i] = i % 3 == 0;
    s[i] = z(rng) + t[i];
    e[i] = std::exp(3 * s[i]);
  }
  EXPECT_NEAR(*auroc(s, t), *auroc(e, t), 1e-15);
}

TEST(Auroc, IndependentScoresGiveOneHalf) {
  std::mt19937_64 rng(63);
  std::uniform_real_distribution<double> u;
  std::vector<double> s(20000);
  std::vector<std::uint8_t> t(20000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = u(rng);
    t[i] = u(rng) < 0.3;
  }
  EXPECT_NEAR(*auroc(s, t), 0.5, 0.02);
}

TEST(MacroAuroc, AveragesValidLabelsAndReportsExcluded) {
  // label 0: example above (0.75); label 1: all positive, excluded.
  const std::vector<double> s{0.1, 0.5, 0.4, 0.5, 0.35, 0.5, 0.8, 0.5};
  const std::vector<std::uint8_t> t{0, 1, 0, 1, 1, 1, 1, 1};
  const auto m = macro_auroc(s, t, 2);
  EXPECT_DOUBLE_EQ(m.value, 0.75);
  EXPECT_EQ(m.excluded, (std::vector<std::int64_t>{1}));
  EXPECT_THROW(macro_auroc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1, 1}, 1), std::invalid_argument);
}

TEST(MutualInformation, Examples) {
  const std::vector<std::uint8_t> t{0, 1, 1, 0, 1, 0, 0, 0};
  EXPECT_NEAR(mutual_information(t, t), entropy(t), 1e-15);
  // Empirically independent: joint counts [[2, 2], [2, 2]].
  EXPECT_EQ(mutual_information(std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 1, 1},
                               std::vector<std::uint8_t>{0, 1, 0, 1, 0, 1, 0, 1}),
            0.0);
  // Joint counts [[2, 1], [1, 2]].
  const std::vector<std::uint8_t> pred{0, 0, 0, 1, 1, 1}, target{0, 0, 1, 0, 1, 1};
  const double expected = 2 * (2.0 / 6) * std::log2((2.0 / 6) / 0.25) + 2 * (1.0 / 6) * std::log2((1.0 / 6) / 0.25);
  EXPECT_NEAR(mutual_information(pred, target), expected, 1e-15);
}

TEST(MutualInformation, BoundedByMarginalEntropies) {
  std::mt19937_64 rng(64);
  std::bernoulli_distribution coin(0.35);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::uint8_t> a(30), b(30);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = coin(rng);
      b[i] = coin(rng) ? a[i] : coin(rng);
    }
    const double mi = mutual_information(a, b);
    EXPECT_GE(mi, 0.0);
    EXPECT_LE(mi, std::min(entropy(a), entropy(b)) + 1e-12);
  }
}

TEST(Robustness, Examples) {
  using Scores = std::map<std::int64_t, std::optional<double>>;
  const Scores a{{1, 0.8}, {2, 0.6}}, m{{1, 0.3}, {2, 0.1}};
  EXPECT_DOUBLE_EQ(robustness(a, m).mean, 0.5);
  EXPECT_DOUBLE_EQ(robustness(a, a).mean, 0.0);
  EXPECT_DOUBLE_EQ(robustness(Scores{{1, 1.0}, {2, 1.0}}, Scores{{1, 0.0}, {2, 0.0}}).mean, 1.0);
  EXPECT_DOUBLE_EQ(robustness(m, a).mean, -robustness(a, m).mean);
  EXPECT_EQ(robustness(a, m).differences, (std::vector<double>{0.8 - 0.3, 0.6 - 0.1}));
}

TEST(Robustness, MismatchListsIds) {
  using Scores = std::map<std::int64_t, std::optional<double>>;
  try {
    robustness(Scores{{1, 0.5}, {4, 0.5}}, Scores{{1, 0.5}, {7, 0.1}});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("4, 7"), std::string::npos) << e.what();
  }
}

TEST(Robustness, MissingValuesAreDroppedAndCounted) {
  using Scores = std::map<std::int64_t, std::optional<double>>;
  const auto r = robustness(Scores{{1, 0.9}, {2, std::nullopt}}, Scores{{1, 0.4}, {2, 0.2}});
  EXPECT_EQ(r.missing, 1);
  EXPECT_DOUBLE_EQ(r.mean, 0.5);
}

TEST(Correlation, Examples) {
  const std::vector<double> x{1, 2, 3, 4};
  const auto c = correlations(x, std::vector<double>{1, 3, 2, 4});
  EXPECT_DOUBLE_EQ(*c.spearman, 0.8);
  const auto lin = correlations(x, std::vector<double>{3, 5, 7, 9});
  EXPECT_DOUBLE_EQ(*lin.pearson, 1.0);
  EXPECT_DOUBLE_EQ(*lin.spearman, 1.0);
  std::vector<double> ex;
  for (double v : x) ex.push_back(std::exp(v));
  const auto mono = correlations(x, ex);
  EXPECT_DOUBLE_EQ(*mono.spearman, 1.0);
  EXPECT_LT(*mono.pearson, 1.0);
  EXPECT_FALSE(correlations(x, std::vector<double>(4, 2.0)).pearson.has_value());
  EXPECT_THROW(correlations(std::vector<double>{1, 2}, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(Correlation, SpearmanInvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(65);
  std::normal_distribution<double> z;
  std::vector<double> x(50), y(50), fx(50), fy(50);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = z(rng);
    y[i] = x[i] + z(rng);
    fx[i] = std::exp(x[i]);
    fy[i] = -std::pow(y[i], 3);  // decreasing flips the sign only
  }
  EXPECT_NEAR(*correlations(fx, y).spearman, *correlations(x, y).spearman, 1e-14);
  EXPECT_NEAR(*correlations(x, fy).spearman, -*correlations(x, y).spearman, 1e-14);
}

TEST(Ranks, TiesAreAveraged) {
  EXPECT_EQ(average_ranks(std::vector<double>{3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(StudentT, MatchesIntegratedDensity) {
  EXPECT_NEAR(student_t_cdf(1.812, 10), 0.95, 1e-4);
  for (double dof : {1.0, 2.5, 7.0, 30.0}) {
    for (double t : {0.1, 0.9, 2.0, 4.5}) {
      EXPECT_NEAR(student_t_cdf(t, dof), testkit::t_cdf_by_integration(t, dof), 1e-10) << dof << " " << t;
      EXPECT_NEAR(student_t_cdf(-t, dof), 1.0 - student_t_cdf(t, dof), 1e-14);
    }
  }
  EXPECT_EQ(student_t_cdf(0.0, 5), 0.5);
}

TEST(IncompleteBeta, KnownClosedForms) {
  // I_x(1, 1) = x; I_x(a, 1) = x^a; I_x(1, b) = 1 - (1 - x)^b.
  EXPECT_NEAR(incomplete_beta(1, 1, 0.3), 0.3, 1e-14);
  EXPECT_NEAR(incomplete_beta(2.5, 1, 0.6), std::pow(0.6, 2.5), 1e-14);
  EXPECT_NEAR(incomplete_beta(1, 4, 0.2), 1 - std::pow(0.8, 4), 1e-14);
}

namespace {

struct Design {
  std::vector<double> flat;
  testkit::Matrix rows;
};

Design design_from(const testkit::Matrix& rows) {
  Design d{{}, rows};
  for (const auto& r : rows) d.flat.insert(d.flat.end(), r.begin(), r.end());
  return d;
}

}  // namespace

TEST(Ols, SixPointDatasetMatchesNormalEquations) {
  const auto d = design_from({{1, 0, 0.5}, {1, 1, 1.5}, {1, 0, 2.0}, {1, 1, -0.5}, {1, 0, 3.0}, {1, 1, 1.0}});
  const std::vector<double> y{0.3, 1.9, 0.8, 0.7, 1.6, 1.7};
  const auto fit = ols_fit(d.flat, 3, y, {"intercept", "group", "x"});
  const auto o = testkit::ols_by_normal_equations(d.rows, y);
  EXPECT_EQ(fit.dof, 3);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(fit.coefficients[j], o.coef[j], 1e-8);
    EXPECT_NEAR(fit.std_errors[j], o.se[j], 1e-8);
    EXPECT_NEAR(fit.p_values[j], o.p[j], 1e-6);
  }
}

TEST(Ols, ExactLinearResponseRecoversCoefficients) {
  std::mt19937_64 rng(66);
  std::normal_distribution<double> z;
  testkit::Matrix rows;
  std::vector<double> y;
  for (int i = 0; i < 30; ++i) {
    const double a = z(rng), b = i % 2;
    rows.push_back({1.0, a, b});
    y.push_back(0.5 + 2.0 * a - 1.5 * b + 1e-9 * z(rng));
  }
  const auto d = design_from(rows);
  const auto fit = ols_fit(d.flat, 3, y, {"intercept", "a", "b"});
  EXPECT_NEAR(fit.coefficients[0], 0.5, 1e-8);
  EXPECT_NEAR(fit.coefficients[1], 2.0, 1e-8);
  EXPECT_NEAR(fit.coefficients[2], -1.5, 1e-8);
  for (double p : fit.p_values) EXPECT_LT(p, 1e-12);
}

TEST(Ols, PureNoiseInterceptIsMeanAndPValuesAreInRange) {
  std::mt19937_64 rng(67);
  std::normal_distribution<double> z;
  testkit::Matrix rows;
  std::vector<double> y;
  for (int i = 0; i < 400; ++i) {
    rows.push_back({1.0, static_cast<double>(i % 2)});
    y.push_back(z(rng));
  }
  const auto d = design_from(rows);
  const auto fit = ols_fit(d.flat, 2, y, {"intercept", "g"});
  double mean_even = 0;
  for (int i = 0; i < 400; i += 2) mean_even += y[static_cast<std::size_t>(i)] / 200.0;
  EXPECT_NEAR(fit.coefficients[0], mean_even, 1e-12);
  EXPECT_GT(fit.p_values[1], 0.05);
  for (double p : fit.p_values) {
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
}

TEST(Ols, RankDeficiencyNamesColumns) {
  const auto d = design_from({{1, 1, 0, 1}, {1, 0, 1, 1}, {1, 1, 0, 1}, {1, 0, 1, 1}, {1, 1, 0, 1}});
  try {
    ols_fit(d.flat, 4, std::vector<double>{1, 2, 3, 4, 5}, {"intercept", "a", "b", "c"});
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("b, c"), std::string::npos) << what;
  }
}
