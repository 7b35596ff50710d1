#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "op_cases.hpp"
#include "xalign/explain.hpp"
#include "xalign/gradcheck.hpp"
#include "xalign/ops.hpp"

using namespace xalign;

namespace {

/// f(x) = flatten(x) . W + b with one column per label.
Model linear_model(std::int64_t channels, std::int64_t size, std::int64_t labels, const Tensor& weight,
                   const Tensor& bias) {
  const auto features = channels * size * size;
  Model m("linear", {channels, size, size}, labels,
          {{.kind = LayerKind::flatten}, {.kind = LayerKind::dense, .in = features, .out = labels}});
  m.set_parameters({weight, bias});
  return m;
}

Model tiny_cnn(std::uint64_t seed = 3) {
  auto m = build_small_cnn({1, 16, 16}, 3, 0.5);
  m.initialize(seed);
  return m;
}

ExplainerConfig config_for(Method method) {
  ExplainerConfig c;
  c.method = method;
  return c;
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), tol) << "at " << i;
}

}  // namespace

TEST(ReduceChannels, ClampsThenSums) {
  const Tensor raw({1, 2, 1, 1}, {2.0, -2.0});
  EXPECT_EQ(reduce_channels(raw).item(), 2.0);
  const Tensor positive({1, 1, 2, 2}, {0.5, 1.0, 2.0, 3.0});
  expect_close(reduce_channels(positive), reshape(positive, {1, 2, 2}), 0.0);
}

TEST(ReduceChannels, MatchesPerPixelLoop) {
  std::mt19937_64 rng(1);
  const auto raw = testkit::random_tensor(rng, {2, 3, 5, 4});
  const auto reduced = reduce_channels(raw);
  for (std::int64_t b = 0; b < 2; ++b) {
    for (std::int64_t p = 0; p < 20; ++p) {
      double expected = 0.0;
      for (std::int64_t c = 0; c < 3; ++c) expected += std::max(0.0, raw.at((b * 3 + c) * 20 + p));
      EXPECT_DOUBLE_EQ(reduced.at(b * 20 + p), expected);
    }
  }
}

TEST(Vanilla, LinearModelGivesWeights) {
  std::mt19937_64 rng(2);
  const auto w = testkit::random_tensor(rng, {2 * 4 * 4, 2});
  const auto model = linear_model(2, 4, 2, w, Tensor::vector({0.3, -0.1}));
  const auto x = testkit::random_tensor(rng, {1, 2, 4, 4});
  const auto e = explain(model, x, 1, config_for(Method::vg));
  for (std::int64_t i = 0; i < 32; ++i) EXPECT_EQ(e.raw.at(i), w.at(i * 2 + 1));
  EXPECT_EQ(e.attributions.shape(), (Shape{1, 4, 4}));
}

TEST(Vanilla, DeadRegionHasZeroAttribution) {
  std::mt19937_64 rng(3);
  auto w = testkit::random_tensor(rng, {16, 1});
  for (std::int64_t i = 0; i < 8; ++i) w.mutable_values()[static_cast<std::size_t>(i)] = 0.0;
  const auto model = linear_model(1, 4, 1, w, Tensor::vector({0.0}));
  const auto e = explain(model, testkit::random_tensor(rng, {1, 1, 4, 4}), 0, config_for(Method::vg));
  for (std::int64_t i = 0; i < 8; ++i) EXPECT_EQ(e.raw.at(i), 0.0);
}

TEST(Vanilla, CnnMatchesFiniteDifferences) {
  const auto model = tiny_cnn();
  std::mt19937_64 rng(4);
  const auto x = testkit::random_tensor(rng, {1, 1, 16, 16}, 0.0, 1.0);
  const auto e = explain(model, x, 2, config_for(Method::vg));
  const auto numeric = finite_diff_grad([&](const Tensor& t) { return model.forward(t).at(2); }, x, 1e-5);
  EXPECT_LT(relative_error(e.raw, numeric), 1e-4);
}

TEST(Vanilla, LabelOutOfRangeIsRejected) {
  const auto model = tiny_cnn();
  EXPECT_THROW(explain(model, Tensor::zeros({1, 1, 16, 16}), 3, config_for(Method::vg)), std::out_of_range);
}

TEST(IntegratedGradients, LinearModelGivesWeightTimesInput) {
  std::mt19937_64 rng(5);
  const auto w = testkit::random_tensor(rng, {16, 1});
  const auto model = linear_model(1, 4, 1, w, Tensor::vector({0.2}));
  const auto x = testkit::random_tensor(rng, {1, 1, 4, 4});
  for (std::int64_t n : {1, 7, 20}) {
    auto c = config_for(Method::ig);
    c.ig_steps = n;
    const auto e = explain(model, x, 0, c);
    for (std::int64_t i = 0; i < 16; ++i) EXPECT_NEAR(e.raw.at(i), w.at(i) * x.at(i), 1e-15) << "n=" << n;
  }
}

TEST(IntegratedGradients, InputAtBaselineGivesZero) {
  const auto model = tiny_cnn();
  auto c = config_for(Method::ig);
  c.baseline_fill = 0.5;
  const auto e = explain(model, Tensor({1, 1, 16, 16}, 0.5), 0, c);
  for (double v : e.raw.values()) EXPECT_EQ(v, 0.0);
}

TEST(IntegratedGradients, CompletenessAt256Steps) {
  const auto model = tiny_cnn(6);
  std::mt19937_64 rng(7);
  const auto x = testkit::random_tensor(rng, {1, 1, 16, 16}, 0.0, 1.0);
  auto c = config_for(Method::ig);
  c.ig_steps = 256;
  for (std::int64_t label = 0; label < 3; ++label) {
    const auto e = explain(model, x, label, c);
    const double total = sum(e.raw).item();
    const double gap = model.forward(x).at(label) - model.forward(Tensor::zeros(x.shape())).at(label);
    EXPECT_LE(std::fabs(total - gap), 0.01 * std::fabs(gap)) << "label " << label;
  }
}

TEST(IntegratedGradients, RejectsZeroSteps) {
  auto c = config_for(Method::ig);
  c.ig_steps = 0;
  EXPECT_THROW(explain(tiny_cnn(), Tensor::zeros({1, 1, 16, 16}), 0, c), std::invalid_argument);
}

TEST(SmoothGrad, SingleNoiselessSampleIsVanillaGradient) {
  const auto model = tiny_cnn();
  std::mt19937_64 rng(8);
  const auto x = testkit::random_tensor(rng, {2, 1, 16, 16}, 0.0, 1.0);
  auto c = config_for(Method::sg);
  c.sg_samples = 1;
  c.sg_sigma = 0.0;
  const auto sg = explain(model, x, 1, c);
  const auto vg = explain(model, x, 1, config_for(Method::vg));
  for (std::int64_t i = 0; i < sg.raw.numel(); ++i) EXPECT_EQ(sg.raw.at(i), vg.raw.at(i));
  for (std::int64_t i = 0; i < sg.attributions.numel(); ++i) EXPECT_EQ(sg.attributions.at(i), vg.attributions.at(i));
}

TEST(SmoothGrad, LinearModelGivesWeights) {
  std::mt19937_64 rng(9);
  const auto w = testkit::random_tensor(rng, {16, 1});
  const auto model = linear_model(1, 4, 1, w, Tensor::vector({0.0}));
  auto c = config_for(Method::sg);
  c.sg_samples = 5;
  c.sg_sigma = 0.3;
  const auto e = explain(model, testkit::random_tensor(rng, {1, 1, 4, 4}), 0, c);
  for (std::int64_t i = 0; i < 16; ++i) EXPECT_NEAR(e.raw.at(i), w.at(i), 1e-15);
}

TEST(SmoothGrad, FixedSeedRepeatsBitForBit) {
  const auto model = tiny_cnn();
  std::mt19937_64 rng(10);
  const auto x = testkit::random_tensor(rng, {1, 1, 16, 16}, 0.0, 1.0);
  auto c = config_for(Method::sg);
  c.sg_samples = 4;
  c.noise_seed = 77;
  const auto a = explain(model, x, 0, c), b = explain(model, x, 0, c);
  for (std::int64_t i = 0; i < a.raw.numel(); ++i) EXPECT_EQ(a.raw.at(i), b.raw.at(i));
  c.noise_seed = 78;
  const auto other = explain(model, x, 0, c);
  EXPECT_NE(relative_error(a.raw, other.raw), 0.0);
}

TEST(Lrp, SingleDenseLayerDecomposesLogit) {
  std::mt19937_64 rng(11);
  const auto w = testkit::random_tensor(rng, {16, 1}, 0.1, 1.0);
  const auto model = linear_model(1, 4, 1, w, Tensor::vector({0.0}));
  const auto x = testkit::random_tensor(rng, {1, 1, 4, 4}, 0.1, 1.0);
  auto c = config_for(Method::lrp);
  c.lrp_epsilon = 1e-12;
  const auto e = explain(model, x, 0, c);
  for (std::int64_t i = 0; i < 16; ++i) EXPECT_NEAR(e.raw.at(i), w.at(i) * x.at(i), 1e-12);
  EXPECT_NEAR(sum(e.raw).item(), model.forward(x).item(), 1e-10);
}

TEST(Lrp, CnnConservesRelevanceLayerByLayer) {
  const auto model = tiny_cnn(12);
  std::mt19937_64 rng(13);
  const auto x = testkit::random_tensor(rng, {3, 1, 16, 16}, 0.0, 1.0);
  std::vector<Tensor> trace;
  lrp_relevance(model, model.parameters(), x, 0, 1e-6, &trace);
  ASSERT_EQ(trace.size(), model.layers().size() + 1);
  for (std::int64_t b = 0; b < 3; ++b) {
    const double logit = trace.front().at(b);
    for (std::size_t k = 1; k < trace.size(); ++k) {
      EXPECT_LE(std::fabs(trace[k].at(b) - trace[k - 1].at(b)), 0.05 * std::fabs(logit)) << "layer step " << k;
    }
    EXPECT_LE(std::fabs(trace.back().at(b) - logit), 0.05 * std::fabs(logit));
  }
}

TEST(Lrp, LeakGrowsWithEpsilon) {
  const auto model = tiny_cnn(14);
  std::mt19937_64 rng(15);
  const auto x = testkit::random_tensor(rng, {1, 1, 16, 16}, 0.0, 1.0);
  double previous = -1.0;
  for (double eps : {1e-6, 1e-3, 1e-1, 1.0}) {
    std::vector<Tensor> trace;
    lrp_relevance(model, model.parameters(), x, 1, eps, &trace);
    const double leak = std::fabs(trace.back().item() - trace.front().item());
    EXPECT_GE(leak, previous) << "epsilon " << eps;
    previous = leak;
  }
}

TEST(Lrp, ZeroInputWithZeroBiasesGivesZeroRelevance) {
  const auto model = tiny_cnn();
  const auto e = explain(model, Tensor::zeros({1, 1, 16, 16}), 0, config_for(Method::lrp));
  for (double v : e.raw.values()) EXPECT_EQ(v, 0.0);
}

TEST(Lrp, AttentionModelIsRejectedByLayerName) {
  auto vit = build_tiny_vit({1, 16, 16}, 2, 4, 1, 2, 8);
  try {
    explain(vit, Tensor::zeros({1, 1, 16, 16}), 0, config_for(Method::lrp));
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("patch_embed"), std::string::npos) << e.what();
  }
}

class RecordedExplanation : public ::testing::TestWithParam<Method> {};

TEST_P(RecordedExplanation, ParameterGradientOfSquaredMapMatchesFiniteDifferences) {
  auto model = build_small_cnn({1, 8, 8}, 2, 0.25);
  model.initialize(16);
  std::mt19937_64 rng(17);
  const auto x = testkit::random_tensor(rng, {2, 1, 8, 8}, 0.0, 1.0);
  auto c = config_for(GetParam());
  c.ig_steps = 3;
  c.sg_samples = 2;
  c.noise_seed = 5;
  auto functional = [](const Tensor& attributions) { return sum(mul(attributions, attributions)); };
  const std::size_t which = 2;  // second conv weight
  Graph g;
  const auto params = model.bind(g);
  const auto e = explain(model, params, x, 1, c, true);
  ASSERT_TRUE(e.differentiable);
  const auto grad = backward(functional(e.attributions), {params[which]}).get(params[which]);
  auto f = [&](const Tensor& t) {
    std::vector<Tensor> p(model.parameters().begin(), model.parameters().end());
    p[which] = t;
    return functional(explain(model, p, x, 1, c, false).attributions).item();
  };
  const auto numeric = finite_diff_grad(f, model.parameters()[which], 1e-5);
  EXPECT_LT(relative_error(grad, numeric), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Methods, RecordedExplanation, ::testing::Values(Method::vg, Method::ig, Method::sg, Method::lrp),
                         [](const auto& info) { return std::string(method_name(info.param)); });

TEST(Methods, NamesRoundTrip) {
  for (auto m : {Method::vg, Method::ig, Method::sg, Method::lrp}) EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_EQ(parse_method("sg"), Method::sg);
  EXPECT_THROW(parse_method("gradcam"), std::invalid_argument);
}
