#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "xalign/train.hpp"

using namespace xalign;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Reference AdamW in the textbook form with separate bias-corrected step size.
struct ScalarAdamW {
  double lr, b1, b2, eps, wd, m = 0, v = 0;
  int t = 0;
  double step(double theta, double g) {
    ++t;
    theta = theta * (1 - lr * wd);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double bc1 = 1 - std::pow(b1, t), bc2 = 1 - std::pow(b2, t);
    return theta - (lr / bc1) * m / (std::sqrt(v) / std::sqrt(bc2) + eps);
  }
};

// 8x8 two-label images: label 0 brightens the left half, label 1 the top half.
Dataset separable_toy(int n, std::uint64_t seed) {
  Dataset d;
  d.shape = {1, 8, 8};
  d.num_labels = 2;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.2);
  for (int i = 0; i < n; ++i) {
    AnnotatedSample s;
    s.id = i;
    s.labels = {static_cast<std::uint8_t>(i % 2), static_cast<std::uint8_t>((i / 2) % 2)};
    Tensor img({1, 8, 8}, 0.0);
    auto v = img.mutable_values();
    for (int r = 0; r < 8; ++r) {
      for (int c = 0; c < 8; ++c) {
        double x = noise(rng);
        if (s.labels[0] && c < 4) x += 0.6;
        if (s.labels[1] && r < 4) x += 0.6;
        v[static_cast<std::size_t>(r * 8 + c)] = x;
      }
    }
    s.image = img;
    d.samples.push_back(s);
    d.split_of[i] = Split::train;
  }
  return d;
}

std::vector<std::size_t> all_indices(const Dataset& d) {
  std::vector<std::size_t> idx(d.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

bool same_parameters(const Model& a, const Model& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (vec(a.parameters()[i]) != vec(b.parameters()[i])) return false;
  }
  return true;
}

GenSpec tiny_spec(std::uint64_t seed) {
  GenSpec spec;
  spec.size = 16;
  spec.seed = seed;
  spec.splits = {64, 32, 32, 32};
  return spec;
}

}  // namespace

TEST(AdamW, ZeroGradientAndDecayLeavesParametersUnchanged) {
  std::vector<Tensor> p{Tensor({3}, {1.0, -2.0, 0.5})};
  auto state = make_adamw(p, {.lr = 1e-2, .weight_decay = 0.0});
  const std::vector<Tensor> g{Tensor({3}, 0.0)};
  const std::vector<std::string> names{"w"};
  for (int i = 0; i < 5; ++i) adamw_step(p, g, state, names);
  EXPECT_EQ(vec(p[0]), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamW, FirstStepClosedForm) {
  // m_hat = g and v_hat = g^2 after one step, so the move is lr * g / (|g| + eps).
  const double lr = 1e-3, wd = 0.01, eps = 1e-8, theta = 0.7, g = -0.3;
  std::vector<Tensor> p{Tensor::scalar(theta)};
  auto state = make_adamw(p, {.lr = lr, .eps = eps, .weight_decay = wd});
  const std::vector<std::string> names{"w"};
  adamw_step(p, std::vector<Tensor>{Tensor::scalar(g)}, state, names);
  EXPECT_NEAR(p[0].item(), theta * (1 - lr * wd) - lr * g / (0.3 + eps), 1e-16);
}

TEST(AdamW, DecoupledDecayShrinksByLrTimesLambda) {
  std::vector<Tensor> p{Tensor({2}, {2.0, -4.0})};
  auto state = make_adamw(p, {.lr = 0.1, .weight_decay = 0.5});
  adamw_step(p, std::vector<Tensor>{Tensor({2}, 0.0)}, state, std::vector<std::string>{"w"});
  EXPECT_DOUBLE_EQ(p[0].at(0), 2.0 - 0.1 * 0.5 * 2.0);
  EXPECT_DOUBLE_EQ(p[0].at(1), -4.0 - 0.1 * 0.5 * -4.0);
}

TEST(AdamW, MatchesReferenceRecurrenceOver100Steps) {
  std::mt19937_64 rng(71);
  std::normal_distribution<double> z;
  for (int trial = 0; trial < 20; ++trial) {
    const AdamWConfig c{.lr = 1e-2, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.05};
    ScalarAdamW ref{c.lr, c.beta1, c.beta2, c.eps, c.weight_decay};
    double theta = z(rng);
    std::vector<Tensor> p{Tensor::scalar(theta)};
    auto state = make_adamw(p, c);
    for (int s = 0; s < 100; ++s) {
      const double g = z(rng);
      theta = ref.step(theta, g);
      adamw_step(p, std::vector<Tensor>{Tensor::scalar(g)}, state, std::vector<std::string>{"w"});
      ASSERT_NEAR(p[0].item(), theta, 1e-12) << "step " << s;
    }
    EXPECT_EQ(state.step, 100);
  }
}

TEST(AdamW, NonFiniteGradientNamesParameterAndChangesNothing) {
  std::vector<Tensor> p{Tensor({1}, 1.0), Tensor({2}, 2.0)};
  auto state = make_adamw(p, {});
  const std::vector<std::string> names{"conv0.weight", "dense.bias"};
  try {
    adamw_step(p, std::vector<Tensor>{Tensor({1}, 0.1), Tensor({2}, {0.0, NAN})}, state, names);
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_NE(std::string(e.what()).find("dense.bias"), std::string::npos) << e.what();
  }
  EXPECT_EQ(p[0].item(), 1.0);
  EXPECT_EQ(state.step, 0);
}

TEST(Rotation, QuarterTurnsArePixelPermutations) {
  std::mt19937_64 rng(72);
  std::uniform_real_distribution<double> u;
  const int n = 7;
  Tensor img({2, n, n});
  for (auto& v : img.mutable_values()) v = u(rng);
  const auto r90 = rotate_image(img, 90.0);
  for (int ch = 0; ch < 2; ++ch) {
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) EXPECT_EQ(r90.at((ch * n + r) * n + c), img.at((ch * n + c) * n + (n - 1 - r)));
    }
  }
  EXPECT_EQ(vec(rotate_image(r90, -90.0)), vec(img));
  EXPECT_EQ(vec(rotate_image(img, 360.0)), vec(img));
  EXPECT_EQ(vec(rotate_image(img, 0.0)), vec(img));
}

TEST(Rotation, MaskStaysRegisteredWithImage) {
  std::mt19937_64 rng(73);
  std::uniform_real_distribution<double> u;
  const int n = 10;
  Tensor img({1, n, n}), mask({n, n});
  for (int i = 0; i < n * n; ++i) {
    img.mutable_values()[static_cast<std::size_t>(i)] = u(rng);
    mask.mutable_values()[static_cast<std::size_t>(i)] = img.at(i) > 0.5;
  }
  for (double angle : {90.0, 180.0, 270.0, -90.0}) {
    const auto ri = rotate_image(img, angle), rm = rotate_mask(mask, angle);
    for (int i = 0; i < n * n; ++i) EXPECT_EQ(rm.at(i), ri.at(i) > 0.5 ? 1.0 : 0.0) << angle << " at " << i;
  }
}

TEST(Rotation, SmallAnglesKeepMaskBinaryAndImageInRange) {
  Tensor img({1, 16, 16}, 1.0), mask({16, 16}, 0.0);
  for (int r = 4; r < 12; ++r) {
    for (int c = 4; c < 12; ++c) mask.mutable_values()[static_cast<std::size_t>(r * 16 + c)] = 1.0;
  }
  for (double angle : {-15.0, -3.3, 7.0, 15.0}) {
    for (double v : rotate_mask(mask, angle).values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    for (double v : rotate_image(img, angle).values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0 + 1e-12);
    }
    // The centre never leaves the image.
    EXPECT_NEAR(rotate_image(img, angle).at(8 * 16 + 8), 1.0, 1e-12);
  }
}

TEST(TrainConfig, RejectsBadValues) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.alpha = -0.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainBase, SeparableToyReachesPerfectAuroc) {
  const auto d = separable_toy(64, 74);
  auto model = build_small_cnn({1, 8, 8}, 2, 0.5);
  model.initialize(75);
  TrainConfig c;
  c.epochs = 10;
  c.batch_size = 4;
  c.rotation = 0.0;
  c.seed = 76;
  const auto idx = all_indices(d);
  const auto result = train_base(model, d, idx, idx, c);
  ASSERT_EQ(result.log.size(), 10u);
  EXPECT_DOUBLE_EQ(*result.log.back().val_auroc, 1.0);
  EXPECT_LT(result.log.back().classification_loss, result.log.front().classification_loss);
}

TEST(TrainBase, ZeroEpochsRejected) {
  const auto d = separable_toy(8, 1);
  auto model = build_small_cnn({1, 8, 8}, 2, 0.5);
  TrainConfig c;
  c.epochs = 0;
  const auto idx = all_indices(d);
  EXPECT_THROW(train_base(model, d, idx, idx, c), std::invalid_argument);
}

TEST(TrainBase, SameSeedGivesIdenticalModelAndLog) {
  const auto d = separable_toy(40, 77);
  auto model = build_small_cnn({1, 8, 8}, 2, 0.5);
  model.initialize(78);
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.seed = 79;
  const auto idx = all_indices(d);
  const auto a = train_base(model, d, idx, idx, c), b = train_base(model, d, idx, idx, c);
  EXPECT_TRUE(same_parameters(a.model, b.model));
  EXPECT_EQ(to_json_lines(a.log, false), to_json_lines(b.log, false));
  c.seed = 80;
  EXPECT_FALSE(same_parameters(a.model, train_base(model, d, idx, idx, c).model));
}

TEST(TrainBase, WarmupScalesEarlySteps) {
  const auto d = separable_toy(8, 81);
  auto model = build_small_cnn({1, 8, 8}, 2, 0.5);
  model.initialize(82);
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 8;
  c.rotation = 0.0;
  const auto idx = all_indices(d);
  const auto plain = train_base(model, d, idx, {}, c);
  c.warmup_steps = 4;
  const auto warm = train_base(model, d, idx, {}, c);
  // One step at lr/4 moves the head bias a quarter as far (Adam's first step
  // has unit magnitude per coordinate before decay).
  const auto bias = model.parameters().size() - 1;
  const double before = model.parameters()[bias].at(0);
  EXPECT_NEAR(warm.model.parameters()[bias].at(0) - before * (1 - c.optimizer.lr / 4 * c.optimizer.weight_decay),
              (plain.model.parameters()[bias].at(0) - before * (1 - c.optimizer.lr * c.optimizer.weight_decay)) / 4,
              1e-12);
}

TEST(Finetune, RejectsUnsupportedPairsUpfront) {
  const auto d = generate(tiny_spec(83));
  auto vit = build_tiny_vit({1, 16, 16}, 3, 4, 1, 2, 8);
  vit.initialize(1);
  ExplainerConfig lrp;
  lrp.method = Method::lrp;
  TrainConfig c;
  c.scenario = Scenario::align;
  c.labels = {0};
  const auto idx = d.indices(Split::finetune);
  EXPECT_THROW(finetune_alignment(vit, lrp, d, idx, {}, c), std::invalid_argument);
  auto cnn = build_small_cnn({1, 16, 16}, 3, 0.5);
  c.scenario = Scenario::base;
  EXPECT_THROW(finetune_alignment(cnn, lrp, d, idx, {}, c), std::invalid_argument);
  c.scenario = Scenario::align;
  c.labels = {5};
  EXPECT_THROW(finetune_alignment(cnn, lrp, d, idx, {}, c), std::out_of_range);
}

TEST(Finetune, AlphaZeroMatchesClassificationOnlyTraining) {
  const auto d = generate(tiny_spec(84));
  auto model = build_small_cnn({1, 16, 16}, 3, 0.5);
  model.initialize(85);
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 16;
  c.seed = 86;
  c.alpha = 0.0;
  c.scenario = Scenario::align;
  c.labels = {1};
  const auto idx = d.indices(Split::finetune);
  const auto tuned = finetune_alignment(model, ExplainerConfig{}, d, idx, {}, c);
  const auto plain = train_base(model, d, idx, {}, c);
  EXPECT_TRUE(same_parameters(tuned.model, plain.model));
}

TEST(Finetune, AlignmentLossFallsAndRunIsDeterministic) {
  const auto d = generate(tiny_spec(87));
  auto model = build_small_cnn({1, 16, 16}, 3, 0.5);
  model.initialize(88);
  TrainConfig c;
  c.epochs = 6;
  c.batch_size = 16;
  c.seed = 89;
  c.optimizer.lr = 3e-3;
  c.scenario = Scenario::align;
  c.labels = {0};
  c.validate_every = 0;
  const auto idx = d.indices(Split::finetune);
  const auto val = d.indices(Split::val);
  ExplainerConfig sg;
  sg.method = Method::sg;
  sg.sg_samples = 2;
  const auto a = finetune_alignment(model, sg, d, idx, val, c);
  EXPECT_LT(*a.log.back().alignment_loss, *a.log.front().alignment_loss);
  EXPECT_FALSE(a.log.front().val_mass.has_value());
  EXPECT_TRUE(a.log.back().val_mass.has_value());
  const auto b = finetune_alignment(model, sg, d, idx, val, c);
  EXPECT_TRUE(same_parameters(a.model, b.model));
  EXPECT_EQ(to_json_lines(a.log, false), to_json_lines(b.log, false));
}

TEST(Finetune, SeveralLabelsSumTheirAlignmentTerms) {
  const auto d = generate(tiny_spec(90));
  auto model = build_small_cnn({1, 16, 16}, 3, 0.5);
  model.initialize(91);
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 64;
  c.rotation = 0.0;
  c.scenario = Scenario::misalign;
  c.optimizer.lr = 1e-12;  // parameters stay put, so one step measures the initial losses
  const auto idx = d.indices(Split::finetune);
  double separate = 0.0;
  for (std::int64_t l : {0, 2}) {
    c.labels = {l};
    separate += *finetune_alignment(model, ExplainerConfig{}, d, idx, {}, c).log[0].alignment_loss;
  }
  c.labels = {0, 2};
  EXPECT_NEAR(*finetune_alignment(model, ExplainerConfig{}, d, idx, {}, c).log[0].alignment_loss, separate, 1e-12);
}

TEST(Evaluate, AlignmentSummaryCountsMaskedSamples) {
  const auto d = generate(tiny_spec(92));
  auto model = build_small_cnn({1, 16, 16}, 3, 0.5);
  model.initialize(93);
  const auto idx = d.indices(Split::eval);
  std::int64_t positives = 0;
  for (auto i : idx) positives += d.samples[i].masks.count(1);
  const auto s = evaluate_alignment(model, ExplainerConfig{}, d, idx, 1);
  EXPECT_EQ(s.evaluated, positives);
  EXPECT_EQ(evaluate_alignment(model, ExplainerConfig{}, d, idx, 1, 3).evaluated, std::min<std::int64_t>(3, positives));
  ASSERT_TRUE(s.rank.has_value());
  EXPECT_GE(*s.rank, 0.0);
  EXPECT_LE(*s.rank, 1.0);
}
