#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "op_cases.hpp"
#include "xalign/gradcheck.hpp"
#include "xalign/model.hpp"
#include "xalign/ops.hpp"

using namespace xalign;

namespace {

Model small_vit(std::int64_t labels = 3) { return build_tiny_vit({1, 16, 16}, labels, 4, 1, 2, 8); }

Tensor stack_rows(const std::vector<Tensor>& rows) { return concat(rows, 0); }

}  // namespace

TEST(SmallCnn, EmitsOneLogitPerLabel) {
  auto model = build_small_cnn({1, 64, 64}, 3, 1.0);
  model.initialize(1);
  std::mt19937_64 rng(2);
  const auto out = model.forward(testkit::random_tensor(rng, {2, 1, 64, 64}, 0.0, 1.0));
  EXPECT_EQ(out.shape(), (Shape{2, 3}));
  EXPECT_LE(model.parameter_count(), 200000);
}

TEST(SmallCnn, NarrowerMultiplierHasFewerParameters) {
  const auto wide = build_small_cnn({3, 64, 64}, 9, 1.0);
  const auto narrow = build_small_cnn({3, 64, 64}, 9, 0.5);
  EXPECT_LT(narrow.parameter_count(), wide.parameter_count());
}

TEST(SmallCnn, ZeroImageWithZeroHeadYieldsHeadBias) {
  auto model = build_small_cnn({1, 32, 32}, 3, 1.0);
  model.initialize(3);
  std::vector<Tensor> params(model.parameters().begin(), model.parameters().end());
  const auto n = params.size();
  params[n - 2] = Tensor::zeros(params[n - 2].shape());
  params[n - 1] = Tensor::vector({0.25, -1.0, 2.0});
  model.set_parameters(params);
  const auto out = model.forward(Tensor::zeros({2, 1, 32, 32}));
  for (std::int64_t b = 0; b < 2; ++b) {
    EXPECT_EQ(out.at(b * 3 + 0), 0.25);
    EXPECT_EQ(out.at(b * 3 + 1), -1.0);
    EXPECT_EQ(out.at(b * 3 + 2), 2.0);
  }
}

TEST(SmallCnn, RejectsIndivisibleInput) { EXPECT_THROW(build_small_cnn({1, 60, 60}, 3, 1.0), ShapeError); }

TEST(TinyVit, PatchCountAndValidation) {
  const auto model = build_tiny_vit({1, 64, 64}, 3, 8, 1, 2, 16);
  EXPECT_EQ(model.layers().front().tokens, 64);
  EXPECT_THROW(build_tiny_vit({1, 64, 64}, 3, 8, 0, 2, 16), std::invalid_argument);
  EXPECT_THROW(build_tiny_vit({1, 64, 64}, 3, 7, 1, 2, 16), ShapeError);
}

TEST(TinyVit, PatchSwapPermutesTokenEmbeddings) {
  auto model = small_vit();
  model.initialize(4);
  std::mt19937_64 rng(5);
  const auto x = testkit::random_tensor(rng, {1, 1, 16, 16});
  // Swap patch (0,0) with patch (2,1).
  auto swapped = x.detach();
  auto v = swapped.mutable_values();
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) std::swap(v[static_cast<std::size_t>(i * 16 + j)], v[static_cast<std::size_t>((8 + i) * 16 + 4 + j)]);
  }
  auto embed = [&](const Tensor& img) {
    const auto& p = model.parameters();
    const auto grid = add(conv2d(img, p[0], 4, 0), reshape(p[1], {1, 8, 1, 1}));
    return transpose(reshape(grid, {1, 8, 16}), 1, 2);
  };
  const auto a = embed(x), b = embed(swapped);
  const std::int64_t t0 = 0, t1 = 2 * 4 + 1;
  for (std::int64_t d = 0; d < 8; ++d) {
    EXPECT_DOUBLE_EQ(a.at(t0 * 8 + d), b.at(t1 * 8 + d));
    EXPECT_DOUBLE_EQ(a.at(t1 * 8 + d), b.at(t0 * 8 + d));
    EXPECT_DOUBLE_EQ(a.at(5 * 8 + d), b.at(5 * 8 + d));
  }
}

class BothArchitectures : public ::testing::TestWithParam<std::string> {
 protected:
  Model make() const {
    auto m = GetParam() == "cnn" ? build_small_cnn({1, 16, 16}, 3, 0.5) : small_vit();
    m.initialize(9);
    return m;
  }
};

TEST_P(BothArchitectures, BatchEqualsStackedSingletons) {
  const auto model = make();
  std::mt19937_64 rng(6);
  std::vector<Tensor> rows;
  for (int i = 0; i < 3; ++i) rows.push_back(testkit::random_tensor(rng, {1, 1, 16, 16}));
  const auto batched = model.forward(stack_rows(rows));
  std::vector<Tensor> singles;
  for (const auto& r : rows) singles.push_back(model.forward(r));
  const auto stacked = stack_rows(singles);
  for (std::int64_t i = 0; i < batched.numel(); ++i) EXPECT_NEAR(batched.at(i), stacked.at(i), 1e-12);
}

TEST_P(BothArchitectures, IdenticalRowsGiveIdenticalLogits) {
  const auto model = make();
  std::mt19937_64 rng(7);
  const auto x = testkit::random_tensor(rng, {1, 1, 16, 16});
  const auto out = model.forward(stack_rows({x, x, x}));
  // GEMM tail rows may take a different micro-kernel, so equality is to rounding.
  for (std::int64_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(out.at(j), out.at(3 + j), 1e-12);
    EXPECT_NEAR(out.at(j), out.at(6 + j), 1e-12);
  }
}

TEST_P(BothArchitectures, CheckpointRoundTripIsBitExact) {
  const auto model = make();
  const auto path = std::filesystem::temp_directory_path() / ("xalign_ckpt_" + GetParam() + ".bin");
  save_checkpoint(path.string(), model, {{"seed", "9"}, {"epochs", "0"}});
  const auto loaded = load_checkpoint(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(loaded.metadata.at("seed"), "9");
  EXPECT_EQ(architecture_descriptor(loaded.model), architecture_descriptor(model));
  std::mt19937_64 rng(8);
  const auto x = testkit::random_tensor(rng, {2, 1, 16, 16});
  const auto a = model.forward(x), b = loaded.model.forward(x);
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST_P(BothArchitectures, InputGradientMatchesFiniteDifferences) {
  const auto model = make();
  std::mt19937_64 rng(10);
  const auto x0 = testkit::random_tensor(rng, {1, 1, 16, 16});
  Graph g;
  const auto x = g.leaf(x0);
  const auto grad = backward(slice(model.forward(x), 1, 1, 2), {x}).get(x);
  const auto numeric = finite_diff_grad(
      [&](const Tensor& t) { return model.forward(t).at(1); }, x0, 1e-5);
  for (double v : grad.values()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_LT(relative_error(grad, numeric), 1e-4);
}

TEST_P(BothArchitectures, BceParameterGradientMatchesFiniteDifferences) {
  const auto model = make();
  std::mt19937_64 rng(11);
  const auto x = testkit::random_tensor(rng, {2, 1, 16, 16});
  const Tensor y({2, 3}, {1, 0, 1, 0, 1, 1});
  Graph g;
  const auto params = model.bind(g);
  const auto grads = backward(bce_with_logits(model.forward(params, x), y), params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto f = [&](const Tensor& t) {
      std::vector<Tensor> p(model.parameters().begin(), model.parameters().end());
      p[i] = t;
      return bce_with_logits(model.forward(p, x), y).item();
    };
    const auto numeric = finite_diff_grad(f, model.parameters()[i], 1e-5);
    EXPECT_LT(relative_error(grads.get(params[i]), numeric), 1e-4) << model.parameter_names()[i];
  }
}

TEST_P(BothArchitectures, EveryParameterReceivesGradient) {
  const auto model = make();
  std::mt19937_64 rng(12);
  const auto x = testkit::random_tensor(rng, {4, 1, 16, 16}, 0.0, 1.0);
  const Tensor y({4, 3}, {1, 0, 1, 0, 1, 1, 0, 0, 1, 1, 1, 0});
  Graph g;
  const auto params = model.bind(g);
  const auto grads = backward(bce_with_logits(model.forward(params, x), y), params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double norm = 0.0;
    for (double v : grads.get(params[i]).values()) norm += v * v;
    EXPECT_GT(norm, 0.0) << model.parameter_names()[i];
  }
}

INSTANTIATE_TEST_SUITE_P(Models, BothArchitectures, ::testing::Values("cnn", "vit"));

TEST(Checkpoint, RejectsForeignFile) {
  const auto path = std::filesystem::temp_directory_path() / "xalign_not_a_ckpt.bin";
  {
    std::ofstream out(path);
    out << "hello";
  }
  EXPECT_THROW(load_checkpoint(path.string()), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(Model, ForwardRejectsWrongInputShape) {
  auto model = build_small_cnn({1, 16, 16}, 2, 0.5);
  EXPECT_THROW(model.forward(Tensor::zeros({1, 1, 8, 8})), ShapeError);
}

TEST(Model, SeedDeterminesInitialization) {
  auto a = build_small_cnn({1, 16, 16}, 2, 0.5);
  auto b = build_small_cnn({1, 16, 16}, 2, 0.5);
  a.initialize(42);
  b.initialize(42);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto va = a.parameters()[i].values(), vb = b.parameters()[i].values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin()));
  }
}
