#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace unirep;
using namespace unirep::testing;

namespace {

using FTensor = Tensor<float>;

const std::vector<Shape> kConvShapes[] = {
    {{2, 3, 8, 8}, {4, 3, 3, 3}},
    {{1, 1, 5, 5}, {2, 1, 3, 3}},
    {{3, 2, 4, 6}, {3, 2, 1, 1}},
    {{1, 4, 6, 4}, {1, 4, 5, 5}},
    {{2, 2, 7, 5}, {3, 2, 3, 3}},
};

}  // namespace

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, IdentityCenterKernelReproducesInput) {
  const auto x = FTensor::full({1, 1, 3, 3}, 1.0f);
  std::vector<float> k(9, 0.0f);
  k[4] = 1.0f;
  const auto y = conv2d(x, FTensor({1, 1, 3, 3}, k), FTensor{}, 1, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, ScalarKernelScales) {
  const FTensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto y = conv2d(x, FTensor({1, 1, 1, 1}, {2}), FTensor::zeros({1}));
  EXPECT_EQ(y.values(), (std::vector<float>{2, 4, 6, 8}));
}

TEST(Conv2d, OutputExtentFollowsStrideAndPadding) {
  CounterRng rng(1);
  const auto x = random_tensor({1, 2, 9, 7}, rng, 1.0, false);
  const auto k = random_tensor({3, 2, 3, 3}, rng, 1.0, false);
  EXPECT_EQ(conv2d(x, k, DTensor{}, 2, 1).shape(), (Shape{1, 3, 5, 4}));
  EXPECT_EQ(conv2d(x, k, DTensor{}, 1, 0).shape(), (Shape{1, 3, 7, 5}));
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  const auto x = FTensor::zeros({1, 3, 4, 4});
  const auto k = FTensor::zeros({2, 2, 3, 3});
  try {
    conv2d(x, k, FTensor{}, 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  CounterRng rng(11);
  for (const auto& shapes : kConvShapes) {
    auto x = random_tensor(shapes[0], rng);
    auto k = random_tensor(shapes[1], rng, 0.5);
    auto b = random_tensor({shapes[1][0]}, rng);
    const std::size_t pad = (shapes[1][2] - 1) / 2;
    const double err = gradient_error(
        [pad](const std::vector<DTensor>& in) { return project(conv2d(in[0], in[1], in[2], 1, pad)); }, {x, k, b});
    EXPECT_LT(err, 1e-3) << shape_str(shapes[0]) << " * " << shape_str(shapes[1]);
  }
}

TEST(Conv2d, StridedGradientMatchesFiniteDifferences) {
  CounterRng rng(12);
  auto x = random_tensor({2, 2, 7, 6}, rng);
  auto k = random_tensor({3, 2, 3, 3}, rng);
  const double err = gradient_error(
      [](const std::vector<DTensor>& in) { return project(conv2d(in[0], in[1], DTensor{}, 2, 1)); }, {x, k});
  EXPECT_LT(err, 1e-3);
}

// ---------------------------------------------------------------- pooling / upsampling

TEST(MaxPool, TakesBlockMaximum) {
  const FTensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto y = max_pool2(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 4.0f);
}

TEST(MaxPool, OddExtentIsAnError) {
  EXPECT_THROW(max_pool2(FTensor::zeros({1, 1, 3, 4})), ShapeError);
  EXPECT_THROW(max_pool2(FTensor::zeros({1, 1, 4, 5})), ShapeError);
}

TEST(MaxPool, TiesRouteGradientToFirstMaximum) {
  FTensor x({1, 1, 2, 2}, {5, 5, 5, 5}, true);
  sum_all(max_pool2(x)).backward();
  EXPECT_EQ(std::vector<float>(x.grad().begin(), x.grad().end()), (std::vector<float>{1, 0, 0, 0}));
}

TEST(Upsample, AveragingKernelKeepsConstantImageConstant) {
  const auto x = FTensor::full({1, 1, 4, 4}, 3.0f);
  const auto up = upsample2(x, FTensor::full({1, 1, 2, 2}, 1.0f));
  EXPECT_EQ(up.shape(), (Shape{1, 1, 8, 8}));
  const auto y = max_pool2(up);
  for (float v : y.values()) EXPECT_EQ(v, 3.0f);
}

TEST(PoolUpsample, GradientsMatchFiniteDifferences) {
  CounterRng rng(21);
  const Shape shapes[] = {{1, 1, 4, 4}, {2, 3, 6, 4}, {1, 2, 8, 8}, {3, 1, 2, 6}, {2, 2, 4, 2}};
  for (const auto& s : shapes) {
    auto x = random_distinct(s, rng);
    EXPECT_LT(gradient_error([](const std::vector<DTensor>& in) { return project(max_pool2(in[0])); }, {x}), 1e-3)
        << "max_pool2 " << shape_str(s);
    auto u = random_tensor(s, rng);
    auto k = random_tensor({s[1], s[1] + 1, 2, 2}, rng);
    auto b = random_tensor({s[1] + 1}, rng);
    EXPECT_LT(gradient_error([](const std::vector<DTensor>& in) { return project(upsample2(in[0], in[1], in[2])); },
                             {u, k, b}),
              1e-3)
        << "upsample2 " << shape_str(s);
  }
}

// ---------------------------------------------------------------- batchnorm

TEST(BatchNorm, FixedModeStandardizesEachChannel) {
  CounterRng rng(31);
  auto x = random_tensor({3, 4, 5, 5}, rng, 3.0, false);
  auto xs = x.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += static_cast<double>(i % 7);
  const auto y = batchnorm(x, DTensor{}, DTensor{}, BnMode::Fixed, static_cast<RunningStats<double>*>(nullptr));
  const auto mean = mean_over(y, {0, 2, 3});
  const auto var = variance_over(y, {0, 2, 3});
  for (double m : mean.values()) EXPECT_NEAR(m, 0.0, 1e-4);
  for (double v : var.values()) EXPECT_NEAR(v, 1.0, 1e-4);
}

TEST(BatchNorm, FixedModeZeroesConstantChannel) {
  const auto x = FTensor::full({2, 1, 3, 3}, 7.5f);
  const auto y = batchnorm(x, FTensor{}, FTensor{}, BnMode::Fixed, static_cast<RunningStats<float>*>(nullptr));
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, TrainModeUpdatesRunningStatsWithMomentum) {
  const FTensor x({2, 1, 1, 2}, {1, 2, 3, 6});  // mean 3, biased var 3.5, unbiased 14/3
  RunningStats<float> st(1);
  batchnorm(x, FTensor::full({1}, 1.0f), FTensor::zeros({1}), BnMode::Train, &st);
  EXPECT_NEAR(st.mean[0], 0.1 * 3.0, 1e-6);
  EXPECT_NEAR(st.var[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-6);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  RunningStats<double> st(1);
  st.mean[0] = 2.0;
  st.var[0] = 4.0 - 1e-5;
  const DTensor x({1, 1, 1, 2}, {2.0, 6.0});
  const auto y = batchnorm(x, DTensor::full({1}, 3.0), DTensor::full({1}, 1.0), BnMode::Eval, &st);
  EXPECT_NEAR(y.values()[0], 1.0, 1e-9);
  EXPECT_NEAR(y.values()[1], 7.0, 1e-9);
}

TEST(BatchNorm, GradientsMatchFiniteDifferencesInEveryMode) {
  CounterRng rng(41);
  const Shape shapes[] = {{2, 3, 4, 4}, {4, 1, 3, 3}, {1, 2, 5, 3}, {3, 4, 2, 2}, {2, 2, 1, 6}};
  for (const auto& s : shapes) {
    auto x = random_tensor(s, rng, 2.0);
    auto g = random_tensor({s[1]}, rng);
    auto b = random_tensor({s[1]}, rng);
    const double train = gradient_error(
        [](const std::vector<DTensor>& in) {
          RunningStats<double> st(in[1].numel());
          return project(batchnorm(in[0], in[1], in[2], BnMode::Train, &st));
        },
        {x, g, b});
    EXPECT_LT(train, 1e-3) << "train " << shape_str(s);
    const double eval = gradient_error(
        [](const std::vector<DTensor>& in) {
          RunningStats<double> st(in[1].numel());
          for (std::size_t c = 0; c < st.mean.size(); ++c) {
            st.mean[c] = 0.1 * static_cast<double>(c);
            st.var[c] = 1.5 + static_cast<double>(c);
          }
          return project(batchnorm(in[0], in[1], in[2], BnMode::Eval, &st));
        },
        {x, g, b});
    EXPECT_LT(eval, 1e-3) << "eval " << shape_str(s);
    const double fixed = gradient_error(
        [](const std::vector<DTensor>& in) {
          return project(batchnorm(in[0], DTensor{}, DTensor{}, BnMode::Fixed,
                                   static_cast<RunningStats<double>*>(nullptr)));
        },
        {x});
    EXPECT_LT(fixed, 1e-3) << "fixed " << shape_str(s);
  }
}

// ---------------------------------------------------------------- leaky relu

TEST(LeakyRelu, Definition) {
  const auto y = leaky_relu(FTensor({3}, {-1, 0, 2}), 0.2f);
  EXPECT_FLOAT_EQ(y.values()[0], -0.2f);
  EXPECT_FLOAT_EQ(y.values()[1], 0.0f);
  EXPECT_FLOAT_EQ(y.values()[2], 2.0f);
  const FTensor pos({4}, {0, 1, 2.5, 9});
  EXPECT_EQ(leaky_relu(pos, 0.2f).values(), pos.values());
}

TEST(LeakyRelu, NegativeSlopeGradientIsExact) {
  DTensor x({1}, {-3.0}, true);
  leaky_relu(x, 0.2).backward();
  EXPECT_EQ(x.grad()[0], 0.2);
}

TEST(LeakyRelu, GradientMatchesFiniteDifferences) {
  CounterRng rng(51);
  for (const Shape& s : {Shape{7}, Shape{2, 3}, Shape{1, 2, 3, 3}, Shape{2, 1, 4, 4}, Shape{3, 3, 2, 2}}) {
    auto x = random_away_from_zero(s, rng);
    EXPECT_LT(gradient_error([](const std::vector<DTensor>& in) { return project(leaky_relu(in[0], 0.2)); }, {x}),
              1e-3);
  }
}

// ---------------------------------------------------------------- cross-entropy

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  const auto logits = FTensor::zeros({2, 4, 3, 3});
  std::vector<std::uint8_t> labels(18);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i % 4);
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).item(), std::log(4.0), 1e-6);
}

TEST(CrossEntropy, SaturatedTrueClassGivesZero) {
  std::vector<float> z(1 * 4 * 2 * 2, 0.0f);
  const std::vector<std::uint8_t> labels{0, 1, 2, 3};
  for (std::size_t p = 0; p < 4; ++p) z[labels[p] * 4 + p] = 1e6f;
  EXPECT_NEAR(softmax_cross_entropy(FTensor({1, 4, 2, 2}, z), labels).item(), 0.0, 1e-6);
}

TEST(CrossEntropy, OutOfRangeLabelIsAnError) {
  const std::vector<std::uint8_t> labels{0, 4, 1, 1};
  EXPECT_THROW(softmax_cross_entropy(FTensor::zeros({1, 4, 2, 2}), labels), ShapeError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverCount) {
  CounterRng rng(61);
  auto z = random_tensor({2, 3, 2, 2}, rng);
  std::vector<std::uint8_t> labels(8);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(3));
  softmax_cross_entropy(z, labels).backward();
  const auto p = softmax_channels(z);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t v = 0; v < 4; ++v) {
        const std::size_t i = (n * 3 + k) * 4 + v;
        const double expected = (p[i] - (labels[n * 4 + v] == k ? 1.0 : 0.0)) / 8.0;
        EXPECT_NEAR(z.grad()[i], expected, 1e-12);
      }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  CounterRng rng(62);
  for (const Shape& s : {Shape{1, 4, 2, 2}, Shape{2, 3, 3, 3}, Shape{3, 2, 1, 4}, Shape{1, 5, 4, 1}, Shape{2, 4, 2, 3}}) {
    auto z = random_tensor(s, rng, 2.0);
    std::vector<std::uint8_t> labels(s[0] * s[2] * s[3]);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(s[1]));
    EXPECT_LT(gradient_error([&](const std::vector<DTensor>& in) { return softmax_cross_entropy(in[0], labels); }, {z}),
              1e-3);
  }
}

// ---------------------------------------------------------------- Adam

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p("w", DTensor::zeros({1}));
  p.value.mutable_grad()[0] = 1.0;
  std::vector<Parameter<double>*> ps{&p};
  adam_step(ps, AdamOptions{0.1});
  EXPECT_NEAR(p.value.item(), -0.1, 1e-6);
  EXPECT_EQ(p.step_count, 1u);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Parameter<float> p("w", FTensor::full({3}, 2.0f));
  p.value.zero_grad();
  p.value.mutable_grad();
  std::vector<Parameter<float>*> ps{&p};
  adam_step(ps, AdamOptions{0.1});
  EXPECT_EQ(p.value.values(), (std::vector<float>{2, 2, 2}));
}

TEST(Adam, FrozenParameterIsUntouched) {
  Parameter<float> p("w", FTensor::full({2}, 1.0f));
  p.frozen = true;
  auto g = p.value.mutable_grad();
  g[0] = 5.0f;
  g[1] = -3.0f;
  std::vector<Parameter<float>*> ps{&p};
  adam_step(ps, AdamOptions{0.5});
  EXPECT_EQ(p.value.values(), (std::vector<float>{1, 1}));
  EXPECT_EQ(p.step_count, 0u);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  CounterRng rng(71);
  Parameter<float> p("w", Tensor<float>({5}, {0.3f, -1.f, 2.f, 0.f, 7.f}));
  const auto before = p.value.values();
  for (int s = 0; s < 3; ++s) {
    auto g = p.value.mutable_grad();
    for (auto& v : g) v = static_cast<float>(rng.normal());
    std::vector<Parameter<float>*> ps{&p};
    adam_step(ps, AdamOptions{0.0});
  }
  EXPECT_EQ(p.value.values(), before);
}

// ---------------------------------------------------------------- elementwise suite

TEST(Elementwise, VarianceOfConstantIsZero) {
  const auto v = variance_over(FTensor::full({2, 3, 4}, 1.7f), {0, 2});
  for (float x : v.values()) EXPECT_EQ(x, 0.0f);
}

TEST(Elementwise, ExpThenLogIsIdentity) {
  std::vector<float> v;
  for (int i = 0; i <= 60; ++i) v.push_back(-3.0f + 0.1f * static_cast<float>(i));
  const FTensor x({v.size()}, v);
  const auto y = log(exp(x));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(y.values()[i], v[i], 1e-6);
}

TEST(Elementwise, LogRejectsNonPositiveInput) {
  EXPECT_THROW(log(FTensor({2}, {1.0f, 0.0f})), NumericalError);
}

TEST(Elementwise, ConcatShapeArithmetic) {
  const auto y = concat<float>({FTensor::zeros({1, 2, 4, 4}), FTensor::full({1, 3, 4, 4}, 1.0f)});
  EXPECT_EQ(y.shape(), (Shape{1, 5, 4, 4}));
  EXPECT_EQ(y.values()[2 * 16 - 1], 0.0f);
  EXPECT_EQ(y.values()[2 * 16], 1.0f);
}

TEST(Elementwise, ZeroChannelsWithFullMaskIsExactIdentity) {
  CounterRng rng(81);
  auto x = random_tensor({2, 3, 2, 2}, rng, 1.0, false);
  const std::vector<std::uint8_t> keep{1, 1, 1};
  EXPECT_EQ(zero_channels(x, keep).values(), x.values());
}

TEST(Elementwise, ZeroChannelsPerSample) {
  const auto x = FTensor::full({2, 2, 1, 1}, 3.0f);
  const std::vector<std::uint8_t> keep{1, 0, 0, 1};
  EXPECT_EQ(zero_channels(x, keep).values(), (std::vector<float>{3, 0, 0, 3}));
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  CounterRng rng(91);
  const Shape shapes[] = {{2, 3, 2, 2}, {1, 2, 3, 3}, {3, 1, 2, 4}, {2, 2, 2, 2}, {1, 4, 1, 3}};
  for (const auto& s : shapes) {
    auto a = random_tensor(s, rng);
    auto b = random_tensor(s, rng);
    auto pos = random_tensor(s, rng);
    for (auto& v : pos.mutable_data()) v = 0.5 + std::abs(v);
    const std::vector<std::pair<const char*, std::function<DTensor(const std::vector<DTensor>&)>>> cases{
        {"add", [](const auto& in) { return project(add(in[0], in[1])); }},
        {"sub", [](const auto& in) { return project(sub(in[0], in[1])); }},
        {"mul", [](const auto& in) { return project(mul(in[0], in[1])); }},
        {"scale", [](const auto& in) { return project(add_scalar(scale(in[0], 1.7), 0.3)); }},
        {"square", [](const auto& in) { return project(square(in[0])); }},
        {"exp", [](const auto& in) { return project(exp(in[0])); }},
        {"mean_over", [](const auto& in) { return project(mean_over(in[0], {0, 2})); }},
        {"variance_over", [](const auto& in) { return project(variance_over(in[0], {0, 2, 3})); }},
        {"concat", [](const auto& in) { return project(concat<double>({in[0], in[1]}, 1)); }},
        {"mean_all", [](const auto& in) { return mean_all(mul(in[0], in[1])); }},
        {"mse", [](const auto& in) { return mse_loss(in[0], in[1]); }},
        {"gather", [](const auto& in) { return project(gather_batch(in[0], {0, 0, in[0].dim(0) - 1})); }},
    };
    for (const auto& [name, fn] : cases) EXPECT_LT(gradient_error(fn, {a, b}), 1e-3) << name << " " << shape_str(s);
    EXPECT_LT(gradient_error([](const auto& in) { return project(log(in[0])); }, {pos}), 1e-3) << "log";
    const std::vector<std::uint8_t> keep(s[0] * s[1], 1);
    std::vector<std::uint8_t> some = keep;
    some[0] = 0;
    EXPECT_LT(gradient_error([&](const auto& in) { return project(zero_channels(in[0], some)); }, {a}), 1e-3)
        << "zero_channels";
  }
}

TEST(Determinism, ForwardIsBitIdenticalAcrossRuns) {
  auto run = [] {
    CounterRng rng(5);
    auto x = random_tensor({2, 3, 8, 8}, rng, 1.0, false);
    auto k = random_tensor({4, 3, 3, 3}, rng, 1.0, false);
    RunningStats<double> st(4);
    auto h = batchnorm(conv2d(x, k, DTensor{}, 1, 1), DTensor::full({4}, 1.0), DTensor::zeros({4}), BnMode::Train, &st);
    return upsample2(max_pool2(leaky_relu(h, 0.2)), random_tensor({4, 2, 2, 2}, rng, 1.0, false)).values();
  };
  EXPECT_EQ(run(), run());
}
