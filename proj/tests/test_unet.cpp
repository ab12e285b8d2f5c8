#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "helpers.hpp"
#include "vdf/unet.hpp"

using namespace vdf;
using T = Tensor5<float>;

namespace {

// Eager forward that remembers the output shape of every named conv.
struct ShapeRecorder : detail::EagerExec<float> {
  std::map<std::string, Shape5> shapes;
  Value conv(const Value& x, const std::string& name) {
    Value y = detail::EagerExec<float>::conv(x, name);
    shapes[name] = y.shape();
    return y;
  }
};

ModelConfig tiny() { return ModelConfig::with_filters(Variant::DeepDefacer, {4, 8, 16, 32}); }

}  // namespace

TEST(UNet, EncoderAndDecoderShapesMirror) {
  const ModelConfig cfg = tiny();
  const auto store = build_model<float>(cfg, 1);
  std::mt19937_64 rng(1);
  const T x = test::random_tensor<float>({1, 1, 32, 48, 16}, rng, 0.0, 1.0);
  ShapeRecorder rec{{store, cfg.bn_epsilon}, {}};
  const T out = detail::run_unet(rec, cfg, x, true);
  EXPECT_EQ(out.shape(), Shape5(1, 1, 32, 48, 16));
  for (Index i = 0; i < cfg.levels(); ++i) {
    const Index f = cfg.encoder_filters[static_cast<std::size_t>(i)];
    const Shape5 want(1, f, 32 >> i, 48 >> i, 16 >> i);
    EXPECT_EQ(rec.shapes.at("enc" + std::to_string(i) + ".conv2"), want);
    EXPECT_EQ(rec.shapes.at("dec" + std::to_string(i) + ".conv"), want);
  }
  EXPECT_EQ(rec.shapes.at("bott.conv1"), Shape5(1, 64, 2, 3, 1));
}

TEST(UNet, KernelSizes) {
  for (const auto& cfg : {ModelConfig::deepdefacer(), ModelConfig::baseline()})
    for (const LayerSpec& l : model_layers(cfg)) {
      if (l.kind != LayerKind::Conv) continue;
      const bool pointwise = l.name == "head" || l.name == "bott.widen";
      EXPECT_EQ(l.kernel, pointwise ? 1 : 3) << l.name;
    }
}

TEST(UNet, HeInitialisationVariance) {
  const auto store = build_model<double>(ModelConfig::deepdefacer(), 7);
  for (const auto& e : store.entries()) {
    if (e.name.size() < 7 || e.name.substr(e.name.size() - 7) != ".weight") continue;
    const Shape5& s = e.value.shape();
    if (e.value.size() < 2000) continue;  // too few samples for a 10% bound
    const double fan_in = static_cast<double>(s.c() * s.d() * s.h() * s.w());
    const double mean = e.value.data().mean();
    const double var = (e.value.data() - mean).square().mean();
    EXPECT_NEAR(var / (2.0 / fan_in), 1.0, 0.1) << e.name;
  }
}

TEST(UNet, SingleConvParameterCount) {
  // 8 filters of 3x3x3 over one input channel plus 8 biases.
  ModelConfig cfg = ModelConfig::deepdefacer();
  const auto layers = model_layers(cfg);
  const LayerSpec& first = layers.front();
  EXPECT_EQ(first.name, "enc0.conv1");
  EXPECT_EQ(first.out_channels * first.in_channels * 27 + first.out_channels, 224);
  const auto store = build_model<float>(cfg, 0);
  EXPECT_EQ(store.at("enc0.conv1.weight").size() + store.at("enc0.conv1.bias").size(), 224);
}

TEST(UNet, ParameterReductionAtLeastNinetyPercent) {
  const Index a = count_parameters(build_model<float>(ModelConfig::deepdefacer(), 0));
  const Index b = count_parameters(build_model<float>(ModelConfig::baseline(), 0));
  EXPECT_LE(static_cast<double>(a) / static_cast<double>(b), 0.10);
}

TEST(UNet, ParameterCountIndependentOfInputSize) {
  const ModelConfig cfg = tiny();
  const auto store = build_model<float>(cfg, 3);
  std::mt19937_64 rng(3);
  const T small = forward(store, cfg, test::random_tensor<float>({1, 1, 32, 32, 32}, rng, 0.0, 1.0));
  const T large = forward(store, cfg, test::random_tensor<float>({1, 1, 48, 48, 48}, rng, 0.0, 1.0));
  EXPECT_EQ(small.shape(), Shape5(1, 1, 32, 32, 32));
  EXPECT_EQ(large.shape(), Shape5(1, 1, 48, 48, 48));
  for (Index i = 0; i < large.size(); ++i) ASSERT_TRUE(large.raw()[i] > 0.0f && large.raw()[i] < 1.0f);
}

TEST(UNet, NonDivisibleInputNamesAxis) {
  const ModelConfig cfg = tiny();
  const auto store = build_model<float>(cfg, 3);
  try {
    forward(store, cfg, T({1, 1, 32, 40, 32}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "H");
  }
}

TEST(UNet, TapeForwardMatchesInferenceForward) {
  const ModelConfig cfg = tiny();
  auto store = build_model<float>(cfg, 5);
  std::mt19937_64 rng(5);
  const T x = test::random_tensor<float>({1, 1, 16, 16, 16}, rng, 0.0, 1.0);
  Tape<float> tape;
  const Var out = forward_on_tape(tape, store, cfg, x, Mode::Train);
  const T eager = forward(store, cfg, x);
  ASSERT_EQ(tape.value(out).shape(), eager.shape());
  EXPECT_EQ(std::memcmp(tape.value(out).raw(), eager.raw(), sizeof(float) * eager.size()), 0);
}

TEST(UNet, BaselineHeadIsSoftmaxOverTwoChannels) {
  const ModelConfig cfg = ModelConfig::with_filters(Variant::Baseline, {2, 4, 8, 16});
  const auto store = build_model<float>(cfg, 2);
  std::mt19937_64 rng(2);
  const T y = forward(store, cfg, test::random_tensor<float>({1, 1, 16, 16, 16}, rng, 0.0, 1.0));
  ASSERT_EQ(y.shape().c(), 2);
  for (Index j = 0; j < y.shape().spatial(); ++j) EXPECT_NEAR(y.channel(0, 0)[j] + y.channel(0, 1)[j], 1.0f, 1e-6f);
}

TEST(UNet, InferConfigRoundTrip) {
  for (const auto& cfg : {ModelConfig::deepdefacer(), ModelConfig::baseline(), tiny()}) {
    const ModelConfig got = infer_config(build_model<float>(cfg, 0));
    EXPECT_EQ(got.encoder_filters, cfg.encoder_filters);
    EXPECT_EQ(got.bottleneck, cfg.bottleneck);
    EXPECT_EQ(got.use_batchnorm, cfg.use_batchnorm);
    EXPECT_EQ(got.head, cfg.head);
  }
}

TEST(UNet, ConcurrentInferenceOverSharedStore) {
  const ModelConfig cfg = tiny();
  const auto store = build_model<float>(cfg, 4);
  std::mt19937_64 rng(4);
  const T x = test::random_tensor<float>({1, 1, 16, 16, 16}, rng, 0.0, 1.0);
  const T ref = forward(store, cfg, x);
  std::vector<T> outs(4);
#pragma omp parallel for num_threads(4)
  for (int i = 0; i < 4; ++i) outs[static_cast<std::size_t>(i)] = forward(store, cfg, x);
  for (const T& o : outs) EXPECT_EQ(std::memcmp(o.raw(), ref.raw(), sizeof(float) * ref.size()), 0);
}

TEST(BatchNorm, NormalisedInputPassesThrough) {
  std::mt19937_64 rng(9);
  T x = test::random_tensor<float>({2, 3, 4, 4, 4}, rng);
  const Index sp = x.shape().spatial();
  for (Index c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (Index n = 0; n < 2; ++n)
      for (Index j = 0; j < sp; ++j) mean += x.channel(n, c)[j];
    mean /= 2.0 * sp;
    for (Index n = 0; n < 2; ++n)
      for (Index j = 0; j < sp; ++j) var += std::pow(x.channel(n, c)[j] - mean, 2);
    const double sd = std::sqrt(var / (2.0 * sp));
    for (Index n = 0; n < 2; ++n)
      for (Index j = 0; j < sp; ++j) x.channel(n, c)[j] = static_cast<float>((x.channel(n, c)[j] - mean) / sd);
  }
  auto st = BatchNormState<float>::identity(3);
  const T y = batchnorm3d(x, st, Mode::Train);
  for (Index i = 0; i < x.size(); ++i) EXPECT_NEAR(y.raw()[i], x.raw()[i], 1e-4f);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(10);
  const T x = test::random_tensor<float>({1, 2, 3, 3, 3}, rng);
  auto st = BatchNormState<float>::identity(2);
  st.gamma.data().setZero();
  st.beta.raw()[0] = 0.25f;
  st.beta.raw()[1] = -3.0f;
  const T y = batchnorm3d(x, st, Mode::Train);
  for (Index j = 0; j < 27; ++j) {
    EXPECT_EQ(y.channel(0, 0)[j], 0.25f);
    EXPECT_EQ(y.channel(0, 1)[j], -3.0f);
  }
}

TEST(BatchNorm, RunningStatisticsUpdateAndStayNonNegative) {
  std::mt19937_64 rng(11);
  auto st = BatchNormState<float>::identity(2);
  for (int k = 0; k < 20; ++k) {
    const T x = test::random_tensor<float>({1, 2, 2, 2, 2}, rng, -5.0, 5.0);
    batchnorm3d(x, st, Mode::Train);
    for (Index c = 0; c < 2; ++c) EXPECT_GE(st.running_var.raw()[c], 0.0f);
  }
  EXPECT_NE(st.running_mean.raw()[0], 0.0f);
}

TEST(BatchNorm, InferModeLeavesRunningStatistics) {
  std::mt19937_64 rng(12);
  auto st = BatchNormState<float>::identity(2);
  const T x = test::random_tensor<float>({1, 2, 2, 2, 2}, rng);
  const T y = batchnorm3d(x, st, Mode::Infer);
  EXPECT_EQ(st.running_mean.raw()[0], 0.0f);
  EXPECT_EQ(st.running_var.raw()[0], 1.0f);
  EXPECT_NEAR(y.raw()[0], x.raw()[0] / std::sqrt(1.0f + 1e-5f), 1e-6f);
}

TEST(BatchNorm, EmptyBatchIsUsageError) {
  auto st = BatchNormState<float>::identity(2);
  EXPECT_THROW(batchnorm3d(T({0, 2, 2, 2, 2}), st, Mode::Train), UsageError);
}
