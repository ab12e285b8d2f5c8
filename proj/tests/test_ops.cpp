#include <gtest/gtest.h>

#include <cstring>

#include "helpers.hpp"
#include "vdf/ops.hpp"

using namespace vdf;
using vdf::test::random_tensor;

namespace {

// Direct six-loop convolution used as the reference.
Tensor5<double> naive_conv(const Tensor5<double>& x, const Tensor5<double>& w, const Tensor5<double>& b, Index pad) {
  const Shape5& s = x.shape();
  const Index k = w.shape().d();
  const Index od = s.d() + 2 * pad - k + 1, oh = s.h() + 2 * pad - k + 1, ow = s.w() + 2 * pad - k + 1;
  Tensor5<double> y(Shape5(s.n(), w.shape().n(), od, oh, ow));
  for (Index n = 0; n < s.n(); ++n)
    for (Index o = 0; o < w.shape().n(); ++o)
      for (Index d = 0; d < od; ++d)
        for (Index h = 0; h < oh; ++h)
          for (Index q = 0; q < ow; ++q) {
            double acc = b(0, o, 0, 0, 0);
            for (Index i = 0; i < s.c(); ++i)
              for (Index a = 0; a < k; ++a)
                for (Index bb = 0; bb < k; ++bb)
                  for (Index c = 0; c < k; ++c) {
                    const Index zd = d + a - pad, zh = h + bb - pad, zw = q + c - pad;
                    if (zd < 0 || zh < 0 || zw < 0 || zd >= s.d() || zh >= s.h() || zw >= s.w()) continue;
                    acc += x(n, i, zd, zh, zw) * w(o, i, a, bb, c);
                  }
            y(n, o, d, h, q) = acc;
          }
  return y;
}

}  // namespace

TEST(Conv3d, AllOnesKernelCountsNeighbours) {
  const auto x = Tensor5<float>::Constant({1, 1, 3, 3, 3}, 1.0f);
  const auto w = Tensor5<float>::Constant(conv_weight_shape(1, 1, 3), 1.0f);
  const Tensor5<float> b(bias_shape(1));
  const auto y = conv3d(x, w, b, Padding::Same);
  ASSERT_EQ(y.shape(), x.shape());
  EXPECT_FLOAT_EQ(y(0, 0, 1, 1, 1), 27.0f);
  EXPECT_FLOAT_EQ(y(0, 0, 0, 0, 0), 8.0f);
  EXPECT_FLOAT_EQ(y(0, 0, 2, 0, 2), 8.0f);
  EXPECT_FLOAT_EQ(y(0, 0, 1, 0, 0), 12.0f);
}

TEST(Conv3d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor<float>({2, 1, 5, 4, 6}, rng);
  Tensor5<float> w(conv_weight_shape(1, 1, 3));
  w(0, 0, 1, 1, 1) = 1.0f;
  const auto y = conv3d(x, w, Tensor5<float>(bias_shape(1)));
  EXPECT_TRUE((y.data() == x.data()).all());
}

TEST(Conv3d, ZeroKernelGivesBias) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor<float>({1, 3, 4, 4, 4}, rng);
  const Tensor5<float> w(conv_weight_shape(2, 3, 3));
  auto b = Tensor5<float>(bias_shape(2));
  b.raw()[0] = 0.5f;
  b.raw()[1] = -2.0f;
  const auto y = conv3d(x, w, b);
  for (Index i = 0; i < 64; ++i) {
    EXPECT_EQ(y.channel(0, 0)[i], 0.5f);
    EXPECT_EQ(y.channel(0, 1)[i], -2.0f);
  }
}

TEST(Conv3d, MatchesDirectConvolution) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    const Index k = trial % 2 ? 1 : 3;
    const Padding pad = trial % 3 == 2 ? Padding::Valid : Padding::Same;
    const auto x = random_tensor<double>({2, 3, 5, 6, 4}, rng);
    const auto w = random_tensor<double>(conv_weight_shape(4, 3, k), rng);
    const auto b = random_tensor<double>(bias_shape(4), rng);
    const auto got = conv3d(x, w, b, pad);
    const auto want = naive_conv(x, w, b, pad == Padding::Same ? (k - 1) / 2 : 0);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT((got.data() - want.data()).abs().maxCoeff(), 1e-12);
  }
}

TEST(Conv3d, ValidPaddingShrinksAndRejectsSmallInput) {
  const Tensor5<float> x({1, 1, 5, 5, 5});
  const Tensor5<float> w(conv_weight_shape(1, 1, 3));
  const Tensor5<float> b(bias_shape(1));
  EXPECT_EQ(conv3d(x, w, b, Padding::Valid).shape(), Shape5(1, 1, 3, 3, 3));
  const Tensor5<float> tiny({1, 1, 5, 2, 5});
  try {
    conv3d(tiny, w, b, Padding::Valid);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "H");
  }
}

TEST(Conv3d, ChannelMismatchNamesChannelAxis) {
  const Tensor5<float> x({1, 2, 4, 4, 4});
  const Tensor5<float> w(conv_weight_shape(1, 3, 3));
  try {
    conv3d(x, w, Tensor5<float>(bias_shape(1)));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "C");
  }
}

TEST(Conv3d, SamePaddingPreservesDimsProperty) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    const Dims3 d = vdf::test::random_dims(rng, 1, 7);
    const auto x = random_tensor<float>({1, 2, d.d, d.h, d.w}, rng);
    const auto w = random_tensor<float>(conv_weight_shape(3, 2, 3), rng);
    const auto y = conv3d(x, w, Tensor5<float>(bias_shape(3)));
    EXPECT_EQ(y.shape(), Shape5(1, 3, d.d, d.h, d.w));
  }
}

TEST(Conv3d, LinearInInputAndWeights) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor<float>({1, 2, 5, 5, 5}, rng);
    const auto z = random_tensor<float>({1, 2, 5, 5, 5}, rng);
    const auto w = random_tensor<float>(conv_weight_shape(3, 2, 3), rng);
    const auto v = random_tensor<float>(conv_weight_shape(3, 2, 3), rng);
    const Tensor5<float> zero(bias_shape(3));
    const float alpha = 0.7f, beta = -1.3f;
    Tensor5<float> mix(x.shape(), alpha * x.data() + beta * z.data());
    const auto lhs = conv3d(mix, w, zero);
    const Eigen::ArrayXf rhs = alpha * conv3d(x, w, zero).data() + beta * conv3d(z, w, zero).data();
    EXPECT_LT((lhs.data() - rhs).abs().maxCoeff(), 1e-5 * std::max(1.0f, rhs.abs().maxCoeff()));

    Tensor5<float> wmix(w.shape(), alpha * w.data() + beta * v.data());
    const auto lhs_w = conv3d(x, wmix, zero);
    const Eigen::ArrayXf rhs_w = alpha * conv3d(x, w, zero).data() + beta * conv3d(x, v, zero).data();
    EXPECT_LT((lhs_w.data() - rhs_w).abs().maxCoeff(), 1e-5 * std::max(1.0f, rhs_w.abs().maxCoeff()));
  }
}

TEST(Conv3dBackward, ZeroUpstreamGivesZeroGrads) {
  std::mt19937_64 rng(8);
  const auto x = random_tensor<float>({1, 2, 4, 4, 4}, rng);
  const auto w = random_tensor<float>(conv_weight_shape(3, 2, 3), rng);
  const Tensor5<float> up({1, 3, 4, 4, 4});
  const auto g = conv3d_backward(x, w, up, Padding::Same, true);
  EXPECT_EQ(g.input.data().abs().maxCoeff(), 0.0f);
  EXPECT_EQ(g.weight.data().abs().maxCoeff(), 0.0f);
  EXPECT_EQ(g.bias.data().abs().maxCoeff(), 0.0f);
}

TEST(Conv3dBackward, BiasGradIsUpstreamSum) {
  std::mt19937_64 rng(9);
  const auto x = random_tensor<double>({2, 2, 4, 3, 5}, rng);
  const auto w = random_tensor<double>(conv_weight_shape(3, 2, 3), rng);
  const auto up = random_tensor<double>({2, 3, 4, 3, 5}, rng);
  const auto g = conv3d_backward(x, w, up, Padding::Same, false);
  for (Index o = 0; o < 3; ++o) {
    double s = 0;
    for (Index n = 0; n < 2; ++n)
      for (Index j = 0; j < 60; ++j) s += up.channel(n, o)[j];
    EXPECT_NEAR(g.bias.raw()[o], s, 1e-12);
  }
}

TEST(Conv3d, DeterministicAcrossThreadCounts) {
  std::mt19937_64 rng(10);
  const auto x = random_tensor<float>({2, 4, 12, 10, 9}, rng);
  const auto w = random_tensor<float>(conv_weight_shape(5, 4, 3), rng);
  const auto b = random_tensor<float>(bias_shape(5), rng);
  const auto up = random_tensor<float>({2, 5, 12, 10, 9}, rng);
  const int before = num_threads();
  set_num_threads(1);
  const auto y1 = conv3d(x, w, b);
  const auto g1 = conv3d_backward(x, w, up, Padding::Same, true);
  set_num_threads(4);
  const auto y4 = conv3d(x, w, b);
  const auto g4 = conv3d_backward(x, w, up, Padding::Same, true);
  set_num_threads(before);
  auto same = [](const Tensor5<float>& a, const Tensor5<float>& c) {
    return std::memcmp(a.raw(), c.raw(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
  };
  EXPECT_TRUE(same(y1, y4));
  EXPECT_TRUE(same(g1.input, g4.input));
  EXPECT_TRUE(same(g1.weight, g4.weight));
  EXPECT_TRUE(same(g1.bias, g4.bias));
}

TEST(MaxPool, ConstantHalvesDims) {
  const auto x = Tensor5<float>::Constant({1, 2, 4, 6, 8}, 3.0f);
  const auto p = maxpool3d(x);
  EXPECT_EQ(p.output.shape(), Shape5(1, 2, 2, 3, 4));
  EXPECT_TRUE((p.output.data() == 3.0f).all());
}

TEST(MaxPool, BlockOfOneToEight) {
  Tensor5<float> x({1, 1, 2, 2, 2});
  for (Index i = 0; i < 8; ++i) x.raw()[i] = static_cast<float>((i * 5) % 8 + 1);  // permutation of 1..8
  const auto p = maxpool3d(x);
  EXPECT_EQ(p.output.raw()[0], 8.0f);
  const auto g = maxpool3d_backward(x.shape(), p.argmax, Tensor5<float>::Constant({1, 1, 1, 1, 1}, 1.0f));
  for (Index i = 0; i < 8; ++i) EXPECT_EQ(g.raw()[i], x.raw()[i] == 8.0f ? 1.0f : 0.0f);
}

TEST(MaxPool, OddExtentRejected) {
  try {
    maxpool3d(Tensor5<float>({1, 1, 4, 5, 4}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "H");
  }
}

TEST(Upsample, ReplicatesAndSumsBack) {
  const auto x = Tensor5<float>::Constant({1, 1, 1, 1, 1}, 2.5f);
  const auto y = upsample_nearest3d(x);
  EXPECT_EQ(y.shape(), Shape5(1, 1, 2, 2, 2));
  EXPECT_TRUE((y.data() == 2.5f).all());
  const auto g = upsample_nearest3d_backward(Tensor5<float>::Constant({1, 3, 4, 4, 2}, 1.0f));
  EXPECT_EQ(g.shape(), Shape5(1, 3, 2, 2, 1));
  EXPECT_TRUE((g.data() == 8.0f).all());
}

TEST(Upsample, PoolOfUpsampleIsIdentityProperty) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const Dims3 d = vdf::test::random_dims(rng, 1, 5);
    const auto x = random_tensor<float>({1, 2, d.d, d.h, d.w}, rng);
    const auto back = maxpool3d(upsample_nearest3d(x)).output;
    EXPECT_TRUE((back.data() == x.data()).all());
  }
}

TEST(Concat, ShapesAndSplit) {
  std::mt19937_64 rng(12);
  const auto a = random_tensor<float>({1, 8, 4, 4, 4}, rng);
  const auto b = random_tensor<float>({1, 8, 4, 4, 4}, rng);
  const auto c = concat_channels(a, b);
  EXPECT_EQ(c.shape(), Shape5(1, 16, 4, 4, 4));
  EXPECT_EQ(c(0, 0, 1, 2, 3), a(0, 0, 1, 2, 3));
  EXPECT_EQ(c(0, 8, 1, 2, 3), b(0, 0, 1, 2, 3));

  const auto up = random_tensor<float>({1, 2, 3, 3, 3}, rng);
  auto [ga, gb] = concat_channels_backward(up, 1);
  for (Index j = 0; j < 27; ++j) {
    EXPECT_EQ(ga.channel(0, 0)[j], up.channel(0, 0)[j]);
    EXPECT_EQ(gb.channel(0, 0)[j], up.channel(0, 1)[j]);
  }
}

TEST(Concat, EmptyChannelIsIdentityAndMismatchRejected) {
  std::mt19937_64 rng(13);
  const auto a = random_tensor<float>({1, 3, 2, 2, 2}, rng);
  const auto c = concat_channels(a, Tensor5<float>({1, 0, 2, 2, 2}));
  EXPECT_TRUE((c.data() == a.data()).all());
  EXPECT_EQ(c.shape(), a.shape());
  try {
    concat_channels(a, Tensor5<float>({1, 3, 2, 4, 2}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "H");
  }
}

TEST(Activations, ReluAndSigmoidValues) {
  Tensor5<float> x({1, 1, 1, 1, 3});
  x.raw()[0] = -1;
  x.raw()[1] = 0;
  x.raw()[2] = 2;
  const auto r = relu(x);
  EXPECT_EQ(r.raw()[0], 0.0f);
  EXPECT_EQ(r.raw()[1], 0.0f);
  EXPECT_EQ(r.raw()[2], 2.0f);
  const auto g = relu_backward(x, Tensor5<float>::Constant(x.shape(), 1.0f));
  EXPECT_EQ(g.raw()[1], 0.0f);  // subgradient at zero
  EXPECT_EQ(g.raw()[2], 1.0f);

  const auto s = sigmoid(Tensor5<float>({1, 1, 1, 1, 1}));
  EXPECT_EQ(s.raw()[0], 0.5f);
  const auto sg = sigmoid_backward(s, Tensor5<float>::Constant(s.shape(), 1.0f));
  EXPECT_FLOAT_EQ(sg.raw()[0], 0.25f);
}

TEST(Activations, SigmoidStaysInOpenIntervalForModerateInputs) {
  std::mt19937_64 rng(14);
  const auto x = random_tensor<float>({1, 1, 8, 8, 8}, rng, -15.0, 15.0);
  const auto s = sigmoid(x);
  EXPECT_TRUE((s.data() > 0.0f).all());
  EXPECT_TRUE((s.data() < 1.0f).all());
}

TEST(Activations, SoftmaxChannelsSumToOne) {
  std::mt19937_64 rng(15);
  const auto x = random_tensor<float>({2, 2, 3, 3, 3}, rng, -50.0, 50.0);
  const auto p = softmax_channels(x);
  for (Index n = 0; n < 2; ++n)
    for (Index j = 0; j < 27; ++j) EXPECT_NEAR(p.channel(n, 0)[j] + p.channel(n, 1)[j], 1.0f, 1e-6);
  EXPECT_TRUE(p.all_finite());
}

TEST(Tensor, ShapeAndGradInvariants) {
  Tensor5<float> t({2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 720);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().size(), 720);
  EXPECT_TRUE(t.has_grad());
  EXPECT_THROW(Tensor5<float>(Shape5(1, 1, 2, 2, 2), Eigen::ArrayXf::Zero(7)), DimensionError);
  EXPECT_THROW(Tensor5<float>(Shape5(1, -1, 2, 2, 2)), DimensionError);
}
