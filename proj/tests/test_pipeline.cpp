#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "helpers.hpp"
#include "pipeline_props.hpp"
#include "vdf/pipeline.hpp"

using namespace vdf;

namespace {

Volume<float> ramp_w(const Dims3& d) {
  Volume<float> v(d, {1.0f, 1.0f, 1.0f});
  for (Index z = 0; z < d.d; ++z)
    for (Index y = 0; y < d.h; ++y)
      for (Index x = 0; x < d.w; ++x) v.at(z, y, x) = static_cast<float>(x) / static_cast<float>(d.w - 1);
  return v;
}

// Smooth blob used for the rotation round trip.
Volume<float> blob(Index n) {
  Volume<float> v({n, n, n}, {1.0f, 1.0f, 1.0f});
  const double c = (n - 1) / 2.0;
  for (Index z = 0; z < n; ++z)
    for (Index y = 0; y < n; ++y)
      for (Index x = 0; x < n; ++x) {
        const double r2 = (std::pow(z - c, 2) + std::pow(y - c, 2) + std::pow(x - c, 2)) / (c * c);
        v.at(z, y, x) = static_cast<float>(std::exp(-2.0 * r2) * (1.0 + 0.2 * std::sin(0.3 * x)));
      }
  return v;
}

}  // namespace

TEST(Normalize, MapsToUnitRangePreservingOrder) {
  Volume<float> v({1, 1, 5}, {1.0f, 1.0f, 1.0f});
  for (int i = 0; i < 5; ++i) v.data[i] = static_cast<float>(1000 * i);
  const auto n = normalize_intensity(v);
  EXPECT_EQ(n.data.minCoeff(), 0.0f);
  EXPECT_EQ(n.data.maxCoeff(), 1.0f);
  for (int i = 1; i < 5; ++i) EXPECT_GT(n.data[i], n.data[i - 1]);
}

TEST(Normalize, ConstantBecomesZero) {
  const Volume<float> v({3, 3, 3}, {1.0f, 1.0f, 1.0f}, 7.0f);
  EXPECT_TRUE((normalize_intensity(v).data == 0.0f).all());
}

TEST(Normalize, UnitRangeInputUnchanged) {
  std::mt19937_64 rng(1);
  Volume<float> v = test::random_volume({4, 5, 6}, rng);
  v.data[0] = 0.0f;
  v.data[1] = 1.0f;
  const auto n = normalize_intensity(v);
  for (Index i = 0; i < v.data.size(); ++i) EXPECT_NEAR(n.data[i], v.data[i], 1e-7f);
}

TEST(Resample, ConstantStaysConstant) {
  const Volume<float> v({5, 6, 7}, {1.0f, 2.0f, 3.0f}, 0.375f);
  const auto r = resample_trilinear(v, {9, 3, 12});
  EXPECT_TRUE((r.data == 0.375f).all());
}

TEST(Resample, RampStaysLinear) {
  const auto r = resample_trilinear(ramp_w({4, 4, 16}), {4, 4, 32});
  for (Index x = 0; x < 32; ++x) EXPECT_NEAR(r.at(2, 1, x), x / 31.0, 1e-6);
}

TEST(Resample, IdentityIsBitExact) {
  std::mt19937_64 rng(2);
  const auto v = test::random_volume({5, 7, 3}, rng);
  EXPECT_TRUE(test::bit_equal(resample_trilinear(v, v.dims), v));
}

TEST(Resample, PhysicalExtentPreserved) {
  const Volume<float> v({11, 21, 5}, {1.0f, 0.5f, 2.0f});
  const auto r = resample_trilinear(v, {21, 11, 9});
  EXPECT_NEAR(r.spacing[0] * 20, 1.0 * 10, 1e-5);
  EXPECT_NEAR(r.spacing[1] * 10, 0.5 * 20, 1e-5);
  EXPECT_NEAR(r.spacing[2] * 8, 2.0 * 4, 1e-5);
}

TEST(Grid, ShrinkRoundsToMultiplesOfSixteen) {
  const Volume<float> v({256, 256, 150}, {1.0f, 1.0f, 1.0f});
  const auto [g, recipe] = fit_to_grid(v);
  EXPECT_EQ(g.dims, (Dims3{128, 128, 80}));
  EXPECT_EQ(restore_from_grid(g, recipe).dims, v.dims);
}

TEST(Grid, FloorSizedInputUnchanged) {
  std::mt19937_64 rng(3);
  const auto v = test::random_volume({64, 64, 64}, rng);
  const auto [g, recipe] = fit_to_grid(v);
  EXPECT_EQ(g.dims, v.dims);
  EXPECT_TRUE(test::bit_equal(g, v));
}

TEST(Grid, ExtentsDivisibleAndAboveFloor) {
  for (Index dim = 1; dim <= 400; ++dim)
    for (double shrink : {0.25, 0.5, 1.0}) {
      const Index g = grid_extent(dim, {shrink, 64, 16});
      EXPECT_EQ(g % 16, 0) << dim;
      EXPECT_GE(g, std::min<Index>(dim, 64)) << dim;
    }
}

TEST(Augment, IdentityLeavesImageAndMask) {
  std::mt19937_64 rng(4);
  const auto v = test::random_volume({6, 7, 8}, rng);
  MaskVolume m = test::random_mask(v.dims, rng);
  const auto [vi, mi] = augment(v, m, RigidAugmentation::identity());
  for (Index i = 0; i < v.data.size(); ++i) EXPECT_NEAR(vi.data[i], v.data[i], 1e-6f);
  EXPECT_TRUE(test::same_mask(mi, m));
}

TEST(Augment, SampledParametersWithinRangesAndReproducible) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto a = RigidAugmentation::sample(s);
    for (double r : a.rotation_deg) EXPECT_LE(std::abs(r), 10.0);
    EXPECT_GE(a.scale, 0.9);
    EXPECT_LE(a.scale, 1.1);
    EXPECT_EQ(a.seed, s);
  }
  std::mt19937_64 rng(5);
  const auto v = test::random_volume({8, 8, 8}, rng);
  const auto m = test::random_mask(v.dims, rng);
  const auto a = RigidAugmentation::sample(77);
  const auto x = augment(v, m, a), y = augment(v, m, a);
  EXPECT_TRUE(test::bit_equal(x.first, y.first));
  EXPECT_TRUE(test::same_mask(x.second, y.second));
}

TEST(Augment, RotationRoundTripLosesLittle) {
  const auto v = blob(40);
  RigidAugmentation fwd, inv;
  fwd.rotation_deg = {10.0, 0.0, 0.0};
  inv.rotation_deg = {-10.0, 0.0, 0.0};
  const auto back = augment_image(augment_image(v, fwd), inv);
  double sum = 0.0;
  Index n = 0;
  for (Index z = 10; z < 30; ++z)
    for (Index y = 10; y < 30; ++y)
      for (Index x = 10; x < 30; ++x, ++n) sum += std::abs(back.at(z, y, x) - v.at(z, y, x));
  EXPECT_LT(sum / static_cast<double>(n), 0.02);
}

TEST(Augment, OutOfFieldFill) {
  const Volume<float> v({8, 8, 8}, {1.0f, 1.0f, 1.0f}, 1.0f);
  const MaskVolume m({8, 8, 8}, {1.0f, 1.0f, 1.0f}, 0);
  RigidAugmentation a;
  a.scale = 0.5;  // shrinking pulls in samples from outside the field of view
  const auto [vi, mi] = augment(v, m, a);
  EXPECT_EQ(vi.at(0, 0, 0), 0.0f);
  EXPECT_EQ(mi.at(0, 0, 0), 1);
}

TEST(Threshold, TieGoesToKeep) {
  Volume<float> p({1, 1, 3}, {1.0f, 1.0f, 1.0f});
  p.data << 0.49f, 0.5f, 0.51f;
  const auto m = threshold_mask(p, 0.5);
  EXPECT_EQ(m.data[0], 0);
  EXPECT_EQ(m.data[1], 1);
  EXPECT_EQ(m.data[2], 1);
}

TEST(Threshold, AllHighIsAllKeep) {
  const Volume<float> p({3, 3, 3}, {1.0f, 1.0f, 1.0f}, 0.9f);
  EXPECT_TRUE((threshold_mask(p, 0.5).data == 1).all());
}

TEST(Threshold, OutOfRangeRejected) {
  Volume<float> p({1, 1, 2}, {1.0f, 1.0f, 1.0f}, 0.5f);
  p.data[1] = 1.5f;
  EXPECT_THROW(threshold_mask(p, 0.5), ValidationError);
}

TEST(Threshold, SweepShrinksKeptFraction) {
  std::mt19937_64 rng(6);
  const auto p = test::random_volume({8, 8, 8}, rng);
  Index prev = p.data.size() + 1;
  for (int k = 1; k <= 9; ++k) {
    const Index kept = threshold_mask(p, k / 10.0).data.cast<Index>().sum();
    EXPECT_LE(kept, prev);
    prev = kept;
  }
}

TEST(Deface, HandExample) {
  Volume<float> x({1, 1, 3}, {1.0f, 1.0f, 1.0f});
  x.data << 2.0f, 3.0f, 5.0f;
  MaskVolume m({1, 1, 3}, {1.0f, 1.0f, 1.0f});
  m.data << 1, 0, 1;
  const auto y = deface(x, m);
  EXPECT_EQ(y.data[0], 2.0f);
  EXPECT_EQ(y.data[1], 0.0f);
  EXPECT_EQ(y.data[2], 5.0f);
}

TEST(Deface, AllOnesAndAllZeros) {
  std::mt19937_64 rng(7);
  const auto x = test::random_volume({4, 4, 4}, rng);
  EXPECT_TRUE(test::bit_equal(deface(x, MaskVolume(x.dims, x.spacing, 1)), x));
  EXPECT_TRUE((deface(x, MaskVolume(x.dims, x.spacing, 0)).data == 0.0f).all());
}

TEST(Deface, DimensionMismatchNamesAxis) {
  const Volume<float> x({4, 4, 4}, {1.0f, 1.0f, 1.0f});
  try {
    deface(x, MaskVolume({4, 5, 4}, {1.0f, 1.0f, 1.0f}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "H");
  }
}

TEST(ThresholdSearch, BinaryPredictionsAreThresholdInvariant) {
  std::mt19937_64 rng(8);
  std::vector<ThresholdCase> cases;
  for (int i = 0; i < 3; ++i) {
    auto truth = test::random_mask({6, 6, 6}, rng);
    auto pred = test::random_mask({6, 6, 6}, rng, 0.7);
    Volume<float> p = pred.like<float>();
    for (Index j = 0; j < p.data.size(); ++j) p.data[j] = pred.data[j];
    cases.push_back({p, truth});
  }
  const auto r = threshold_search(cases);
  for (const auto& [tau, d] : r.table) EXPECT_EQ(d, r.table.front().second);
  EXPECT_EQ(r.best_tau, 0.5);
  const auto grid = ThresholdGrid{}.candidates();
  EXPECT_NE(std::find(grid.begin(), grid.end(), r.best_tau), grid.end());
}

TEST(ThresholdSearch, EmptyValidationSetIsUsageError) {
  EXPECT_THROW(threshold_search({}), UsageError);
}

TEST(PipelineProperties, ThousandCasesEach) {
  for (const auto& p : test::pipeline_property_suite(2024, 1000)) {
    EXPECT_EQ(p.cases, 1000) << p.name;
    EXPECT_EQ(p.failures, 0) << p.name << ": " << p.first_failure;
  }
}
