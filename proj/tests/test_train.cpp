#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "helpers.hpp"
#include "vdf/nifti.hpp"
#include "vdf/train.hpp"

using namespace vdf;

namespace {

ModelConfig tiny() { return ModelConfig::with_filters(Variant::DeepDefacer, {4, 8, 16, 32}); }

TrainSample one_sample(std::uint64_t seed = 1) {
  const auto ph = generate_phantom(PhantomSpec::sample({{32, 32, 32}, {2.0f, 2.0f, 2.0f}}, seed));
  return prepare_sample("ph", ph.image, ph.mask, GridOptions{0.5, 32, 16});
}

TrainConfig overfit_config(Index iterations) {
  TrainConfig c;
  c.model = tiny();
  c.iterations = iterations;
  c.seed = 3;
  c.grid = GridOptions{0.5, 32, 16};
  c.augment = false;
  return c;
}

}  // namespace

TEST(Train, EpochOrderIsAPermutationAndSeeded) {
  const auto a = epoch_order(17, 5, 0), b = epoch_order(17, 5, 0), c = epoch_order(17, 5, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::vector<std::size_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Train, PreparedSampleSitsOnTheGrid) {
  const TrainSample s = one_sample();
  EXPECT_EQ(s.image.dims, (Dims3{32, 32, 32}));
  EXPECT_EQ(s.mask.dims, s.image.dims);
  EXPECT_TRUE(is_binary(s.mask));
  EXPECT_EQ(s.image.data.maxCoeff(), 1.0f);
}

TEST(Train, InitialLossNearLn2) {
  const auto samples = std::vector<TrainSample>{one_sample()};
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig c = overfit_config(1);
    c.adam.learning_rate = 0.0;
    const auto r = train_loop(build_model<float>(c.model, seed), samples, {}, c);
    ASSERT_EQ(r.losses.size(), 1u);
    EXPECT_NEAR(r.losses[0], std::log(2.0), 0.15) << "seed " << seed;
  }
}

TEST(Train, ZeroIterationsLeavesModelUnchanged) {
  const auto store = build_model<float>(tiny(), 4);
  const auto r = train_loop(store, {one_sample()}, {}, overfit_config(0));
  EXPECT_TRUE(r.losses.empty());
  EXPECT_TRUE(r.final_store.bit_equal(store));
}

TEST(Train, OverfitsOnePhantom) {
  const auto r = train_loop(build_model<float>(tiny(), 5), {one_sample()}, {}, overfit_config(200));
  ASSERT_EQ(r.losses.size(), 200u);
  EXPECT_LT(r.losses.back(), 0.05);

  // Smoothed over a window of 20 the curve only goes down.
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 20 <= r.losses.size(); i += 20)
    smooth.push_back(std::accumulate(r.losses.begin() + static_cast<long>(i), r.losses.begin() + static_cast<long>(i + 20), 0.0) / 20.0);
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LT(smooth[i], smooth[i - 1]) << "window " << i;
}

TEST(Train, DeterministicWeightsAndMetrics) {
  const auto dir = test::scratch_dir("train-det");
  const auto ph = generate_phantom(PhantomSpec::sample({{32, 32, 32}, {2.0f, 2.0f, 2.0f}}, 9));
  const std::vector<ValSample> val{{"v", ph.image, ph.mask}};
  auto run = [&](const std::string& name) {
    TrainConfig c = overfit_config(30);
    c.augment = true;
    c.validate_every = 10;
    c.metrics_path = dir / (name + ".jsonl");
    c.checkpoint_dir = dir / (name + "-ckpt");
    c.checkpoint_every = 10;
    return train_loop(build_model<float>(c.model, 6), {one_sample(1), one_sample(2)}, val, c);
  };
  const auto a = run("a"), b = run("b");
  EXPECT_TRUE(a.final_store.bit_equal(b.final_store));
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.validations.size(), 3u);
  EXPECT_EQ(a.best_iteration, b.best_iteration);
  EXPECT_EQ(read_file(dir / "a.jsonl"), read_file(dir / "b.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a.timing.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a-ckpt" / "iter-10.vdfw"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a-ckpt" / "best.vdfw"));
}

TEST(Train, EmptyDatasetRejected) {
  EXPECT_THROW(train_loop(build_model<float>(tiny(), 1), {}, {}, overfit_config(5)), EmptyInputError);
}

TEST(Train, NonFiniteLossAbortsWithDiagnostics) {
  auto store = build_model<float>(tiny(), 1);
  store.at("head.bias").raw()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_loop(store, {one_sample()}, {}, overfit_config(3));
    FAIL();
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("iteration 0"), std::string::npos) << what;
    EXPECT_NE(what.find("enc0.conv1.weight"), std::string::npos) << what;
  }
}
