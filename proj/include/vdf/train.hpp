#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vdf/adam.hpp"
#include "vdf/inference.hpp"
#include "vdf/phantom.hpp"
#include "vdf/pipeline.hpp"
#include "vdf/unet.hpp"

namespace vdf {

/// One preprocessed training pair at network-grid resolution.
struct TrainSample {
  std::string id;
  Volume<float> image;  // normalised
  MaskVolume mask;
};

/// A validation pair at original resolution.
struct ValSample {
  std::string id;
  Volume<float> image;
  MaskVolume truth;
};

struct TrainConfig {
  ModelConfig model = ModelConfig::deepdefacer();
  AdamConfig adam;
  Index iterations = 1000;
  std::uint64_t seed = 0;
  GridOptions grid;
  bool augment = true;
  AugmentationRanges augmentation;
  Index validate_every = 50;
  Index checkpoint_every = 50;
  std::optional<std::filesystem::path> checkpoint_dir;
  /// One record per iteration (iter, loss) and per validation; wall-clock
  /// times go to the sibling "<stem>.timing.jsonl" so this file is
  /// reproducible.
  std::optional<std::filesystem::path> metrics_path;
  /// Plain-text progress lines.
  std::function<void(const std::string&)> log;
};

struct ValidationRecord {
  Index iteration = 0;
  double dice = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct TrainReport {
  std::vector<double> losses;
  std::vector<ValidationRecord> validations;
  Index best_iteration = -1;
  double best_dice = -1.0;
  std::string best_checkpoint;
  WeightStore<float> final_store;
  WeightStore<float> best_store;
};

/// Preprocesses a training image: normalise, fit to the grid, and resample the
/// mask to the grid (trilinear then 0.5 threshold).
TrainSample prepare_sample(std::string id, const Volume<float>& image, const MaskVolume& mask,
                           const GridOptions& grid);

std::vector<TrainSample> load_train_samples(const std::filesystem::path& root, const DatasetManifest& manifest,
                                            Split split, const GridOptions& grid);
std::vector<ValSample> load_val_samples(const std::filesystem::path& root, const DatasetManifest& manifest,
                                        Split split);

/// Batch-size-1 training with Adam.  Sample order is a per-epoch permutation
/// seeded from (seed, epoch); augmentation of iteration i is seeded from
/// (seed, i).  Validation Dice runs at original resolution.  Throws
/// NumericalError on a non-finite loss, naming the iteration and layer norms.
TrainReport train_loop(WeightStore<float> store, const std::vector<TrainSample>& train,
                       const std::vector<ValSample>& val, const TrainConfig& config);

/// Order of samples for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

}  // namespace vdf
