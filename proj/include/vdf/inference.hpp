#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vdf/metrics.hpp"
#include "vdf/phantom.hpp"
#include "vdf/pipeline.hpp"
#include "vdf/unet.hpp"

namespace vdf {

struct DefaceOptions {
  GridOptions grid;
  double tau = 0.5;
  double tau_eq = kDefaultEqualityTolerance;
};

struct StageTimings {
  double preprocess_ms = 0.0;
  double forward_ms = 0.0;
  double postprocess_ms = 0.0;
};

struct DefaceResult {
  Volume<float> keep_probability;  // original resolution
  MaskVolume mask;                 // 1 = keep
  Volume<float> defaced;           // input * mask, raw intensities
  /// Mask used for scoring: the predicted mask for the sigmoid head, the
  /// subtract-and-threshold mask of the reconstructed image for the softmax
  /// head.
  MaskVolume scored_mask;
  Dims3 grid;
  bool shrink_fallback = false;
  StageTimings timings;
};

/// normalize -> fit_to_grid -> forward -> restore -> threshold -> Hadamard.
/// Falls back to no shrinking when the shrunken grid is too coarse for the
/// network's pooling depth.
DefaceResult deface_volume(const WeightStore<float>& store, const ModelConfig& config, const Volume<float>& image,
                           const DefaceOptions& opt = {});

/// Keep probabilities at the original resolution (before thresholding).
Volume<float> predict_keep_probability(const WeightStore<float>& store, const ModelConfig& config,
                                       const Volume<float>& image, const GridOptions& grid = {});

/// Produces a scoring mask for one manifest row.
using MaskSource = std::function<MaskVolume(const ManifestRow& row, const Volume<float>& image)>;

/// Scores `source` against the ground-truth masks of one split.  Rows whose
/// mask is missing are skipped and counted.  Throws EmptyInputError when the
/// split has no rows.  Rows are evaluated in parallel, results keep manifest
/// order.
EvalReport evaluate(const MaskSource& source, const std::filesystem::path& root, const DatasetManifest& manifest,
                    Split split, const std::string& model_name, std::vector<std::string>* warnings = nullptr);

EvalReport evaluate_model(const WeightStore<float>& store, const ModelConfig& config,
                          const std::filesystem::path& root, const DatasetManifest& manifest, Split split,
                          const DefaceOptions& opt = {}, std::vector<std::string>* warnings = nullptr);

/// Threshold search over the rows of one split.
ThresholdSearchResult threshold_search(const WeightStore<float>& store, const ModelConfig& config,
                                       const std::filesystem::path& root, const DatasetManifest& manifest,
                                       Split split, const ThresholdGrid& grid = {}, const GridOptions& grid_opt = {});

}  // namespace vdf
