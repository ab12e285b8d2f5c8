#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vdf/volume.hpp"

namespace vdf {

/// Voxel confusion counts with "positive" meaning defaced (mask value 0).
struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::int64_t total() const { return tp + fp + fn + tn; }
};

ConfusionCounts confusion(const MaskVolume& predicted, const MaskVolume& truth);

/// 2|X n Y| / (|X| + |Y|) over defaced-voxel sets; 1 when both are empty.
double dice(const MaskVolume& x, const MaskVolume& y);
double dice(const ConfusionCounts& c);

struct PrecisionRecall {
  double precision = 1.0;
  double recall = 1.0;
};

/// precision = tp / (tp + fp), recall = tp / (tp + fn); an empty denominator
/// yields 1.
PrecisionRecall precision_recall(const MaskVolume& predicted, const MaskVolume& truth);
PrecisionRecall precision_recall(const ConfusionCounts& c);

inline constexpr double kDefaultEqualityTolerance = 0.01;

/// Scores a direct-segmentation output: voxels whose intensity changed by more
/// than `tau_eq` count as defaced.
MaskVolume binarize_baseline_output(const Volume<float>& original, const Volume<float>& predicted_defaced,
                                    double tau_eq = kDefaultEqualityTolerance);

/// Reference scores from the published results table.
struct ReferenceRow {
  const char* model;
  double dice, precision, recall;
  std::int64_t parameters;
};
inline constexpr ReferenceRow kReferenceDeepDefacer{"Deepdefacer", 0.854, 0.916, 0.805, 1'412'197};
inline constexpr ReferenceRow kReferenceBaseline{"Base 3D U-Net", 0.413, 0.132, 0.882, 19'069'955};

struct EvalRow {
  std::string id;
  std::string protocol;
  double dice = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct EvalReport {
  std::string model;
  std::vector<EvalRow> rows;
  std::int64_t skipped = 0;
  double mean_dice = 0.0;
  double mean_precision = 0.0;
  double mean_recall = 0.0;

  /// Recomputes the means from `rows` in row order.
  void finalize();
  /// One JSON record per image followed by a summary record.
  std::string to_jsonl() const;
  /// Plain-text table in the layout of the published results table, with the
  /// reference rows alongside.
  std::string to_table(std::int64_t parameter_count) const;
};

}  // namespace vdf
