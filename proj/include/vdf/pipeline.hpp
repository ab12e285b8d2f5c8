#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "vdf/volume.hpp"

namespace vdf {

/// (v - min) / (max - min); a constant volume maps to all zeros.
Volume<float> normalize_intensity(const Volume<float>& v);

/// Trilinear resampling on corner-aligned grids: output index i samples the
/// input at i * (in - 1) / (out - 1).  Spacing is rescaled so the physical
/// extent between the first and last voxel centres is preserved.
Volume<float> resample_trilinear(const Volume<float>& v, const Dims3& target);

/// Nearest-neighbour resampling on the same corner-aligned grid.
MaskVolume resample_nearest(const MaskVolume& m, const Dims3& target);

/// Trilinear resampling of the mask as a {0,1} field followed by a 0.5
/// threshold.
MaskVolume resample_mask(const MaskVolume& m, const Dims3& target);

struct GridOptions {
  double shrink = 0.5;
  Index floor = 64;
  Index multiple = 16;
};

/// How to go back from the network grid to the original voxel grid.
struct GridRecipe {
  Dims3 original;
  Dims3 grid;
  Eigen::Vector3f original_spacing{1.0f, 1.0f, 1.0f};
  Affine original_affine = Volume<float>::default_affine({1.0f, 1.0f, 1.0f});
  std::array<char, 3> original_orientation{'S', 'A', 'R'};
};

/// Grid extent for one axis: the multiple of `multiple` nearest to
/// dim * shrink (ties round up), raised to at least min(dim, floor) rounded up
/// to a multiple, and never below one multiple.
Index grid_extent(Index dim, const GridOptions& opt);
Dims3 grid_dims(const Dims3& dims, const GridOptions& opt);

std::pair<Volume<float>, GridRecipe> fit_to_grid(const Volume<float>& v, const GridOptions& opt = {});

/// Resamples a grid-resolution map back to the recipe's original dims.
Volume<float> restore_from_grid(const Volume<float>& grid_map, const GridRecipe& recipe);

struct AugmentationRanges {
  double max_rotation_deg = 10.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
};

/// Rigid rotation about the volume centre (angles about the d, h and w axes,
/// applied in that order) followed by isotropic scaling.
struct RigidAugmentation {
  std::array<double, 3> rotation_deg{0.0, 0.0, 0.0};
  double scale = 1.0;
  std::uint64_t seed = 0;

  static RigidAugmentation identity() { return {}; }
  static RigidAugmentation sample(std::uint64_t seed, const AugmentationRanges& ranges = {});
};

/// Applies the same transform to image (trilinear, out-of-field 0) and mask
/// (nearest, out-of-field 1).
std::pair<Volume<float>, MaskVolume> augment(const Volume<float>& v, const MaskVolume& m,
                                             const RigidAugmentation& aug);

/// Image-only variant of `augment`.
Volume<float> augment_image(const Volume<float>& v, const RigidAugmentation& aug);

/// p >= tau -> 1 (keep), else 0.  Values outside [0, 1] are rejected.
MaskVolume threshold_mask(const Volume<float>& probabilities, double tau = 0.5);

/// Hadamard product of an image with a binary mask.
Volume<float> deface(const Volume<float>& image, const MaskVolume& mask);

/// A validation case for threshold selection: keep-probabilities at the
/// original resolution and the ground-truth mask.
struct ThresholdCase {
  Volume<float> probabilities;
  MaskVolume truth;
};

struct ThresholdGrid {
  /// Log-spaced candidates between `min_tau` and 0.5, mirrored into (0.5, 1).
  double min_tau = 0.01;
  int points_per_side = 6;

  std::vector<double> candidates() const;
};

struct ThresholdSearchResult {
  double best_tau = 0.5;
  std::vector<std::pair<double, double>> table;  // (tau, mean dice)
};

/// Mean Dice at each candidate; the best candidate wins, ties go to the one
/// closest to 0.5.
ThresholdSearchResult threshold_search(const std::vector<ThresholdCase>& cases, const ThresholdGrid& grid = {});

}  // namespace vdf
