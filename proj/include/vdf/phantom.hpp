#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vdf/volume.hpp"

namespace vdf {

/// Acquisition setup: voxel counts and spacing.
struct Protocol {
  Dims3 dims;
  Eigen::Vector3f spacing{1.0f, 1.0f, 1.0f};

  std::string id() const;
  bool operator==(const Protocol& o) const { return dims == o.dims && spacing == o.spacing; }
};

/// Built-in protocol ladder, from 32^3 at 2 mm up to 96x96x64.  Requests for
/// more than the built-in ten are filled with generated variations.
std::vector<Protocol> default_protocols(std::size_t count);

/// Synthetic head.  The head is an ellipsoid whose semi-axes are fractions of
/// the half field of view along (d, h, w); d runs inferior to superior and h
/// posterior to anterior.  A nose sphere protrudes anteriorly and inferiorly.
/// Shape parameters below are in head-normalised units (head surface at 1).
struct PhantomSpec {
  Protocol protocol{{48, 48, 48}, {1.5f, 1.5f, 1.5f}};
  Eigen::Vector3d radius_fraction{0.76, 0.66, 0.56};
  Eigen::Vector3d centre_offset{0.0, 0.0, 0.0};  // voxels, relative to the volume centre
  Eigen::Vector3d pose_deg{0.0, 0.0, 0.0};       // head rotation about the d, h, w axes
  Eigen::Vector2d nose_centre{-0.30, 0.95};      // (d, h) in head units, w = 0
  double nose_radius = 0.18;
  /// Defaced region: anterior voxels with h - slope * d above this offset.
  double face_offset = 0.42;
  double face_slope = 0.5;
  double dilation = 0.05;
  double texture_amplitude = 0.08;
  std::uint64_t seed = 0;

  /// Default anatomy with per-seed jitter of size, position, pose and face.
  static PhantomSpec sample(const Protocol& protocol, std::uint64_t seed);
};

/// Head pose in physical space, shared by the generator and both oracles.
struct HeadFrame {
  Eigen::Vector3d centre;   // voxel index coordinates
  Eigen::Matrix3d axes;     // columns: head d, h, w directions in (d, h, w) millimetres
  Eigen::Vector3d semi_mm;  // semi-axes in millimetres
};

HeadFrame head_frame(const PhantomSpec& spec);

struct Phantom {
  Volume<float> image;
  MaskVolume mask;
};

/// Textured head with intensities in (0.2, 1] on the foreground and 0 outside,
/// paired with the oracle mask.  Throws ConfigError when the head comes within
/// two voxels of the field-of-view border.
Phantom generate_phantom(const PhantomSpec& spec);

/// Oracle mask from known geometry: 0 on foreground voxels inside the dilated
/// face region, 1 elsewhere.
MaskVolume oracle_deface(const Volume<float>& image, const PhantomSpec& spec);

/// Oracle mask for an image with unknown geometry.  The head frame is
/// re-estimated from the foreground (intensity above `foreground_level`):
/// centroid, principal axes matched to the nearest voxel axes, and semi-axes
/// from second moments.  Throws EmptyInputError on an empty foreground.
MaskVolume oracle_deface_estimated(const Volume<float>& image, const PhantomSpec& shape = {},
                                   double foreground_level = 0.1);

// ---------------------------------------------------------------------------

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestRow {
  std::string id;
  std::string image;  // relative to the corpus root
  std::string mask;
  std::string protocol;
  Split split = Split::Train;
};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

/// Protocol counts for 80/10/10-style fractions: val and test get
/// floor(n * fraction) but at least one each, train gets the rest.
SplitCounts split_counts(std::size_t protocols, double val_fraction = 0.1, double test_fraction = 0.1);

struct DatasetManifest {
  std::vector<ManifestRow> rows;
  std::uint64_t seed = 0;

  std::vector<ManifestRow> split(Split s) const;
  std::vector<std::string> protocols(Split s) const;
  std::string to_jsonl() const;
  static DatasetManifest from_jsonl(const std::string& text);
};

struct ManifestOptions {
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  std::optional<SplitCounts> counts;  // explicit per-split protocol counts
};

/// Shuffles the distinct protocols with `seed` and deals them to train, val
/// and test, so no protocol straddles splits.  Throws ConfigError for fewer
/// than three protocols or counts that do not add up.
DatasetManifest build_manifest(std::vector<ManifestRow> rows, std::uint64_t seed, const ManifestOptions& opt = {});

struct CorpusOptions {
  std::size_t count = 60;
  std::size_t protocols = 10;
  std::uint64_t seed = 0;
  ManifestOptions manifest;
};

/// Writes images/<id>.nii, masks/<id>.nii and manifest.jsonl under `root`.
/// Phantom i uses protocol i mod K and a seed derived from (seed, i).
DatasetManifest make_corpus(const std::filesystem::path& root, const CorpusOptions& opt);
DatasetManifest read_manifest(const std::filesystem::path& root);

inline constexpr const char* kManifestFile = "manifest.jsonl";

}  // namespace vdf
