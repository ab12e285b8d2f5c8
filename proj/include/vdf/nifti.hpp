#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vdf/volume.hpp"

namespace vdf {

enum class NiftiType : std::int16_t { UInt8 = 2, Int16 = 4, Float32 = 16 };

inline constexpr std::int32_t kNiftiHeaderSize = 348;
inline constexpr std::int32_t kNiftiVoxOffset = 352;

/// Decoded NIfTI-1 header fields used by the toolkit.
struct NiftiHeader {
  bool big_endian = false;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 0.0f;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 3> quatern{};  // b, c, d
  std::array<float, 3> qoffset{};
  Affine srow = Affine::Zero();
  std::array<char, 4> magic{};

  Dims3 dims() const { return {dim[3], dim[2], dim[1]}; }
  std::uint64_t voxel_bytes() const;
  std::string describe() const;
};

/// Parses and validates the 348-byte header.  Errors carry the offending
/// byte offset.
NiftiHeader parse_nifti_header(std::span<const std::uint8_t> bytes);

/// Decodes a single-file NIfTI-1 image; voxel values are scaled by
/// scl_slope / scl_inter when the slope is non-zero.
Volume<float> decode_nifti(std::span<const std::uint8_t> bytes);

/// Little-endian single-file image with vox_offset 352, the volume's affine as
/// sform and unit slope.
std::vector<std::uint8_t> encode_nifti(const Volume<float>& v, NiftiType type = NiftiType::Float32);
std::vector<std::uint8_t> encode_nifti(const MaskVolume& m);

Volume<float> read_nifti(const std::filesystem::path& path);
/// Reads a volume whose voxels must all be exactly 0 or 1.
MaskVolume read_mask(const std::filesystem::path& path);
void write_nifti(const Volume<float>& v, const std::filesystem::path& path, NiftiType type = NiftiType::Float32);
void write_nifti(const MaskVolume& m, const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace vdf
