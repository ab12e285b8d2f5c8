#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vdf/unet.hpp"

namespace vdf {

inline constexpr std::uint32_t kWeightsVersion = 1;

/// Binary layout, little-endian throughout:
///   "VDFW" | u32 version | u32 variant | u32 entry count |
///   per entry: u32 name length, name bytes, u32 rank, rank x u32 dims,
///              float32 payload |
///   u32 CRC32 of every preceding byte.
std::vector<std::uint8_t> encode_weights(const WeightStore<float>& store);
/// Verifies the checksum before trusting any length field.  Entries named
/// `*.running_mean` / `*.running_var` load as non-trainable.
WeightStore<float> decode_weights(std::span<const std::uint8_t> bytes);

void save_weights(const WeightStore<float>& store, const std::filesystem::path& path);
WeightStore<float> load_weights(const std::filesystem::path& path);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace vdf
