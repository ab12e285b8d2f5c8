#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "format_props.hpp"
#include "helpers.hpp"
#include "vdf/nifti.hpp"
#include "vdf/weights_io.hpp"

using namespace vdf;

namespace {

// Big-endian NIfTI-1 image built field by field from the published header
// layout, without going through the library encoder.
std::vector<std::uint8_t> big_endian_fixture(const Dims3& d, const std::vector<std::int16_t>& voxels,
                                             const std::array<float, 3>& spacing_whd) {
  std::vector<std::uint8_t> b(352 + 2 * voxels.size(), 0);
  auto put16 = [&](std::size_t off, std::int16_t v) {
    const auto u = static_cast<std::uint16_t>(v);
    b[off] = static_cast<std::uint8_t>(u >> 8);
    b[off + 1] = static_cast<std::uint8_t>(u & 0xff);
  };
  auto put32 = [&](std::size_t off, std::uint32_t u) {
    for (int i = 0; i < 4; ++i) b[off + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(u >> (24 - 8 * i));
  };
  auto putf = [&](std::size_t off, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put32(off, u);
  };
  put32(0, 348);                        // sizeof_hdr
  put16(40, 3);                         // dim[0]
  put16(42, static_cast<std::int16_t>(d.w));
  put16(44, static_cast<std::int16_t>(d.h));
  put16(46, static_cast<std::int16_t>(d.d));
  for (int i = 4; i < 8; ++i) put16(40 + 2 * static_cast<std::size_t>(i), 1);
  put16(70, 4);                         // datatype int16
  put16(72, 16);                        // bitpix
  putf(76, 1.0f);                       // pixdim[0] (qfac)
  for (int i = 0; i < 3; ++i) putf(80 + 4 * static_cast<std::size_t>(i), spacing_whd[static_cast<std::size_t>(i)]);
  putf(108, 352.0f);                    // vox_offset
  putf(112, 2.0f);                      // scl_slope
  putf(116, -1.0f);                     // scl_inter
  std::memcpy(&b[344], "n+1\0", 4);
  for (std::size_t i = 0; i < voxels.size(); ++i) put16(352 + 2 * i, voxels[i]);
  return b;
}

}  // namespace

TEST(Nifti, FourCubedFloatFileIs608Bytes) {
  const Volume<float> v({4, 4, 4}, {1.0f, 1.0f, 1.0f}, 0.5f);
  EXPECT_EQ(encode_nifti(v).size(), 608u);
  const auto dir = test::scratch_dir("nifti608");
  write_nifti(v, dir / "v.nii");
  EXPECT_EQ(std::filesystem::file_size(dir / "v.nii"), 608u);
}

TEST(Nifti, FileRoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  const auto v = test::random_bits_volume({5, 3, 7}, rng);
  const auto dir = test::scratch_dir("nifti-rt");
  write_nifti(v, dir / "v.nii");
  const auto back = read_nifti(dir / "v.nii");
  EXPECT_TRUE(test::bit_equal(back, v));
  EXPECT_EQ(back.spacing, v.spacing);
  EXPECT_FALSE(std::filesystem::exists(dir / "v.nii.tmp"));
}

TEST(Nifti, MaskRoundTripExact) {
  std::mt19937_64 rng(2);
  const auto m = test::random_mask({6, 5, 4}, rng);
  const auto dir = test::scratch_dir("nifti-mask");
  write_nifti(m, dir / "m.nii");
  EXPECT_TRUE(test::same_mask(read_mask(dir / "m.nii"), m));
}

TEST(Nifti, NonBinaryMaskFileRejected) {
  const Volume<float> v({2, 2, 2}, {1.0f, 1.0f, 1.0f}, 0.5f);
  const auto dir = test::scratch_dir("nifti-nonbinary");
  write_nifti(v, dir / "v.nii");
  EXPECT_THROW(read_mask(dir / "v.nii"), ValidationError);
}

TEST(Nifti, RepeatedWritesIdentical) {
  std::mt19937_64 rng(3);
  const auto v = test::random_volume({4, 5, 6}, rng);
  EXPECT_EQ(encode_nifti(v), encode_nifti(v));
}

TEST(Nifti, HeaderFieldsAtStandardOffsets) {
  const Volume<float> v({2, 3, 4}, {1.5f, 2.0f, 2.5f});
  const auto b = encode_nifti(v);
  std::int32_t sizeof_hdr;
  std::int16_t dim1, datatype;
  float vox_offset, slope, pixdim1;
  std::memcpy(&sizeof_hdr, &b[0], 4);
  std::memcpy(&dim1, &b[42], 2);
  std::memcpy(&datatype, &b[70], 2);
  std::memcpy(&pixdim1, &b[80], 4);
  std::memcpy(&vox_offset, &b[108], 4);
  std::memcpy(&slope, &b[112], 4);
  EXPECT_EQ(sizeof_hdr, 348);
  EXPECT_EQ(dim1, 4);  // width is NIfTI's first axis
  EXPECT_EQ(datatype, 16);
  EXPECT_EQ(pixdim1, 2.5f);
  EXPECT_EQ(vox_offset, 352.0f);
  EXPECT_EQ(slope, 1.0f);
  EXPECT_EQ(std::memcmp(&b[344], "n+1\0", 4), 0);
}

TEST(Nifti, ByteSwappedFixtureReadAsBigEndian) {
  const Dims3 d{2, 3, 4};
  std::vector<std::int16_t> vox(static_cast<std::size_t>(d.size()));
  for (std::size_t i = 0; i < vox.size(); ++i) vox[i] = static_cast<std::int16_t>(static_cast<int>(i) * 37 - 300);
  const auto bytes = big_endian_fixture(d, vox, {0.5f, 0.75f, 1.25f});
  const NiftiHeader h = parse_nifti_header(bytes);
  EXPECT_TRUE(h.big_endian);
  EXPECT_NE(h.describe().find("big"), std::string::npos);
  const auto v = decode_nifti(bytes);
  EXPECT_EQ(v.dims, d);
  EXPECT_EQ(v.spacing, Eigen::Vector3f(1.25f, 0.75f, 0.5f));
  for (std::size_t i = 0; i < vox.size(); ++i) EXPECT_EQ(v.data[static_cast<Index>(i)], 2.0f * vox[i] - 1.0f);
}

TEST(Nifti, BadMagicNamesOffset344) {
  auto b = encode_nifti(Volume<float>({2, 2, 2}, {1.0f, 1.0f, 1.0f}));
  std::memcpy(&b[344], "abcd", 4);
  try {
    decode_nifti(b);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 344u);
    EXPECT_NE(std::string(e.what()).find("344"), std::string::npos);
  }
}

TEST(Nifti, UnsupportedDatatypeNamesOffset70) {
  auto b = encode_nifti(Volume<float>({2, 2, 2}, {1.0f, 1.0f, 1.0f}));
  const std::int16_t float64 = 64;
  std::memcpy(&b[70], &float64, 2);
  try {
    decode_nifti(b);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 70u);
  }
}

TEST(Nifti, TruncatedPayloadRejected) {
  auto b = encode_nifti(Volume<float>({2, 2, 2}, {1.0f, 1.0f, 1.0f}));
  b.pop_back();
  EXPECT_THROW(decode_nifti(b), ParseError);
}

TEST(Nifti, OversizedExtentNamesAxis) {
  try {
    encode_nifti(MaskVolume({1, 40000, 1}, {1.0f, 1.0f, 1.0f}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "H");
  }
}

TEST(Nifti, MissingFileIsIoError) {
  EXPECT_THROW(read_nifti("/nonexistent/vdf/none.nii"), IoError);
}

TEST(Weights, FileRoundTripBitExact) {
  const auto store = build_model<float>(ModelConfig::with_filters(Variant::Baseline, {2, 4, 8, 16}), 9);
  const auto dir = test::scratch_dir("weights");
  save_weights(store, dir / "m.vdfw");
  const auto back = load_weights(dir / "m.vdfw");
  EXPECT_TRUE(back.bit_equal(store));
}

TEST(Weights, FlippedPayloadByteIsChecksumError) {
  std::mt19937_64 rng(4);
  auto b = encode_weights(test::random_store(rng, 3));
  b[b.size() - 10] ^= 0x01;
  EXPECT_THROW(decode_weights(b), ChecksumError);
}

TEST(Weights, UnknownVersionIsVersionError) {
  std::mt19937_64 rng(5);
  auto b = encode_weights(test::random_store(rng, 2));
  const std::uint32_t v = kWeightsVersion + 1;
  std::memcpy(&b[4], &v, 4);
  const std::uint32_t crc = crc32_of(std::span<const std::uint8_t>(b.data(), b.size() - 4));
  std::memcpy(&b[b.size() - 4], &crc, 4);
  EXPECT_THROW(decode_weights(b), VersionError);
}

TEST(Weights, EmptyStoreHasZeroEntries) {
  const auto b = encode_weights(WeightStore<float>{});
  std::uint32_t count;
  std::memcpy(&count, &b[12], 4);
  EXPECT_EQ(count, 0u);
  EXPECT_EQ(b.size(), 20u);
  EXPECT_TRUE(decode_weights(b).empty());
}

TEST(Weights, Crc32KnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())),
            0xCBF43926u);
}

TEST(FormatProperties, RoundTripsAndFuzz) {
  for (const auto& p : test::format_property_suite(77, 300, 10000)) {
    EXPECT_TRUE(p.passed()) << p.name << ": " << p.failures << " of " << p.cases << ", first " << p.first_failure;
  }
}
