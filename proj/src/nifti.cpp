#include "vdf/nifti.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace vdf {

namespace {

// Header field offsets from the NIfTI-1 layout.
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffDescrip = 148;
constexpr std::size_t kOffQformCode = 252;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffQuatern = 256;
constexpr std::size_t kOffQoffset = 268;
constexpr std::size_t kOffSrow = 280;
constexpr std::size_t kOffMagic = 344;

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, bool swap) : bytes_(b), swap_(swap) {}

  template <typename T>
  T get(std::size_t off) const {
    if (off + sizeof(T) > bytes_.size()) throw ParseError(off, "read past end of buffer");
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + off, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  bool swap_;
};

class Writer {
 public:
  explicit Writer(std::size_t size) : bytes_(size, 0) {}

  template <typename T>
  void put(std::size_t off, T v) {
    static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
    std::memcpy(bytes_.data() + off, &v, sizeof(T));
  }
  void put_bytes(std::size_t off, const char* s, std::size_t n) { std::memcpy(bytes_.data() + off, s, n); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

int bits_for(std::int16_t datatype) {
  switch (datatype) {
    case static_cast<std::int16_t>(NiftiType::UInt8):
      return 8;
    case static_cast<std::int16_t>(NiftiType::Int16):
      return 16;
    case static_cast<std::int16_t>(NiftiType::Float32):
      return 32;
    default:
      return 0;
  }
}

// Rotation from the quaternion (b, c, d) with a = sqrt(1 - b^2 - c^2 - d^2).
Affine qform_affine(const NiftiHeader& h) {
  const double b = h.quatern[0], c = h.quatern[1], d = h.quatern[2];
  const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
  Eigen::Matrix3d r;
  r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),  //
      2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),    //
      2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
  const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
  Affine out;
  for (int row = 0; row < 3; ++row) {
    out(row, 0) = static_cast<float>(r(row, 0) * h.pixdim[1]);
    out(row, 1) = static_cast<float>(r(row, 1) * h.pixdim[2]);
    out(row, 2) = static_cast<float>(r(row, 2) * h.pixdim[3] * qfac);
    out(row, 3) = h.qoffset[static_cast<std::size_t>(row)];
  }
  return out;
}

}  // namespace

std::uint64_t NiftiHeader::voxel_bytes() const {
  const Dims3 d = dims();
  return static_cast<std::uint64_t>(d.size()) * static_cast<std::uint64_t>(bitpix / 8);
}

std::string NiftiHeader::describe() const {
  std::ostringstream os;
  os << "byte order: " << (big_endian ? "big-endian (byte-swapped)" : "little-endian") << "\n";
  os << "magic: \"" << std::string(magic.data(), strnlen(magic.data(), 4)) << "\\0\" (offset 344)\n";
  os << "dim:";
  for (auto v : dim) os << " " << v;
  os << "\n";
  const Dims3 d = dims();
  os << "volume (d x h x w): " << d.str() << "\n";
  os << "datatype: " << datatype << " ("
     << (datatype == 2 ? "uint8" : datatype == 4 ? "int16" : datatype == 16 ? "float32" : "unsupported")
     << "), bitpix " << bitpix << "\n";
  os << std::setprecision(9) << "pixdim:";
  for (auto v : pixdim) os << " " << v;
  os << "\n";
  os << "spacing mm (d, h, w): " << pixdim[3] << " " << pixdim[2] << " " << pixdim[1] << "\n";
  os << "vox_offset: " << vox_offset << "\n";
  os << "scl_slope: " << scl_slope << "  scl_inter: " << scl_inter << "\n";
  os << "qform_code: " << qform_code << "  sform_code: " << sform_code << "\n";
  for (int r = 0; r < 3; ++r) {
    os << "srow_" << "xyz"[r] << ":";
    for (int c = 0; c < 4; ++c) os << " " << srow(r, c);
    os << "\n";
  }
  return os.str();
}

NiftiHeader parse_nifti_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < static_cast<std::size_t>(kNiftiHeaderSize))
    throw ParseError(bytes.size(), "truncated header: " + std::to_string(bytes.size()) + " of 348 bytes");
  NiftiHeader h;
  const std::int32_t le = Reader(bytes, false).get<std::int32_t>(0);
  if (le == kNiftiHeaderSize) {
    h.big_endian = false;
  } else if (__builtin_bswap32(static_cast<std::uint32_t>(le)) == static_cast<std::uint32_t>(kNiftiHeaderSize)) {
    h.big_endian = true;
  } else {
    throw ParseError(0, "sizeof_hdr is " + std::to_string(le) + " in either byte order, expected 348");
  }
  const Reader r(bytes, h.big_endian != (std::endian::native == std::endian::big));

  std::memcpy(h.magic.data(), bytes.data() + kOffMagic, 4);
  const std::string magic(h.magic.data(), 4);
  if (magic == std::string("ni1\0", 4))
    throw ParseError(kOffMagic, "two-file NIfTI (.hdr/.img) is not supported");
  if (magic != std::string("n+1\0", 4)) throw ParseError(kOffMagic, "bad magic, expected \"n+1\\0\"");

  for (std::size_t i = 0; i < 8; ++i) h.dim[i] = r.get<std::int16_t>(kOffDim + 2 * i);
  if (h.dim[0] < 1 || h.dim[0] > 7) throw ParseError(kOffDim, "dim[0] = " + std::to_string(h.dim[0]));
  for (std::int16_t i = 1; i <= 7; ++i) {
    const std::size_t off = kOffDim + 2 * static_cast<std::size_t>(i);
    if (i > h.dim[0]) {
      h.dim[static_cast<std::size_t>(i)] = 1;
      continue;
    }
    if (h.dim[static_cast<std::size_t>(i)] < 1) throw ParseError(off, "non-positive extent in dim[" + std::to_string(i) + "]");
    if (i > 3 && h.dim[static_cast<std::size_t>(i)] != 1)
      throw ParseError(off, "only 3D volumes are supported (dim[" + std::to_string(i) + "] > 1)");
  }

  h.datatype = r.get<std::int16_t>(kOffDatatype);
  const int bits = bits_for(h.datatype);
  if (bits == 0) throw ParseError(kOffDatatype, "unsupported datatype " + std::to_string(h.datatype));
  h.bitpix = r.get<std::int16_t>(kOffBitpix);
  if (h.bitpix != bits) throw ParseError(kOffBitpix, "bitpix " + std::to_string(h.bitpix) + " does not match datatype");

  for (std::size_t i = 0; i < 8; ++i) h.pixdim[i] = r.get<float>(kOffPixdim + 4 * i);
  for (std::size_t i = 1; i <= 3; ++i)
    if (!std::isfinite(h.pixdim[i]) || h.pixdim[i] == 0.0f)
      throw ParseError(kOffPixdim + 4 * i, "voxel spacing must be finite and non-zero");

  h.vox_offset = r.get<float>(kOffVoxOffset);
  if (!std::isfinite(h.vox_offset) || h.vox_offset < static_cast<float>(kNiftiVoxOffset) ||
      h.vox_offset != std::floor(h.vox_offset) || h.vox_offset > 1e12f)
    throw ParseError(kOffVoxOffset, "vox_offset must be an integer >= 352");
  h.scl_slope = r.get<float>(kOffSclSlope);
  h.scl_inter = r.get<float>(kOffSclInter);
  h.qform_code = r.get<std::int16_t>(kOffQformCode);
  h.sform_code = r.get<std::int16_t>(kOffSformCode);
  for (std::size_t i = 0; i < 3; ++i) {
    h.quatern[i] = r.get<float>(kOffQuatern + 4 * i);
    h.qoffset[i] = r.get<float>(kOffQoffset + 4 * i);
  }
  for (int row = 0; row < 3; ++row)
    for (int c = 0; c < 4; ++c)
      h.srow(row, c) = r.get<float>(kOffSrow + 16 * static_cast<std::size_t>(row) + 4 * static_cast<std::size_t>(c));
  return h;
}

Volume<float> decode_nifti(std::span<const std::uint8_t> bytes) {
  const NiftiHeader h = parse_nifti_header(bytes);
  const std::uint64_t start = static_cast<std::uint64_t>(h.vox_offset);
  const std::uint64_t need = h.voxel_bytes();
  if (start > bytes.size() || bytes.size() - start < need)
    throw ParseError(bytes.size(), "truncated voxel data: need " + std::to_string(need) + " bytes from offset " +
                                       std::to_string(start) + ", file has " + std::to_string(bytes.size()));

  Volume<float> v;
  v.dims = h.dims();
  v.spacing = Eigen::Vector3f(std::abs(h.pixdim[3]), std::abs(h.pixdim[2]), std::abs(h.pixdim[1]));
  if (h.sform_code > 0)
    v.affine = h.srow;
  else if (h.qform_code > 0)
    v.affine = qform_affine(h);
  else
    v.affine = Volume<float>::default_affine(v.spacing);
  if (!v.affine.allFinite()) v.affine = Volume<float>::default_affine(v.spacing);
  v.orientation = orientation_from_affine(v.affine);

  const Reader r(bytes, h.big_endian != (std::endian::native == std::endian::big));
  const Index n = v.dims.size();
  v.data.resize(n);
  const std::size_t base = static_cast<std::size_t>(start);
  switch (static_cast<NiftiType>(h.datatype)) {
    case NiftiType::UInt8:
      for (Index i = 0; i < n; ++i) v.data[i] = static_cast<float>(bytes[base + static_cast<std::size_t>(i)]);
      break;
    case NiftiType::Int16:
      for (Index i = 0; i < n; ++i) v.data[i] = static_cast<float>(r.get<std::int16_t>(base + 2 * static_cast<std::size_t>(i)));
      break;
    case NiftiType::Float32:
      for (Index i = 0; i < n; ++i) v.data[i] = r.get<float>(base + 4 * static_cast<std::size_t>(i));
      break;
  }
  if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && std::isfinite(h.scl_inter) &&
      !(h.scl_slope == 1.0f && h.scl_inter == 0.0f))
    v.data = v.data * h.scl_slope + h.scl_inter;
  return v;
}

namespace {

std::vector<std::uint8_t> encode_header(const Dims3& d, const Eigen::Vector3f& spacing, const Affine& affine,
                                        NiftiType type, std::size_t payload) {
  for (int a = 0; a < 3; ++a)
    if (d[a] < 1 || d[a] > std::numeric_limits<std::int16_t>::max())
      throw DimensionError(std::string(1, "DHW"[a]),
                           "extent " + std::to_string(d[a]) + " cannot be encoded in NIfTI-1 (max 32767)");
  Writer w(static_cast<std::size_t>(kNiftiVoxOffset) + payload);
  w.put<std::int32_t>(0, kNiftiHeaderSize);
  w.put<char>(38, 'r');
  const std::int16_t dims[8] = {3, static_cast<std::int16_t>(d.w), static_cast<std::int16_t>(d.h),
                                static_cast<std::int16_t>(d.d), 1, 1, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) w.put<std::int16_t>(kOffDim + 2 * i, dims[i]);
  w.put<std::int16_t>(kOffDatatype, static_cast<std::int16_t>(type));
  w.put<std::int16_t>(kOffBitpix, static_cast<std::int16_t>(bits_for(static_cast<std::int16_t>(type))));
  const float pixdim[8] = {1.0f, spacing[2], spacing[1], spacing[0], 0.0f, 0.0f, 0.0f, 0.0f};
  for (std::size_t i = 0; i < 8; ++i) w.put<float>(kOffPixdim + 4 * i, pixdim[i]);
  w.put<float>(kOffVoxOffset, static_cast<float>(kNiftiVoxOffset));
  w.put<float>(kOffSclSlope, 1.0f);
  w.put<float>(kOffSclInter, 0.0f);
  w.put<std::uint8_t>(kOffXyztUnits, 2);  // millimetres
  w.put_bytes(kOffDescrip, "voxdeface", 9);
  w.put<std::int16_t>(kOffQformCode, 0);
  w.put<std::int16_t>(kOffSformCode, 1);
  for (int row = 0; row < 3; ++row)
    for (int c = 0; c < 4; ++c)
      w.put<float>(kOffSrow + 16 * static_cast<std::size_t>(row) + 4 * static_cast<std::size_t>(c), affine(row, c));
  w.put_bytes(kOffMagic, "n+1\0", 4);
  return std::move(w.bytes());
}

}  // namespace

std::vector<std::uint8_t> encode_nifti(const Volume<float>& v, NiftiType type) {
  v.validate();
  const std::size_t n = static_cast<std::size_t>(v.dims.size());
  const std::size_t width = static_cast<std::size_t>(bits_for(static_cast<std::int16_t>(type)) / 8);
  if (width == 0) throw ValidationError("unsupported NIfTI datatype");
  std::vector<std::uint8_t> out = encode_header(v.dims, v.spacing, v.affine, type, n * width);
  std::uint8_t* dst = out.data() + kNiftiVoxOffset;
  for (std::size_t i = 0; i < n; ++i) {
    const float x = v.data[static_cast<Index>(i)];
    switch (type) {
      case NiftiType::UInt8: {
        const auto u = static_cast<std::uint8_t>(std::clamp(std::nearbyint(x), 0.0f, 255.0f));
        dst[i] = u;
        break;
      }
      case NiftiType::Int16: {
        const auto s = static_cast<std::int16_t>(std::clamp(std::nearbyint(x), -32768.0f, 32767.0f));
        std::memcpy(dst + 2 * i, &s, 2);
        break;
      }
      case NiftiType::Float32:
        std::memcpy(dst + 4 * i, &x, 4);
        break;
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_nifti(const MaskVolume& m) {
  m.validate();
  if (!is_binary(m)) throw ValidationError("mask contains values other than 0 and 1");
  const std::size_t n = static_cast<std::size_t>(m.dims.size());
  std::vector<std::uint8_t> out = encode_header(m.dims, m.spacing, m.affine, NiftiType::UInt8, n);
  std::memcpy(out.data() + kNiftiVoxOffset, m.data.data(), n);
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("failed writing '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "'");
  }
}

Volume<float> read_nifti(const std::filesystem::path& path) { return decode_nifti(read_file(path)); }

MaskVolume read_mask(const std::filesystem::path& path) {
  const Volume<float> v = read_nifti(path);
  MaskVolume m = v.like<std::uint8_t>();
  for (Index i = 0; i < v.data.size(); ++i) {
    if (v.data[i] != 0.0f && v.data[i] != 1.0f)
      throw ValidationError("'" + path.string() + "' is not a binary mask (voxel " + std::to_string(i) + ")");
    m.data[i] = v.data[i] == 1.0f ? 1 : 0;
  }
  return m;
}

void write_nifti(const Volume<float>& v, const std::filesystem::path& path, NiftiType type) {
  write_file_atomic(path, encode_nifti(v, type));
}

void write_nifti(const MaskVolume& m, const std::filesystem::path& path) { write_file_atomic(path, encode_nifti(m)); }

}  // namespace vdf
