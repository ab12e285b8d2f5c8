#include "vdf/weights_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <string>

#include "vdf/nifti.hpp"

namespace vdf {

static_assert(std::endian::native == std::endian::little, "weights codec assumes a little-endian host");

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 4);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

class Cursor {
 public:
  Cursor(std::span<const std::uint8_t> b, std::size_t end) : bytes_(b), end_(end) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw ParseError(pos_, "weights file truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - done, 1u << 30);
    crc = crc32(crc, bytes.data() + done, static_cast<uInt>(n));
    done += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_weights(const WeightStore<float>& store) {
  std::vector<std::uint8_t> out{'V', 'D', 'F', 'W'};
  put_u32(out, kWeightsVersion);
  put_u32(out, static_cast<std::uint32_t>(store.variant));
  put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, 5);
    for (std::size_t i = 0; i < 5; ++i) put_u32(out, static_cast<std::uint32_t>(e.value.shape().dims[i]));
    const auto* p = reinterpret_cast<const std::uint8_t*>(e.value.raw());
    out.insert(out.end(), p, p + sizeof(float) * static_cast<std::size_t>(e.value.size()));
  }
  put_u32(out, crc32_of(out));
  return out;
}

WeightStore<float> decode_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 20) throw ParseError(bytes.size(), "weights file shorter than its fixed header");
  if (std::memcmp(bytes.data(), "VDFW", 4) != 0) throw ParseError(0, "bad weights magic, expected \"VDFW\"");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (crc32_of(bytes.first(body)) != stored) throw ChecksumError("weights file CRC32 mismatch (corrupted file)");

  Cursor c(bytes, body);
  c.take(4);
  const std::uint32_t version = c.u32();
  if (version != kWeightsVersion)
    throw VersionError("weights format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kWeightsVersion) + ")");
  const std::uint32_t variant = c.u32();
  if (variant > static_cast<std::uint32_t>(Variant::Baseline))
    throw ParseError(8, "unknown model variant tag " + std::to_string(variant));
  WeightStore<float> store;
  store.variant = static_cast<Variant>(variant);
  const std::uint32_t count = c.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = c.u32();
    const std::size_t name_at = c.pos();
    const auto* np = c.take(len);
    std::string name(reinterpret_cast<const char*>(np), len);
    if (name.empty()) throw ParseError(name_at, "empty parameter name");
    const std::size_t rank_at = c.pos();
    if (c.u32() != 5) throw ParseError(rank_at, "parameter rank must be 5");
    Shape5 shape;
    std::uint64_t elems = 1;
    for (std::size_t i = 0; i < 5; ++i) {
      shape.dims[i] = c.u32();
      elems *= static_cast<std::uint64_t>(shape.dims[i]);
      if (elems > body) throw ParseError(rank_at, "parameter dims exceed file size");
    }
    const auto* payload = c.take(static_cast<std::size_t>(elems) * sizeof(float));
    Tensor5<float> t(shape);
    std::memcpy(t.raw(), payload, static_cast<std::size_t>(elems) * sizeof(float));
    const bool trainable = !(ends_with(name, ".running_mean") || ends_with(name, ".running_var"));
    if (store.contains(name)) throw ParseError(name_at, "duplicate parameter name '" + name + "'");
    store.add(std::move(name), std::move(t), trainable);
  }
  if (c.pos() != body) throw ParseError(c.pos(), "trailing bytes after the last entry");
  return store;
}

void save_weights(const WeightStore<float>& store, const std::filesystem::path& path) {
  write_file_atomic(path, encode_weights(store));
}

WeightStore<float> load_weights(const std::filesystem::path& path) { return decode_weights(read_file(path)); }

}  // namespace vdf
