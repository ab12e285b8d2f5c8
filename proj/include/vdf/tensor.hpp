#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>

#include "vdf/error.hpp"

namespace vdf {

using Index = std::int64_t;

/// Extents of a rank-5 tensor in (N, C, D, H, W) order.
struct Shape5 {
  std::array<Index, 5> dims{0, 0, 0, 0, 0};

  constexpr Shape5() = default;
  constexpr Shape5(Index n, Index c, Index d, Index h, Index w) : dims{n, c, d, h, w} {}

  constexpr Index n() const { return dims[0]; }
  constexpr Index c() const { return dims[1]; }
  constexpr Index d() const { return dims[2]; }
  constexpr Index h() const { return dims[3]; }
  constexpr Index w() const { return dims[4]; }
  constexpr Index operator[](std::size_t i) const { return dims[i]; }

  constexpr Index spatial() const { return dims[2] * dims[3] * dims[4]; }
  constexpr Index size() const { return dims[0] * dims[1] * spatial(); }

  constexpr bool operator==(const Shape5&) const = default;

  std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < 5; ++i) s += std::to_string(dims[i]) + (i < 4 ? "," : ")");
    return s;
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape5& s) { return os << s.str(); }

inline constexpr std::array<const char*, 5> kAxisNames{"N", "C", "D", "H", "W"};

/// Dense row-major (N,C,D,H,W) tensor with an optional gradient buffer.
template <typename Scalar_>
class Tensor5 {
 public:
  using Scalar = Scalar_;
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor5() = default;
  explicit Tensor5(const Shape5& shape) : shape_(shape), data_(Storage::Zero(shape.size())) {
    for (std::size_t i = 0; i < 5; ++i)
      if (shape.dims[i] < 0) throw DimensionError(kAxisNames[i], "negative extent");
  }
  Tensor5(const Shape5& shape, Storage data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw DimensionError("data", "buffer length " + std::to_string(data_.size()) +
                                       " does not match shape " + shape_.str());
  }

  static Tensor5 Zero(const Shape5& shape) { return Tensor5(shape); }
  static Tensor5 Constant(const Shape5& shape, Scalar v) {
    Tensor5 t(shape);
    t.data_.setConstant(v);
    return t;
  }

  const Shape5& shape() const { return shape_; }
  Index size() const { return shape_.size(); }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Index offset(Index n, Index c, Index d, Index h, Index w) const {
    return (((n * shape_.c() + c) * shape_.d() + d) * shape_.h() + h) * shape_.w() + w;
  }
  Scalar& operator()(Index n, Index c, Index d, Index h, Index w) { return data_[offset(n, c, d, h, w)]; }
  Scalar operator()(Index n, Index c, Index d, Index h, Index w) const { return data_[offset(n, c, d, h, w)]; }

  /// Pointer to the first voxel of one (n, c) channel volume.
  Scalar* channel(Index n, Index c) { return raw() + (n * shape_.c() + c) * shape_.spatial(); }
  const Scalar* channel(Index n, Index c) const { return raw() + (n * shape_.c() + c) * shape_.spatial(); }

  bool has_grad() const { return grad_.has_value(); }
  Storage& grad() {
    if (!grad_) grad_ = Storage::Zero(data_.size());
    return *grad_;
  }
  const Storage& grad() const {
    if (!grad_) throw UsageError("tensor has no gradient buffer");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }
  void drop_grad() { grad_.reset(); }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor5<Other> cast() const {
    return Tensor5<Other>(shape_, data_.template cast<Other>());
  }

 private:
  Shape5 shape_{};
  Storage data_{};
  std::optional<Storage> grad_{};
};

/// Throws a DimensionError naming the first axis on which two shapes differ,
/// skipping the axes whose bit is set in `ignore_mask`.
inline void require_same_shape(const Shape5& a, const Shape5& b, const std::string& context,
                               unsigned ignore_mask = 0) {
  for (std::size_t i = 0; i < 5; ++i) {
    if (ignore_mask & (1u << i)) continue;
    if (a.dims[i] != b.dims[i])
      throw DimensionError(kAxisNames[i], context + ": " + a.str() + " vs " + b.str());
  }
}

}  // namespace vdf
