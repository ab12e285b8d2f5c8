#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <string>

#include "vdf/tensor.hpp"

namespace vdf {

/// Voxel counts along (depth, height, width); width is the fastest axis.
struct Dims3 {
  Index d = 0, h = 0, w = 0;

  constexpr Index size() const { return d * h * w; }
  constexpr Index operator[](int a) const { return a == 0 ? d : (a == 1 ? h : w); }
  constexpr bool operator==(const Dims3&) const = default;
  std::string str() const { return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w); }
};

/// 3D scalar grid with physical metadata.
///
/// `affine` maps NIfTI voxel indices (i, j, k) = (w, h, d) to world
/// millimetres and is carried through processing untouched.  `orientation`
/// names the world direction that each of (d, h, w) increases toward.
/// Voxel-to-world transform as stored in a NIfTI sform (float32 rows).
using Affine = Eigen::Matrix<float, 3, 4>;

template <typename T>
struct Volume {
  using Storage = Eigen::Array<T, Eigen::Dynamic, 1>;

  Dims3 dims;
  Eigen::Vector3f spacing{1.0f, 1.0f, 1.0f};  // mm along (d, h, w)
  Affine affine = default_affine({1.0f, 1.0f, 1.0f});
  std::array<char, 3> orientation{'S', 'A', 'R'};
  Storage data;

  Volume() = default;
  Volume(Dims3 dims_, Eigen::Vector3f spacing_, T fill = T(0))
      : dims(dims_), spacing(spacing_), affine(default_affine(spacing_)), data(Storage::Constant(dims_.size(), fill)) {
    validate();
  }

  static Affine default_affine(const Eigen::Vector3f& sp) {
    Affine a = Affine::Zero();
    a(0, 0) = sp[2];
    a(1, 1) = sp[1];
    a(2, 2) = sp[0];
    return a;
  }

  Index index(Index d, Index h, Index w) const { return (d * dims.h + h) * dims.w + w; }
  T& at(Index d, Index h, Index w) { return data[index(d, h, w)]; }
  T at(Index d, Index h, Index w) const { return data[index(d, h, w)]; }

  void validate() const {
    if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw DimensionError("dims", "volume extents must be >= 1");
    if (!(spacing.array() > 0.0f).all()) throw ValidationError("voxel spacing must be positive");
    if (data.size() != dims.size())
      throw DimensionError("data", "buffer length does not match " + dims.str());
  }

  /// Same geometry, different payload type, zero-filled.
  template <typename U>
  Volume<U> like(U fill = U(0)) const {
    Volume<U> v;
    v.dims = dims;
    v.spacing = spacing;
    v.affine = affine;
    v.orientation = orientation;
    v.data = Eigen::Array<U, Eigen::Dynamic, 1>::Constant(dims.size(), fill);
    return v;
  }

  /// View as a (1, 1, D, H, W) tensor.
  template <typename S = float>
  Tensor5<S> to_tensor() const {
    return Tensor5<S>(Shape5(1, 1, dims.d, dims.h, dims.w), data.template cast<S>());
  }
};

/// Binary mask: 0 marks voxels to deface, 1 voxels to keep.
using MaskVolume = Volume<std::uint8_t>;

template <typename T>
void require_same_dims(const Volume<T>& a, const Dims3& b, const std::string& context) {
  if (a.dims.d != b.d) throw DimensionError("D", context + ": " + a.dims.str() + " vs " + b.str());
  if (a.dims.h != b.h) throw DimensionError("H", context + ": " + a.dims.str() + " vs " + b.str());
  if (a.dims.w != b.w) throw DimensionError("W", context + ": " + a.dims.str() + " vs " + b.str());
}

inline bool is_binary(const MaskVolume& m) { return (m.data <= std::uint8_t(1)).all(); }

/// Orientation letters implied by an affine (dominant world axis per voxel axis).
std::array<char, 3> orientation_from_affine(const Affine& affine);

}  // namespace vdf
