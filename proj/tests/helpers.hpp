#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "vdf/tensor.hpp"
#include "vdf/volume.hpp"

namespace vdf::test {

template <typename S>
Tensor5<S> random_tensor(const Shape5& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor5<S> t(shape);
  for (Index i = 0; i < t.size(); ++i) t.raw()[i] = static_cast<S>(u(rng));
  return t;
}

inline Dims3 random_dims(std::mt19937_64& rng, Index lo = 1, Index hi = 12) {
  std::uniform_int_distribution<Index> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

inline Volume<float> random_volume(const Dims3& dims, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::uniform_real_distribution<double> sp(0.5, 2.0);
  Volume<float> v(dims, Eigen::Vector3f(static_cast<float>(sp(rng)), static_cast<float>(sp(rng)),
                                        static_cast<float>(sp(rng))));
  for (Index i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(u(rng));
  return v;
}

inline MaskVolume random_mask(const Dims3& dims, std::mt19937_64& rng, double keep_probability = 0.5) {
  std::bernoulli_distribution b(keep_probability);
  MaskVolume m(dims, Eigen::Vector3f(1.0f, 1.0f, 1.0f), 0);
  for (Index i = 0; i < m.data.size(); ++i) m.data[i] = b(rng) ? 1 : 0;
  return m;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vdf-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace vdf::test
