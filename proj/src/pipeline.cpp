#include "vdf/pipeline.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "vdf/metrics.hpp"

namespace vdf {

std::array<char, 3> orientation_from_affine(const Affine& affine) {
  static constexpr char kPos[3] = {'R', 'A', 'S'};
  static constexpr char kNeg[3] = {'L', 'P', 'I'};
  std::array<char, 3> out{};
  // Affine columns 0, 1, 2 belong to w, h, d.
  for (int axis = 0; axis < 3; ++axis) {
    const int col = 2 - axis;
    Eigen::Index row = 0;
    affine.col(col).head<3>().cwiseAbs().maxCoeff(&row);
    out[static_cast<std::size_t>(axis)] = affine(row, col) >= 0 ? kPos[row] : kNeg[row];
  }
  return out;
}

Volume<float> normalize_intensity(const Volume<float>& v) {
  v.validate();
  Volume<float> out = v;
  const double lo = v.data.minCoeff();
  const double hi = v.data.maxCoeff();
  if (!(hi > lo)) {
    out.data.setZero();
    return out;
  }
  const double inv = 1.0 / (hi - lo);
  for (Index i = 0; i < v.data.size(); ++i) out.data[i] = static_cast<float>((v.data[i] - lo) * inv);
  return out;
}

namespace {

struct Tap {
  Index lo = 0, hi = 0;
  double frac = 0.0;
};

std::vector<Tap> linear_taps(Index in, Index out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  for (Index i = 0; i < out; ++i) {
    const double src = out == 1 ? 0.5 * static_cast<double>(in - 1)
                                : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    Index lo = static_cast<Index>(std::floor(src));
    lo = std::clamp<Index>(lo, 0, in - 1);
    const Index hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, hi == lo ? 0.0 : src - static_cast<double>(lo)};
  }
  return taps;
}

double rescaled_spacing(double sp, Index in, Index out) {
  if (in > 1 && out > 1) return sp * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  return sp * static_cast<double>(in) / static_cast<double>(out);
}

template <typename T>
void copy_resampled_geometry(const Volume<T>& src, const Dims3& target, Volume<T>& out) {
  out.dims = target;
  out.orientation = src.orientation;
  out.affine = src.affine;
  out.spacing = src.spacing;
  for (int a = 0; a < 3; ++a) {
    if (target[a] == src.dims[a]) continue;
    const double ns = rescaled_spacing(src.spacing[a], src.dims[a], target[a]);
    out.spacing[a] = static_cast<float>(ns);
    out.affine.col(2 - a) *= static_cast<float>(ns / src.spacing[a]);
  }
}

// Separable linear interpolation along one axis of a (D, H, W) double grid.
Eigen::ArrayXd resample_axis(const Eigen::ArrayXd& in, const Dims3& dims, int axis, Index out_n, Dims3& out_dims) {
  out_dims = dims;
  if (axis == 0) out_dims.d = out_n;
  if (axis == 1) out_dims.h = out_n;
  if (axis == 2) out_dims.w = out_n;
  Eigen::ArrayXd out(out_dims.size());
  const auto taps = linear_taps(dims[axis], out_n);
  for (Index d = 0; d < out_dims.d; ++d)
    for (Index h = 0; h < out_dims.h; ++h)
      for (Index w = 0; w < out_dims.w; ++w) {
        Index src[3] = {d, h, w};
        const Tap& t = taps[static_cast<std::size_t>(src[axis])];
        src[axis] = t.lo;
        const double a = in[(src[0] * dims.h + src[1]) * dims.w + src[2]];
        src[axis] = t.hi;
        const double b = in[(src[0] * dims.h + src[1]) * dims.w + src[2]];
        out[(d * out_dims.h + h) * out_dims.w + w] = t.frac == 0.0 ? a : a + (b - a) * t.frac;
      }
  return out;
}

}  // namespace

Volume<float> resample_trilinear(const Volume<float>& v, const Dims3& target) {
  v.validate();
  if (target.d < 1 || target.h < 1 || target.w < 1) throw DimensionError("dims", "target extents must be >= 1");
  Volume<float> out;
  copy_resampled_geometry(v, target, out);
  if (target == v.dims) {
    out.data = v.data;
    return out;
  }
  Eigen::ArrayXd cur = v.data.cast<double>();
  Dims3 dims = v.dims;
  for (int axis = 2; axis >= 0; --axis) {
    if (dims[axis] == target[axis]) continue;
    Dims3 next;
    cur = resample_axis(cur, dims, axis, target[axis], next);
    dims = next;
  }
  out.data = cur.cast<float>();
  return out;
}

MaskVolume resample_nearest(const MaskVolume& m, const Dims3& target) {
  m.validate();
  if (target.d < 1 || target.h < 1 || target.w < 1) throw DimensionError("dims", "target extents must be >= 1");
  MaskVolume out;
  copy_resampled_geometry(m, target, out);
  out.data.resize(target.size());
  std::array<std::vector<Index>, 3> idx;
  for (int a = 0; a < 3; ++a) {
    idx[static_cast<std::size_t>(a)].resize(static_cast<std::size_t>(target[a]));
    for (Index i = 0; i < target[a]; ++i) {
      const double src = target[a] == 1 ? 0.5 * static_cast<double>(m.dims[a] - 1)
                                         : static_cast<double>(i) * static_cast<double>(m.dims[a] - 1) /
                                               static_cast<double>(target[a] - 1);
      idx[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)] =
          std::clamp<Index>(static_cast<Index>(std::lround(src)), 0, m.dims[a] - 1);
    }
  }
  for (Index d = 0; d < target.d; ++d)
    for (Index h = 0; h < target.h; ++h)
      for (Index w = 0; w < target.w; ++w)
        out.at(d, h, w) = m.at(idx[0][static_cast<std::size_t>(d)], idx[1][static_cast<std::size_t>(h)],
                               idx[2][static_cast<std::size_t>(w)]);
  return out;
}

MaskVolume resample_mask(const MaskVolume& m, const Dims3& target) {
  Volume<float> field = m.like<float>();
  field.data = m.data.cast<float>();
  return threshold_mask(resample_trilinear(field, target), 0.5);
}

Index grid_extent(Index dim, const GridOptions& opt) {
  if (dim < 1) throw DimensionError("dims", "extent must be >= 1");
  if (!(opt.shrink > 0.0) || opt.multiple < 1 || opt.floor < 0) throw ConfigError("invalid grid options");
  const Index m = opt.multiple;
  const double scaled = static_cast<double>(dim) * opt.shrink / static_cast<double>(m);
  const Index nearest = static_cast<Index>(std::floor(scaled + 0.5)) * m;
  const Index lower = std::min(dim, opt.floor);
  const Index lower_up = ((lower + m - 1) / m) * m;
  return std::max({nearest, lower_up, m});
}

Dims3 grid_dims(const Dims3& dims, const GridOptions& opt) {
  return {grid_extent(dims.d, opt), grid_extent(dims.h, opt), grid_extent(dims.w, opt)};
}

std::pair<Volume<float>, GridRecipe> fit_to_grid(const Volume<float>& v, const GridOptions& opt) {
  GridRecipe r;
  r.original = v.dims;
  r.original_spacing = v.spacing;
  r.original_affine = v.affine;
  r.original_orientation = v.orientation;
  r.grid = grid_dims(v.dims, opt);
  return {resample_trilinear(v, r.grid), r};
}

Volume<float> restore_from_grid(const Volume<float>& grid_map, const GridRecipe& recipe) {
  require_same_dims(grid_map, recipe.grid, "restore_from_grid");
  Volume<float> out = resample_trilinear(grid_map, recipe.original);
  out.spacing = recipe.original_spacing;
  out.affine = recipe.original_affine;
  out.orientation = recipe.original_orientation;
  return out;
}

RigidAugmentation RigidAugmentation::sample(std::uint64_t seed, const AugmentationRanges& ranges) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-ranges.max_rotation_deg, ranges.max_rotation_deg);
  std::uniform_real_distribution<double> scale(ranges.min_scale, ranges.max_scale);
  RigidAugmentation a;
  for (auto& r : a.rotation_deg) r = angle(rng);
  a.scale = scale(rng);
  a.seed = seed;
  return a;
}

namespace {

constexpr double kFieldSlack = 1e-6;

// Maps an output voxel index to its source voxel index (continuous).
struct InverseMap {
  Eigen::Matrix3d linear;  // acts on index offsets from the centre
  Eigen::Vector3d centre;

  InverseMap(const Dims3& dims, const Eigen::Vector3f& spacing_f, const RigidAugmentation& aug) {
    const Eigen::Vector3d spacing = spacing_f.cast<double>();
    constexpr double kDeg = 3.14159265358979323846 / 180.0;
    const Eigen::Matrix3d rot = (Eigen::AngleAxisd(aug.rotation_deg[0] * kDeg, Eigen::Vector3d::UnitX()) *
                                 Eigen::AngleAxisd(aug.rotation_deg[1] * kDeg, Eigen::Vector3d::UnitY()) *
                                 Eigen::AngleAxisd(aug.rotation_deg[2] * kDeg, Eigen::Vector3d::UnitZ()))
                                    .toRotationMatrix();
    // Rotation acts in millimetres: index -> mm -> rotate^-1 / scale -> index.
    const Eigen::Matrix3d to_mm = spacing.asDiagonal();
    const Eigen::Matrix3d to_index = spacing.cwiseInverse().asDiagonal();
    linear = to_index * rot.transpose() * to_mm / aug.scale;
    centre = Eigen::Vector3d(static_cast<double>(dims.d - 1), static_cast<double>(dims.h - 1),
                             static_cast<double>(dims.w - 1)) *
             0.5;
  }

  Eigen::Vector3d operator()(Index d, Index h, Index w) const {
    const Eigen::Vector3d p(static_cast<double>(d), static_cast<double>(h), static_cast<double>(w));
    return centre + linear * (p - centre);
  }
};

bool inside(const Eigen::Vector3d& s, const Dims3& dims, Eigen::Vector3d& clamped) {
  for (int a = 0; a < 3; ++a) {
    const double hi = static_cast<double>(dims[a] - 1);
    if (s[a] < -kFieldSlack || s[a] > hi + kFieldSlack) return false;
    clamped[a] = std::clamp(s[a], 0.0, hi);
  }
  return true;
}

float sample_trilinear(const Volume<float>& v, const Eigen::Vector3d& s) {
  Index lo[3], hi[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = static_cast<Index>(std::floor(s[a]));
    lo[a] = std::clamp<Index>(lo[a], 0, v.dims[a] - 1);
    hi[a] = std::min(lo[a] + 1, v.dims[a] - 1);
    f[a] = s[a] - static_cast<double>(lo[a]);
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    double wgt = 1.0;
    Index idx[3];
    for (int a = 0; a < 3; ++a) {
      const bool up = (corner >> (2 - a)) & 1;
      wgt *= up ? f[a] : 1.0 - f[a];
      idx[a] = up ? hi[a] : lo[a];
    }
    if (wgt != 0.0) acc += wgt * v.at(idx[0], idx[1], idx[2]);
  }
  return static_cast<float>(acc);
}

}  // namespace

Volume<float> augment_image(const Volume<float>& v, const RigidAugmentation& aug) {
  v.validate();
  const InverseMap map(v.dims, v.spacing, aug);
  Volume<float> out = v.like<float>();
  Eigen::Vector3d c;
  for (Index d = 0; d < v.dims.d; ++d)
    for (Index h = 0; h < v.dims.h; ++h)
      for (Index w = 0; w < v.dims.w; ++w)
        if (inside(map(d, h, w), v.dims, c)) out.at(d, h, w) = sample_trilinear(v, c);
  return out;
}

std::pair<Volume<float>, MaskVolume> augment(const Volume<float>& v, const MaskVolume& m,
                                             const RigidAugmentation& aug) {
  require_same_dims(m, v.dims, "augment");
  m.validate();
  const InverseMap map(m.dims, m.spacing, aug);
  MaskVolume mask = m.like<std::uint8_t>(1);
  Eigen::Vector3d c;
  for (Index d = 0; d < m.dims.d; ++d)
    for (Index h = 0; h < m.dims.h; ++h)
      for (Index w = 0; w < m.dims.w; ++w)
        if (inside(map(d, h, w), m.dims, c))
          mask.at(d, h, w) = m.at(std::lround(c[0]), std::lround(c[1]), std::lround(c[2])) ? 1 : 0;
  return {augment_image(v, aug), std::move(mask)};
}

MaskVolume threshold_mask(const Volume<float>& probabilities, double tau) {
  probabilities.validate();
  MaskVolume m = probabilities.like<std::uint8_t>();
  for (Index i = 0; i < probabilities.data.size(); ++i) {
    const float p = probabilities.data[i];
    if (!(p >= 0.0f && p <= 1.0f))
      throw ValidationError("probability at flat index " + std::to_string(i) + " is outside [0, 1]");
    m.data[i] = p >= tau ? 1 : 0;
  }
  return m;
}

Volume<float> deface(const Volume<float>& image, const MaskVolume& mask) {
  require_same_dims(mask, image.dims, "deface");
  Volume<float> out = image;
  for (Index i = 0; i < image.data.size(); ++i)
    if (mask.data[i] == 0) out.data[i] = 0.0f;
  return out;
}

std::vector<double> ThresholdGrid::candidates() const {
  if (!(min_tau > 0.0 && min_tau < 0.5) || points_per_side < 1) throw ConfigError("invalid threshold grid");
  std::vector<double> lower;
  const double a = std::log(min_tau), b = std::log(0.5);
  for (int i = 0; i < points_per_side; ++i)
    lower.push_back(std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(points_per_side)));
  std::vector<double> out = lower;
  out.push_back(0.5);
  for (auto it = lower.rbegin(); it != lower.rend(); ++it) out.push_back(1.0 - *it);
  return out;
}

ThresholdSearchResult threshold_search(const std::vector<ThresholdCase>& cases, const ThresholdGrid& grid) {
  if (cases.empty()) throw UsageError("threshold search needs at least one validation case");
  ThresholdSearchResult r;
  double best = -1.0;
  for (double tau : grid.candidates()) {
    double sum = 0.0;
    for (const auto& c : cases) sum += dice(threshold_mask(c.probabilities, tau), c.truth);
    const double mean = sum / static_cast<double>(cases.size());
    r.table.emplace_back(tau, mean);
    if (mean > best || (mean == best && std::abs(tau - 0.5) < std::abs(r.best_tau - 0.5))) {
      best = mean;
      r.best_tau = tau;
    }
  }
  return r;
}

}  // namespace vdf
