#pragma once

#include <algorithm>
#include <cmath>

#include "vdf/tensor.hpp"

namespace vdf {

/// Predictions in (0,1) and exactly binary targets of identical shape.
template <typename Scalar>
struct LossBatch {
  const Tensor5<Scalar>& predictions;
  const Tensor5<Scalar>& targets;
};

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  Tensor5<Scalar> grad;
};

inline constexpr double kBceClamp = 1e-7;

namespace detail {

template <typename Scalar>
void require_binary_targets(const Tensor5<Scalar>& t) {
  for (Index i = 0; i < t.size(); ++i) {
    const Scalar v = t.raw()[i];
    if (v != Scalar(0) && v != Scalar(1))
      throw ValidationError("target at flat index " + std::to_string(i) + " is " + std::to_string(v) +
                            ", expected 0 or 1");
  }
}

}  // namespace detail

/// Binary cross entropy averaged over every voxel of every image:
///   L = -(1/M) sum [y log p + (1-y) log(1-p)],  p clamped to [eps, 1-eps].
/// The gradient is (p - y) / (p (1 - p)) / M; clamped entries get 0.
template <typename Scalar>
LossResult<Scalar> bce_loss(const LossBatch<Scalar>& batch) {
  require_same_shape(batch.predictions.shape(), batch.targets.shape(), "bce_loss");
  detail::require_binary_targets(batch.targets);
  const Index m = batch.predictions.size();
  LossResult<Scalar> r{0.0, Tensor5<Scalar>(batch.predictions.shape())};
  if (m == 0) return r;
  const double inv_m = 1.0 / static_cast<double>(m);
  double sum = 0.0;
  for (Index i = 0; i < m; ++i) {
    const double raw = batch.predictions.raw()[i];
    const double y = batch.targets.raw()[i];
    const double p = std::clamp(raw, kBceClamp, 1.0 - kBceClamp);
    sum += y > 0.5 ? std::log(p) : std::log1p(-p);
    if (raw == p) r.grad.raw()[i] = static_cast<Scalar>((p - y) / (p * (1.0 - p)) * inv_m);
  }
  r.loss = -sum * inv_m;
  return r;
}

/// Two-class softmax cross entropy on logits (N, 2, D, H, W); channel 1 is
/// "keep" and the target is the binary keep map (N, 1, D, H, W).  Returns the
/// gradient with respect to the logits.
template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const Tensor5<Scalar>& logits, const Tensor5<Scalar>& keep_target) {
  const Shape5& s = logits.shape();
  if (s.c() != 2) throw DimensionError("C", "softmax cross entropy expects 2 logit channels");
  require_same_shape(s, keep_target.shape(), "softmax_cross_entropy", 1u << 1);
  if (keep_target.shape().c() != 1) throw DimensionError("C", "target must have one channel");
  detail::require_binary_targets(keep_target);
  const Index sp = s.spatial();
  const double inv_m = 1.0 / static_cast<double>(std::max<Index>(1, s.n() * sp));
  LossResult<Scalar> r{0.0, Tensor5<Scalar>(s)};
  double sum = 0.0;
  for (Index n = 0; n < s.n(); ++n) {
    const Scalar* z0 = logits.channel(n, 0);
    const Scalar* z1 = logits.channel(n, 1);
    const Scalar* y = keep_target.channel(n, 0);
    Scalar* g0 = r.grad.channel(n, 0);
    Scalar* g1 = r.grad.channel(n, 1);
    for (Index j = 0; j < sp; ++j) {
      const double a = z0[j], b = z1[j];
      const double mx = std::max(a, b);
      const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
      const double p1 = std::exp(b - lse);
      const double keep = y[j];
      sum += keep > 0.5 ? lse - b : lse - a;
      g1[j] = static_cast<Scalar>((p1 - keep) * inv_m);
      g0[j] = static_cast<Scalar>(((1.0 - p1) - (1.0 - keep)) * inv_m);
    }
  }
  r.loss = sum * inv_m;
  return r;
}

}  // namespace vdf
