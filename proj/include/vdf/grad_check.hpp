#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "vdf/tensor.hpp"

namespace vdf {

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  /// Denominator floor of the relative error, as a fraction of the largest
  /// analytic gradient magnitude.  Keeps entries that are numerically zero
  /// from dominating the report.
  double relative_floor = 1e-3;
  /// Check at most this many coordinates (evenly strided); 0 checks all.
  Index max_coordinates = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  Index checked = 0;
  /// Coordinates that needed a step below `GradCheckOptions::step` to keep
  /// both probes on the input's smooth piece.
  Index refined = 0;
  /// Coordinates where no step down to `min_step` stayed on that piece.
  Index skipped = 0;
  bool passed = false;
};

/// Loss value plus a fingerprint of the smooth piece it was evaluated on (for
/// ReLU networks: the activation signs and pooling winners).
struct PieceValue {
  double value = 0.0;
  std::uint64_t piece = 0;
};

namespace detail {

template <typename Scalar, typename Eval>
GradCheckReport grad_check_impl(const Eval& eval, bool piecewise, const Tensor5<Scalar>& input,
                                const Tensor5<Scalar>& analytic, const GradCheckOptions& opt,
                                double min_step) {
  require_same_shape(input.shape(), analytic.shape(), "grad_check");
  GradCheckReport r;
  if (input.size() == 0) {
    r.passed = true;
    return r;
  }
  const double scale = analytic.data().abs().maxCoeff() * opt.relative_floor;
  const Index total = input.size();
  const Index stride =
      (opt.max_coordinates > 0 && total > opt.max_coordinates) ? total / opt.max_coordinates : 1;
  Tensor5<Scalar> probe = input;
  const std::uint64_t home = piecewise ? eval(input).piece : 0;
  for (Index i = 0; i < total; i += stride) {
    const Scalar orig = probe.raw()[i];
    double h = opt.step;
    double numeric = 0.0;
    bool found = false;
    for (; h >= min_step; h *= 0.1) {
      probe.raw()[i] = static_cast<Scalar>(orig + h);
      const PieceValue p = eval(probe);
      probe.raw()[i] = static_cast<Scalar>(orig - h);
      const PieceValue m = eval(probe);
      probe.raw()[i] = orig;
      if (!std::isfinite(p.value) || !std::isfinite(m.value))
        throw NumericalError("grad_check: function is not finite near coordinate " + std::to_string(i));
      if (piecewise && (p.piece != home || m.piece != home)) continue;
      numeric = (p.value - m.value) / (2.0 * h);
      found = true;
      break;
    }
    if (!found) {
      ++r.skipped;
      continue;
    }
    if (h < opt.step) ++r.refined;
    const double a = analytic.raw()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), scale, 1e-300});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > r.max_relative_error || r.worst_index < 0) {
      r.max_relative_error = rel;
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
    ++r.checked;
  }
  r.passed = r.checked > 0 && r.max_relative_error < opt.tolerance && r.skipped * 10 <= r.checked + r.skipped;
  return r;
}

}  // namespace detail

/// Compares `analytic` with central differences of the scalar function `f`
/// around `input`.  The relative error of coordinate i is
/// |a_i - n_i| / max(|a_i|, |n_i|, relative_floor * max_j |a_j|).
template <typename Scalar>
GradCheckReport grad_check(const std::function<double(const Tensor5<Scalar>&)>& f, const Tensor5<Scalar>& input,
                           const Tensor5<Scalar>& analytic, const GradCheckOptions& opt = {}) {
  auto eval = [&](const Tensor5<Scalar>& v) { return PieceValue{f(v), 0}; };
  return detail::grad_check_impl(eval, false, input, analytic, opt, opt.step);
}

/// Same check for a piecewise-smooth `f`.  A difference quotient whose probes
/// leave the input's piece straddles a kink and says nothing about the
/// derivative there, so the step for that coordinate shrinks by tenfold until
/// both probes stay on the piece (down to `min_step`).  Coordinates that never
/// settle are skipped; more than a tenth skipped fails the check.
template <typename Scalar>
GradCheckReport grad_check_piecewise(const std::function<PieceValue(const Tensor5<Scalar>&)>& f,
                                     const Tensor5<Scalar>& input, const Tensor5<Scalar>& analytic,
                                     const GradCheckOptions& opt = {}, double min_step = 1e-7) {
  return detail::grad_check_impl(f, true, input, analytic, opt, min_step);
}

}  // namespace vdf
