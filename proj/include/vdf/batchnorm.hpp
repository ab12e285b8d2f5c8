#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "vdf/ops.hpp"
#include "vdf/tensor.hpp"

namespace vdf {

enum class Mode { Train, Infer };

/// Per-channel affine normalisation parameters and running statistics.  All
/// tensors have shape (1, C, 1, 1, 1).
template <typename Scalar>
struct BatchNormState {
  Tensor5<Scalar> gamma;
  Tensor5<Scalar> beta;
  Tensor5<Scalar> running_mean;
  Tensor5<Scalar> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormState identity(Index channels) {
    BatchNormState s;
    s.gamma = Tensor5<Scalar>::Constant(bias_shape(channels), Scalar(1));
    s.beta = Tensor5<Scalar>::Zero(bias_shape(channels));
    s.running_mean = Tensor5<Scalar>::Zero(bias_shape(channels));
    s.running_var = Tensor5<Scalar>::Constant(bias_shape(channels), Scalar(1));
    return s;
  }
};

/// Everything the backward pass needs from a forward call.
template <typename Scalar>
struct BatchNormCache {
  Mode mode = Mode::Train;
  Tensor5<Scalar> normalized;    // (x - mean) * inv_std
  std::vector<double> inv_std;  // per channel
};

template <typename Scalar>
struct BatchNormGrads {
  Tensor5<Scalar> input;
  Tensor5<Scalar> gamma;
  Tensor5<Scalar> beta;
};

/// Normalisation with fixed statistics; never mutates its arguments.
template <typename Scalar>
Tensor5<Scalar> batchnorm3d_inference(const Tensor5<Scalar>& x, const Tensor5<Scalar>& gamma,
                                      const Tensor5<Scalar>& beta, const Tensor5<Scalar>& running_mean,
                                      const Tensor5<Scalar>& running_var, double epsilon) {
  const Shape5& s = x.shape();
  if (s.n() == 0) throw UsageError("batch normalisation over an empty batch");
  for (const Tensor5<Scalar>* p : {&gamma, &beta, &running_mean, &running_var})
    if (p->shape() != bias_shape(s.c()))
      throw DimensionError("C", "batch-norm parameters " + p->shape().str() + " do not match input " + s.str());
  const Index sp = s.spatial();
  Tensor5<Scalar> y(s);
  for (Index c = 0; c < s.c(); ++c) {
    const double mean = running_mean.raw()[c];
    const double istd = 1.0 / std::sqrt(static_cast<double>(running_var.raw()[c]) + epsilon);
    const double g = gamma.raw()[c], b = beta.raw()[c];
    for (Index n = 0; n < s.n(); ++n) {
      const Scalar* src = x.channel(n, c);
      Scalar* dst = y.channel(n, c);
      for (Index j = 0; j < sp; ++j) dst[j] = static_cast<Scalar>(g * ((src[j] - mean) * istd) + b);
    }
  }
  return y;
}

/// Train mode normalises with the batch statistics over (N, D, H, W) and
/// blends them into the running statistics; infer mode uses the running
/// statistics only.
template <typename Scalar>
Tensor5<Scalar> batchnorm3d(const Tensor5<Scalar>& x, const Tensor5<Scalar>& gamma, const Tensor5<Scalar>& beta,
                            Tensor5<Scalar>& running_mean, Tensor5<Scalar>& running_var, Mode mode,
                            double momentum, double epsilon, BatchNormCache<Scalar>* cache = nullptr) {
  const Shape5& s = x.shape();
  if (s.n() == 0) throw UsageError("batch normalisation over an empty batch");
  for (const Tensor5<Scalar>* p : std::array<const Tensor5<Scalar>*, 4>{&gamma, &beta, &running_mean, &running_var})
    if (p->shape() != bias_shape(s.c()))
      throw DimensionError("C", "batch-norm parameters " + p->shape().str() + " do not match input " + s.str());
  if (!(epsilon > 0.0)) throw ConfigError("batch-norm epsilon must be positive");

  const Index sp = s.spatial();
  const double count = static_cast<double>(s.n() * sp);
  Tensor5<Scalar> y(s);
  Tensor5<Scalar> xhat(s);
  std::vector<double> inv_std(static_cast<std::size_t>(s.c()));

  for (Index c = 0; c < s.c(); ++c) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::Train) {
      for (Index n = 0; n < s.n(); ++n) {
        const Scalar* src = x.channel(n, c);
        for (Index j = 0; j < sp; ++j) mean += src[j];
      }
      mean /= count;
      for (Index n = 0; n < s.n(); ++n) {
        const Scalar* src = x.channel(n, c);
        for (Index j = 0; j < sp; ++j) {
          const double dv = src[j] - mean;
          var += dv * dv;
        }
      }
      var /= count;
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean.raw()[c] =
          static_cast<Scalar>((1 - momentum) * running_mean.raw()[c] + momentum * mean);
      running_var.raw()[c] = static_cast<Scalar>((1 - momentum) * running_var.raw()[c] + momentum * unbiased);
    } else {
      mean = running_mean.raw()[c];
      var = running_var.raw()[c];
    }
    const double istd = 1.0 / std::sqrt(var + epsilon);
    inv_std[static_cast<std::size_t>(c)] = istd;
    const double g = gamma.raw()[c], b = beta.raw()[c];
    for (Index n = 0; n < s.n(); ++n) {
      const Scalar* src = x.channel(n, c);
      Scalar* xh = xhat.channel(n, c);
      Scalar* dst = y.channel(n, c);
      for (Index j = 0; j < sp; ++j) {
        const double z = (src[j] - mean) * istd;
        xh[j] = static_cast<Scalar>(z);
        dst[j] = static_cast<Scalar>(g * z + b);
      }
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename Scalar>
Tensor5<Scalar> batchnorm3d(const Tensor5<Scalar>& x, BatchNormState<Scalar>& state, Mode mode,
                            BatchNormCache<Scalar>* cache = nullptr) {
  return batchnorm3d(x, state.gamma, state.beta, state.running_mean, state.running_var, mode, state.momentum,
                     state.epsilon, cache);
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm3d_backward(const BatchNormCache<Scalar>& cache, const Tensor5<Scalar>& gamma,
                                            const Tensor5<Scalar>& upstream) {
  const Shape5& s = upstream.shape();
  require_same_shape(s, cache.normalized.shape(), "batchnorm3d_backward");
  const Index sp = s.spatial();
  const double count = static_cast<double>(s.n() * sp);
  BatchNormGrads<Scalar> g{Tensor5<Scalar>(s), Tensor5<Scalar>(bias_shape(s.c())),
                           Tensor5<Scalar>(bias_shape(s.c()))};
  for (Index c = 0; c < s.c(); ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (Index n = 0; n < s.n(); ++n) {
      const Scalar* dy = upstream.channel(n, c);
      const Scalar* xh = cache.normalized.channel(n, c);
      for (Index j = 0; j < sp; ++j) {
        sum_dy += dy[j];
        sum_dy_xhat += static_cast<double>(dy[j]) * xh[j];
      }
    }
    g.beta.raw()[c] = static_cast<Scalar>(sum_dy);
    g.gamma.raw()[c] = static_cast<Scalar>(sum_dy_xhat);
    const double scale = gamma.raw()[c] * cache.inv_std[static_cast<std::size_t>(c)];
    for (Index n = 0; n < s.n(); ++n) {
      const Scalar* dy = upstream.channel(n, c);
      const Scalar* xh = cache.normalized.channel(n, c);
      Scalar* dx = g.input.channel(n, c);
      for (Index j = 0; j < sp; ++j) {
        if (cache.mode == Mode::Train)
          dx[j] = static_cast<Scalar>(scale * (dy[j] - sum_dy / count - xh[j] * sum_dy_xhat / count));
        else
          dx[j] = static_cast<Scalar>(scale * dy[j]);
      }
    }
  }
  return g;
}

}  // namespace vdf
