#pragma once

// Differentiable 3D operators on Tensor5.  Every forward op is a pure function
// of its inputs; each has a matching *_backward that maps an upstream
// gradient to gradients of the op's inputs.

#include <Eigen/Core>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "vdf/tensor.hpp"

namespace vdf {

enum class Padding { Same, Valid };

/// Sets the worker count used by the parallel loops in this header.
inline void set_num_threads(int n) { omp_set_num_threads(std::max(1, n)); }
inline int num_threads() { return omp_get_max_threads(); }

/// 3D convolution kernel: weight (out, in, k, k, k) and bias (1, out, 1, 1, 1).
template <typename Scalar>
struct ConvKernel3 {
  Tensor5<Scalar> weight;
  Tensor5<Scalar> bias;

  Index out_channels() const { return weight.shape().n(); }
  Index in_channels() const { return weight.shape().c(); }
  Index size() const { return weight.shape().d(); }
};

inline Shape5 conv_weight_shape(Index out, Index in, Index k) { return {out, in, k, k, k}; }
inline Shape5 bias_shape(Index channels) { return {1, channels, 1, 1, 1}; }

template <typename Scalar>
struct Conv3dGrads {
  Tensor5<Scalar> input;
  Tensor5<Scalar> weight;
  Tensor5<Scalar> bias;
};

namespace detail {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Columns per im2col chunk are sized from the shapes alone, so the summation
// order inside each output voxel never depends on the thread count.
inline constexpr Index kIm2colBudget = Index{1} << 20;
inline constexpr Index kWeightGradSlabs = 8;

struct ConvPlan {
  Index k = 3;
  Index pad = 1;
  Shape5 in;
  Shape5 out;
  Index slices_per_chunk = 1;
  Index chunks_per_batch = 1;

  Index rows() const { return in.c() * k * k * k; }
  Index plane() const { return out.h() * out.w(); }
  Index chunk_count() const { return in.n() * chunks_per_batch; }
};

inline ConvPlan make_conv_plan(const Shape5& in, Index out_channels, Index k, Index pad) {
  ConvPlan p;
  p.k = k;
  p.pad = pad;
  p.in = in;
  const Index od = in.d() + 2 * pad - k + 1;
  const Index oh = in.h() + 2 * pad - k + 1;
  const Index ow = in.w() + 2 * pad - k + 1;
  if (od < 1) throw DimensionError("D", "depth " + std::to_string(in.d()) + " smaller than kernel");
  if (oh < 1) throw DimensionError("H", "height " + std::to_string(in.h()) + " smaller than kernel");
  if (ow < 1) throw DimensionError("W", "width " + std::to_string(in.w()) + " smaller than kernel");
  p.out = Shape5(in.n(), out_channels, od, oh, ow);
  const Index target_cols = std::max<Index>(1, kIm2colBudget / std::max<Index>(1, p.rows()));
  p.slices_per_chunk = std::clamp<Index>(target_cols / p.plane(), 1, od);
  p.chunks_per_batch = (od + p.slices_per_chunk - 1) / p.slices_per_chunk;
  return p;
}

// Fills `cols` (rows() x cols, row-major) with the receptive fields of output
// slices [d0, d1) of batch item n.
template <typename Scalar>
void im2col(const Tensor5<Scalar>& x, const ConvPlan& p, Index n, Index d0, Index d1, MatrixRM& cols) {
  const Index k = p.k, pad = p.pad;
  const Index id = p.in.d(), ih = p.in.h(), iw = p.in.w();
  const Index oh = p.out.h(), ow = p.out.w();
  const Index ncols = (d1 - d0) * oh * ow;
  cols.resize(p.rows(), ncols);
  for (Index c = 0; c < p.in.c(); ++c) {
    const Scalar* src = x.channel(n, c);
    for (Index kd = 0; kd < k; ++kd)
      for (Index kh = 0; kh < k; ++kh)
        for (Index kw = 0; kw < k; ++kw) {
          double* row = cols.row(((c * k + kd) * k + kh) * k + kw).data();
          const Index w_lo = std::max<Index>(0, pad - kw);
          const Index w_hi = std::min<Index>(ow, iw + pad - kw);
          for (Index d = d0; d < d1; ++d) {
            const Index sd = d + kd - pad;
            double* seg = row + (d - d0) * oh * ow;
            if (sd < 0 || sd >= id) {
              std::fill(seg, seg + oh * ow, 0.0);
              continue;
            }
            for (Index h = 0; h < oh; ++h) {
              const Index sh = h + kh - pad;
              double* line = seg + h * ow;
              if (sh < 0 || sh >= ih || w_lo >= w_hi) {
                std::fill(line, line + ow, 0.0);
                continue;
              }
              const Scalar* in_line = src + (sd * ih + sh) * iw;
              const Index shift = kw - pad;
              std::fill(line, line + w_lo, 0.0);
              for (Index w = w_lo; w < w_hi; ++w) line[w] = static_cast<double>(in_line[w + shift]);
              std::fill(line + w_hi, line + ow, 0.0);
            }
          }
        }
  }
}

template <typename Scalar>
MatrixRM weight_matrix(const Tensor5<Scalar>& w) {
  const Index rows = w.shape().n();
  const Index cols = w.shape().c() * w.shape().spatial();
  return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(w.raw(), rows,
                                                                                                  cols)
      .template cast<double>();
}

// y = conv(x, w) + bias with explicit zero padding `pad` on every side.
template <typename Scalar>
Tensor5<Scalar> conv_core(const Tensor5<Scalar>& x, const Tensor5<Scalar>& w, const Tensor5<Scalar>* bias,
                          Index pad) {
  const Index k = w.shape().d();
  const ConvPlan p = make_conv_plan(x.shape(), w.shape().n(), k, pad);
  const MatrixRM wm = weight_matrix(w);
  Tensor5<Scalar> y(p.out);
  const Index out_c = p.out.c();
  const Index chunks = p.chunk_count();

#pragma omp parallel
  {
    MatrixRM cols;
    MatrixRM prod;
#pragma omp for schedule(dynamic, 1)
    for (Index chunk = 0; chunk < chunks; ++chunk) {
      const Index n = chunk / p.chunks_per_batch;
      const Index d0 = (chunk % p.chunks_per_batch) * p.slices_per_chunk;
      const Index d1 = std::min(p.out.d(), d0 + p.slices_per_chunk);
      im2col(x, p, n, d0, d1, cols);
      prod.noalias() = wm * cols;
      const Index ncols = prod.cols();
      for (Index o = 0; o < out_c; ++o) {
        const double b = bias ? static_cast<double>(bias->raw()[o]) : 0.0;
        Scalar* dst = y.channel(n, o) + d0 * p.plane();
        const double* srow = prod.row(o).data();
        for (Index j = 0; j < ncols; ++j) dst[j] = static_cast<Scalar>(srow[j] + b);
      }
    }
  }
  return y;
}

}  // namespace detail

inline Index padding_amount(Padding padding, Index k) { return padding == Padding::Same ? (k - 1) / 2 : 0; }

namespace detail {

template <typename Scalar>
void check_conv_args(const Tensor5<Scalar>& x, const Tensor5<Scalar>& w, const Tensor5<Scalar>& b) {
  const Shape5& ws = w.shape();
  if (ws.d() != ws.h() || ws.d() != ws.w() || ws.d() % 2 == 0)
    throw DimensionError("kernel", "kernel must be cubic with odd size, got " + ws.str());
  if (x.shape().c() != ws.c())
    throw DimensionError("C", "input has " + std::to_string(x.shape().c()) + " channels, kernel expects " +
                                  std::to_string(ws.c()));
  if (b.shape() != bias_shape(ws.n()))
    throw DimensionError("C", "bias shape " + b.shape().str() + " does not match " + std::to_string(ws.n()) +
                                  " output channels");
}

}  // namespace detail

/// output[n,o] = bias[o] + sum_{i,delta} input[n,i,.+delta] * weight[o,i,delta].
/// Per-voxel sums are accumulated in double and rounded once.
template <typename Scalar>
Tensor5<Scalar> conv3d(const Tensor5<Scalar>& x, const Tensor5<Scalar>& weight, const Tensor5<Scalar>& bias,
                       Padding padding = Padding::Same) {
  detail::check_conv_args(x, weight, bias);
  return detail::conv_core(x, weight, &bias, padding_amount(padding, weight.shape().d()));
}

template <typename Scalar>
Tensor5<Scalar> conv3d(const Tensor5<Scalar>& x, const ConvKernel3<Scalar>& kernel, Padding padding = Padding::Same) {
  return conv3d(x, kernel.weight, kernel.bias, padding);
}

/// Kernel with in/out channels swapped and every spatial axis reversed.  The
/// input gradient of a convolution is a convolution of the upstream gradient
/// with this kernel.
template <typename Scalar>
Tensor5<Scalar> flip_transpose_kernel(const Tensor5<Scalar>& w) {
  const Shape5& s = w.shape();
  const Index k = s.d();
  Tensor5<Scalar> f(Shape5(s.c(), s.n(), k, k, k));
  for (Index o = 0; o < s.n(); ++o)
    for (Index i = 0; i < s.c(); ++i)
      for (Index a = 0; a < k; ++a)
        for (Index b = 0; b < k; ++b)
          for (Index c = 0; c < k; ++c) f(i, o, k - 1 - a, k - 1 - b, k - 1 - c) = w(o, i, a, b, c);
  return f;
}

template <typename Scalar>
Conv3dGrads<Scalar> conv3d_backward(const Tensor5<Scalar>& x, const Tensor5<Scalar>& weight,
                                    const Tensor5<Scalar>& upstream, Padding padding = Padding::Same,
                                    bool need_input_grad = true) {
  using detail::MatrixRM;
  const Index k = weight.shape().d();
  const Index pad = padding_amount(padding, k);
  const detail::ConvPlan p = detail::make_conv_plan(x.shape(), weight.shape().n(), k, pad);
  if (x.shape().c() != weight.shape().c())
    throw DimensionError("C", "input channels do not match kernel in backward pass");
  require_same_shape(upstream.shape(), p.out, "conv3d_backward upstream");

  Conv3dGrads<Scalar> g;
  const Index out_c = p.out.c();

  // Bias: sum of upstream over every non-channel axis.
  g.bias = Tensor5<Scalar>(bias_shape(out_c));
  for (Index o = 0; o < out_c; ++o) {
    double acc = 0.0;
    for (Index n = 0; n < p.out.n(); ++n) {
      const Scalar* src = upstream.channel(n, o);
      for (Index j = 0; j < p.out.spatial(); ++j) acc += src[j];
    }
    g.bias.raw()[o] = static_cast<Scalar>(acc);
  }

  // Weight: chunks are dealt round-robin into a fixed number of slabs; each
  // slab is summed sequentially, then slabs are summed in order.
  const Index chunks = p.chunk_count();
  const Index slabs = std::min(detail::kWeightGradSlabs, chunks);
  std::vector<MatrixRM> partial(static_cast<std::size_t>(slabs), MatrixRM::Zero(out_c, p.rows()));
#pragma omp parallel
  {
    MatrixRM cols;
    MatrixRM dy;
#pragma omp for schedule(dynamic, 1)
    for (Index slab = 0; slab < slabs; ++slab) {
      for (Index chunk = slab; chunk < chunks; chunk += slabs) {
        const Index n = chunk / p.chunks_per_batch;
        const Index d0 = (chunk % p.chunks_per_batch) * p.slices_per_chunk;
        const Index d1 = std::min(p.out.d(), d0 + p.slices_per_chunk);
        detail::im2col(x, p, n, d0, d1, cols);
        const Index ncols = cols.cols();
        dy.resize(out_c, ncols);
        for (Index o = 0; o < out_c; ++o) {
          const Scalar* src = upstream.channel(n, o) + d0 * p.plane();
          for (Index j = 0; j < ncols; ++j) dy(o, j) = static_cast<double>(src[j]);
        }
        partial[static_cast<std::size_t>(slab)].noalias() += dy * cols.transpose();
      }
    }
  }
  MatrixRM total = MatrixRM::Zero(out_c, p.rows());
  for (const auto& m : partial) total += m;
  g.weight = Tensor5<Scalar>(weight.shape());
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(g.weight.raw(), out_c,
                                                                                     p.rows()) =
      total.template cast<Scalar>();

  if (need_input_grad) {
    const Tensor5<Scalar> flipped = flip_transpose_kernel(weight);
    g.input = detail::conv_core<Scalar>(upstream, flipped, nullptr, k - 1 - pad);
  }
  return g;
}

/// 2x2x2 max pooling with stride 2.  `argmax[j]` is the flat input offset that
/// produced output element j (first maximum in scan order on ties).
template <typename Scalar>
struct PoolResult {
  Tensor5<Scalar> output;
  std::vector<Index> argmax;
};

template <typename Scalar>
PoolResult<Scalar> maxpool3d(const Tensor5<Scalar>& x) {
  const Shape5& s = x.shape();
  for (std::size_t a = 2; a < 5; ++a)
    if (s.dims[a] % 2 != 0)
      throw DimensionError(kAxisNames[a], "max pooling needs even extents, got " + s.str() +
                                              "; resample the volume to a multiple of 16 first");
  PoolResult<Scalar> r;
  const Shape5 os(s.n(), s.c(), s.d() / 2, s.h() / 2, s.w() / 2);
  r.output = Tensor5<Scalar>(os);
  r.argmax.resize(static_cast<std::size_t>(os.size()));
  Index j = 0;
  for (Index n = 0; n < os.n(); ++n)
    for (Index c = 0; c < os.c(); ++c)
      for (Index d = 0; d < os.d(); ++d)
        for (Index h = 0; h < os.h(); ++h)
          for (Index w = 0; w < os.w(); ++w, ++j) {
            Index best = x.offset(n, c, 2 * d, 2 * h, 2 * w);
            Scalar best_v = x.raw()[best];
            for (Index a = 0; a < 2; ++a)
              for (Index b = 0; b < 2; ++b)
                for (Index e = 0; e < 2; ++e) {
                  const Index off = x.offset(n, c, 2 * d + a, 2 * h + b, 2 * w + e);
                  if (x.raw()[off] > best_v) {
                    best_v = x.raw()[off];
                    best = off;
                  }
                }
            r.output.raw()[j] = best_v;
            r.argmax[static_cast<std::size_t>(j)] = best;
          }
  return r;
}

template <typename Scalar>
Tensor5<Scalar> maxpool3d_backward(const Shape5& input_shape, const std::vector<Index>& argmax,
                                   const Tensor5<Scalar>& upstream) {
  if (static_cast<Index>(argmax.size()) != upstream.size())
    throw DimensionError("argmax", "upstream gradient does not match recorded pooling indices");
  Tensor5<Scalar> g(input_shape);
  for (std::size_t j = 0; j < argmax.size(); ++j) g.raw()[argmax[j]] += upstream.raw()[j];
  return g;
}

/// Nearest-neighbour upsampling by 2 along each spatial axis.
template <typename Scalar>
Tensor5<Scalar> upsample_nearest3d(const Tensor5<Scalar>& x) {
  const Shape5& s = x.shape();
  Tensor5<Scalar> y(Shape5(s.n(), s.c(), 2 * s.d(), 2 * s.h(), 2 * s.w()));
  const Index oh = 2 * s.h(), ow = 2 * s.w();
  for (Index n = 0; n < s.n(); ++n)
    for (Index c = 0; c < s.c(); ++c) {
      const Scalar* src = x.channel(n, c);
      Scalar* dst = y.channel(n, c);
      for (Index d = 0; d < 2 * s.d(); ++d)
        for (Index h = 0; h < oh; ++h) {
          const Scalar* line = src + ((d / 2) * s.h() + h / 2) * s.w();
          Scalar* out = dst + (d * oh + h) * ow;
          for (Index w = 0; w < ow; ++w) out[w] = line[w / 2];
        }
    }
  return y;
}

template <typename Scalar>
Tensor5<Scalar> upsample_nearest3d_backward(const Tensor5<Scalar>& upstream) {
  const Shape5& s = upstream.shape();
  for (std::size_t a = 2; a < 5; ++a)
    if (s.dims[a] % 2 != 0) throw DimensionError(kAxisNames[a], "upsample gradient must have even extents");
  Tensor5<Scalar> g(Shape5(s.n(), s.c(), s.d() / 2, s.h() / 2, s.w() / 2));
  const Index gh = s.h() / 2, gw = s.w() / 2;
  for (Index n = 0; n < s.n(); ++n)
    for (Index c = 0; c < s.c(); ++c) {
      const Scalar* src = upstream.channel(n, c);
      Scalar* dst = g.channel(n, c);
      for (Index d = 0; d < s.d(); ++d)
        for (Index h = 0; h < s.h(); ++h) {
          const Scalar* line = src + (d * s.h() + h) * s.w();
          Scalar* out = dst + ((d / 2) * gh + h / 2) * gw;
          for (Index w = 0; w < s.w(); ++w) out[w / 2] += line[w];
        }
    }
  return g;
}

/// Channel concatenation; `a`'s channels come first.
template <typename Scalar>
Tensor5<Scalar> concat_channels(const Tensor5<Scalar>& a, const Tensor5<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "concat_channels", 1u << 1);
  const Shape5& s = a.shape();
  const Index ca = s.c(), cb = b.shape().c(), sp = s.spatial();
  Tensor5<Scalar> y(Shape5(s.n(), ca + cb, s.d(), s.h(), s.w()));
  for (Index n = 0; n < s.n(); ++n) {
    if (ca > 0) std::copy_n(a.channel(n, 0), ca * sp, y.channel(n, 0));
    if (cb > 0) std::copy_n(b.channel(n, 0), cb * sp, y.channel(n, ca));
  }
  return y;
}

template <typename Scalar>
std::pair<Tensor5<Scalar>, Tensor5<Scalar>> concat_channels_backward(const Tensor5<Scalar>& upstream,
                                                                      Index channels_a) {
  const Shape5& s = upstream.shape();
  if (channels_a < 0 || channels_a > s.c()) throw DimensionError("C", "split point outside channel range");
  const Index cb = s.c() - channels_a, sp = s.spatial();
  Tensor5<Scalar> ga(Shape5(s.n(), channels_a, s.d(), s.h(), s.w()));
  Tensor5<Scalar> gb(Shape5(s.n(), cb, s.d(), s.h(), s.w()));
  for (Index n = 0; n < s.n(); ++n) {
    if (channels_a > 0) std::copy_n(upstream.channel(n, 0), channels_a * sp, ga.channel(n, 0));
    if (cb > 0) std::copy_n(upstream.channel(n, channels_a), cb * sp, gb.channel(n, 0));
  }
  return {std::move(ga), std::move(gb)};
}

template <typename Scalar>
Tensor5<Scalar> relu(const Tensor5<Scalar>& x) {
  return Tensor5<Scalar>(x.shape(), x.data().max(Scalar(0)));
}

/// Subgradient at exactly zero is 0.
template <typename Scalar>
Tensor5<Scalar> relu_backward(const Tensor5<Scalar>& x, const Tensor5<Scalar>& upstream) {
  require_same_shape(x.shape(), upstream.shape(), "relu_backward");
  return Tensor5<Scalar>(x.shape(), (x.data() > Scalar(0)).select(upstream.data(), Scalar(0)));
}

template <typename Scalar>
Tensor5<Scalar> sigmoid(const Tensor5<Scalar>& x) {
  return Tensor5<Scalar>(x.shape(), Scalar(1) / (Scalar(1) + (-x.data()).exp()));
}

/// Takes the forward *output* y = sigmoid(x).
template <typename Scalar>
Tensor5<Scalar> sigmoid_backward(const Tensor5<Scalar>& y, const Tensor5<Scalar>& upstream) {
  require_same_shape(y.shape(), upstream.shape(), "sigmoid_backward");
  return Tensor5<Scalar>(y.shape(), upstream.data() * y.data() * (Scalar(1) - y.data()));
}

/// Softmax across the channel axis at every voxel.
template <typename Scalar>
Tensor5<Scalar> softmax_channels(const Tensor5<Scalar>& x) {
  const Shape5& s = x.shape();
  Tensor5<Scalar> y(s);
  const Index sp = s.spatial();
  for (Index n = 0; n < s.n(); ++n)
    for (Index j = 0; j < sp; ++j) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index c = 0; c < s.c(); ++c) m = std::max(m, static_cast<double>(x.channel(n, c)[j]));
      double z = 0.0;
      for (Index c = 0; c < s.c(); ++c) z += std::exp(static_cast<double>(x.channel(n, c)[j]) - m);
      for (Index c = 0; c < s.c(); ++c)
        y.channel(n, c)[j] = static_cast<Scalar>(std::exp(static_cast<double>(x.channel(n, c)[j]) - m) / z);
    }
  return y;
}

}  // namespace vdf
