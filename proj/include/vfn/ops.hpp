#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

#include "vfn/instrument.hpp"
#include "vfn/kernels.hpp"
#include "vfn/tensor.hpp"

namespace vfn {

namespace detail {

inline std::size_t leading(const Shape& s) { return numel_of(s) / s.back(); }

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw DimensionError("broadcast needs equal ranks: " + shape_str(a) + " vs " + shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    out[i] = std::max(a[i], b[i]);
  }
  return out;
}

/// Strides of `s` when read at positions of `out`; broadcast axes get 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> strides(s.size(), 0);
  std::size_t run = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    strides[i] = (s[i] == 1 && out[i] != 1) ? 0 : run;
    run *= s[i];
  }
  return strides;
}

/// Visits `out` row by row along its last axis; fn(out_off, a_off, b_off,
/// len, a_step, b_step).
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        Fn&& fn) {
  const std::size_t rank = out.size();
  const std::size_t len = out.back();
  const std::size_t rows = numel_of(out) / len;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t a_off = 0, b_off = 0;
  for (std::size_t row = 0; row < rows; ++row) {
    fn(row * len, a_off, b_off, len, sa[rank - 1], sb[rank - 1]);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      a_off += sa[d];
      b_off += sb[d];
      if (idx[d] < out[d]) break;
      a_off -= sa[d] * idx[d];
      b_off -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

template <class T>
Tensor<T> linear_impl(const char* op, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw DimensionError(std::string(op) + ": input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t cin = w.dim(0), cout = w.dim(1), rows = leading(x.shape());
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    throw DimensionError(std::string(op) + ": bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  Shape shape = x.shape();
  shape.back() = cout;
  std::vector<T> y(rows * cout);
  kernels::gemm(x.data().data(), w.data().data(), y.data(), rows, cin, cout, false);
  if (b.defined()) {
    const T* bias = b.data().data();
    for (std::size_t i = 0; i < rows; ++i) {
      T* row = y.data() + i * cout;
      for (std::size_t j = 0; j < cout; ++j) row[j] += bias[j];
    }
  }
  count_flops(2 * rows * cin * cout + (b.defined() ? rows * cout : 0));
  Tensor<T> out(std::move(shape), std::move(y));
  if (recording<T>({&x, &w, &b})) {
    attach<T>(out, op, {x, w, b}, [x, w, rows, cin, cout](std::span<const T> g, const GradRefs<T>& gin) {
      if (gin.wants(0)) {
        std::vector<T> wt = kernels::transpose(w.data().data(), cin, cout);
        kernels::gemm(g.data(), wt.data(), gin[0].data(), rows, cout, cin, true);
      }
      if (gin.wants(1)) kernels::gemm_tn_accumulate(x.data().data(), g.data(), gin[1].data(), rows, cin, cout);
      if (gin.wants(2)) {
        T* gb = gin[2].data();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cout; ++j) gb[j] += g[i * cout + j];
      }
    });
  }
  return out;
}

enum class BinaryKind { add, sub, mul };

template <class T>
Tensor<T> binary(BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const char* op = kind == BinaryKind::add ? "add" : kind == BinaryKind::sub ? "sub" : "mul";
  Shape shape = broadcast_shape(a.shape(), b.shape());
  std::vector<T> y(numel_of(shape));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const bool same = a.shape() == b.shape();
  auto sa = broadcast_strides(a.shape(), shape), sb = broadcast_strides(b.shape(), shape);
  auto apply = [&](std::size_t o, std::size_t ao, std::size_t bo, std::size_t len, std::size_t as, std::size_t bs) {
    for (std::size_t i = 0; i < len; ++i) {
      const T u = pa[ao + i * as], v = pb[bo + i * bs];
      y[o + i] = kind == BinaryKind::add ? u + v : kind == BinaryKind::sub ? u - v : u * v;
    }
  };
  if (same) {
    apply(0, 0, 0, y.size(), 1, 1);
  } else {
    for_each_broadcast(shape, sa, sb, apply);
  }
  count_flops(y.size());
  Tensor<T> out(shape, std::move(y));
  if (recording<T>({&a, &b})) {
    attach<T>(out, op, {a, b}, [kind, a, b, shape, sa, sb, same](std::span<const T> g, const GradRefs<T>& gin) {
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      auto visit = [&](std::size_t o, std::size_t ao, std::size_t bo, std::size_t len, std::size_t as,
                       std::size_t bs) {
        for (std::size_t i = 0; i < len; ++i) {
          const T gi = g[o + i];
          if (gin.wants(0)) gin[0][ao + i * as] += kind == BinaryKind::mul ? gi * pb[bo + i * bs] : gi;
          if (gin.wants(1)) {
            gin[1][bo + i * bs] += kind == BinaryKind::mul   ? gi * pa[ao + i * as]
                                   : kind == BinaryKind::sub ? -gi
                                                             : gi;
          }
        }
      };
      if (same) {
        visit(0, 0, 0, g.size(), 1, 1);
      } else {
        for_each_broadcast(shape, sa, sb, visit);
      }
    });
  }
  return out;
}

}  // namespace detail

/// y[..., j] = sum_i x[..., i] w[i, j] + b[j]. Pass an undefined bias for
/// a bias-free projection.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  return detail::linear_impl("linear", x, w, b);
}

/// 1x1 convolution over the channel axis, i.e. a bias-free linear map
/// applied at every position.
template <class T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w) {
  return detail::linear_impl("pointwise_conv", x, w, Tensor<T>{});
}

/// Depthwise 2-D correlation (no kernel flip) with zero "same" padding.
/// x: [N,H,W,C]; kernel: [k,k,C] with k odd.
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel) {
  detail::require_rank(x, 4, "depthwise_conv2d");
  if (kernel.rank() != 3 || kernel.dim(0) != kernel.dim(1) || kernel.dim(2) != x.dim(3)) {
    throw DimensionError("depthwise_conv2d: kernel " + shape_str(kernel.shape()) + " does not fit input " +
                         shape_str(x.shape()));
  }
  const std::size_t ks = kernel.dim(0);
  if (ks % 2 == 0) throw ConfigError("depthwise_conv2d: kernel size must be odd, got " + std::to_string(ks));
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  std::vector<T> y(x.numel());
  kernels::dwconv2d(x.data().data(), kernel.data().data(), y.data(), N, H, W, C, ks);
  count_flops(2 * N * H * W * C * ks * ks);
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::recording<T>({&x, &kernel})) {
    detail::attach<T>(out, "depthwise_conv2d", {x, kernel},
                      [x, kernel, N, H, W, C, ks](std::span<const T> g, const GradRefs<T>& gin) {
                        kernels::dwconv2d_backward(x.data().data(), kernel.data().data(), g.data(),
                                                   gin.wants(0) ? gin[0].data() : nullptr,
                                                   gin.wants(1) ? gin[1].data() : nullptr, N, H, W, C, ks);
                      });
  }
  return out;
}

/// Depthwise 1-D correlation along axis 1 with zero "same" padding.
/// x: [N,T,...,C] (any trailing axes, channels last); kernel: [k,C], k odd.
template <class T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& kernel) {
  if (x.rank() < 3) throw DimensionError("depthwise_conv1d: expected [N,T,...,C], got " + shape_str(x.shape()));
  if (kernel.rank() != 2 || kernel.dim(1) != x.shape().back()) {
    throw DimensionError("depthwise_conv1d: kernel " + shape_str(kernel.shape()) + " does not fit input " +
                         shape_str(x.shape()));
  }
  const std::size_t ks = kernel.dim(0);
  if (ks % 2 == 0) throw ConfigError("depthwise_conv1d: kernel size must be odd, got " + std::to_string(ks));
  const std::size_t outer = x.dim(0), len = x.dim(1), inner = x.numel() / (outer * len), C = kernel.dim(1);
  std::vector<T> y(x.numel());
  kernels::dwconv1d(x.data().data(), kernel.data().data(), y.data(), outer, len, inner, C, ks);
  count_flops(2 * x.numel() * ks);
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::recording<T>({&x, &kernel})) {
    detail::attach<T>(out, "depthwise_conv1d", {x, kernel},
                      [x, kernel, outer, len, inner, C, ks](std::span<const T> g, const GradRefs<T>& gin) {
                        kernels::dwconv1d_backward(x.data().data(), kernel.data().data(), g.data(),
                                                   gin.wants(0) ? gin[0].data() : nullptr,
                                                   gin.wants(1) ? gin[1].data() : nullptr, outer, len, inner, C,
                                                   ks);
                      });
  }
  return out;
}

/// Exact GeLU, x * Phi(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  auto xs = x.data();
  const bool record = detail::recording<T>({&x});
  // the cdf is kept for the backward pass
  std::vector<T> cdf(x.numel());
  kernels::normal_cdf(xs.data(), cdf.data(), cdf.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] * cdf[i];
  count_flops(y.size());
  Tensor<T> out(x.shape(), std::move(y));
  if (record) {
    detail::attach<T>(out, "gelu", {x}, [x, cdf = std::move(cdf)](std::span<const T> g, const GradRefs<T>& gin) {
      auto xs = x.data();
      std::vector<T> pdf(g.size());
      kernels::normal_pdf(xs.data(), pdf.data(), pdf.size());
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * (cdf[i] + xs[i] * pdf[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::add, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::sub, a, b);
}
/// Element-wise product; either operand may have size-1 axes.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::mul, a, b);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> y(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] * factor;
  count_flops(y.size());
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::recording<T>({&x})) {
    detail::attach<T>(out, "scale", {x}, [factor](std::span<const T> g, const GradRefs<T>& gin) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * factor;
    });
  }
  return out;
}

namespace detail {

// Maps each element of a tensor to its output group under a reduction. When
// the reduced axes form one block the walk is three nested loops; otherwise
// the group of every element is tabulated.
struct GroupLayout {
  std::size_t outer = 1, reduce = 1, inner = 1;
  std::vector<std::size_t> index;

  GroupLayout(const Shape& in, const Shape& out) {
    const std::size_t rank = in.size();
    std::size_t first = rank, last = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      if (out[d] != in[d]) {
        first = std::min(first, d);
        last = d;
      }
    }
    if (first == rank) {
      outer = numel_of(in);
      return;
    }
    bool block = true;
    for (std::size_t d = first; d <= last; ++d) block = block && (out[d] == 1 || in[d] == 1);
    if (block) {
      for (std::size_t d = 0; d < first; ++d) outer *= in[d];
      for (std::size_t d = first; d <= last; ++d) reduce *= in[d];
      for (std::size_t d = last + 1; d < rank; ++d) inner *= in[d];
      return;
    }
    index.assign(numel_of(in), 0);
    std::vector<std::size_t> idx(rank, 0), ostride(rank);
    std::size_t run = 1;
    for (std::size_t d = rank; d-- > 0;) {
      ostride[d] = out[d] == 1 ? 0 : run;
      run *= out[d];
    }
    const std::size_t len = in[rank - 1], step = ostride[rank - 1];
    std::size_t off = 0;
    for (std::size_t i = 0; i < index.size(); i += len) {
      for (std::size_t j = 0; j < len; ++j) index[i + j] = off + j * step;
      for (std::size_t d = rank - 1; d-- > 0;) {
        ++idx[d];
        off += ostride[d];
        if (idx[d] < in[d]) break;
        off -= ostride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }

  /// fn(element, group) over every element.
  template <class F>
  void visit(F&& fn) const {
    if (!index.empty()) {
      for (std::size_t i = 0; i < index.size(); ++i) fn(i, index[i]);
      return;
    }
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t r = 0; r < reduce; ++r) {
        const std::size_t base = (o * reduce + r) * inner;
        for (std::size_t j = 0; j < inner; ++j) fn(base + j, o * inner + j);
      }
  }
};

}  // namespace detail

/// Mean over `axes`, which are kept with size 1. Each mean is summed in 128-bit
/// fixed point scaled to the group's largest magnitude. Integer addition is
/// associative, so the result does not depend on how the pooled values are
/// arranged (frame order, spatial shifts).
template <class T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  Shape shape = x.shape();
  for (std::size_t a : axes) {
    if (a >= shape.size()) throw DimensionError("mean: axis out of range for " + shape_str(x.shape()));
    shape[a] = 1;
  }
  const std::size_t groups = numel_of(shape), count = groups ? x.numel() / groups : 0;
  detail::GroupLayout layout(x.shape(), shape);
  auto xs = x.data();
  std::vector<T> peak(groups, T(0));
  std::vector<char> finite(groups, 1);
  layout.visit([&](std::size_t i, std::size_t o) {
    const T a = std::abs(xs[i]);
    if (a <= std::numeric_limits<T>::max()) {
      peak[o] = std::max(peak[o], a);
    } else {
      finite[o] = 0;
    }
  });
  // |x| * 2^shift stays below 2^bits / count, so the integer sum cannot
  // overflow. Single precision fits in one 64-bit word for moderate counts.
  const int headroom = static_cast<int>(std::bit_width(count));
  const bool narrow = std::is_same_v<T, float> && headroom <= 14;
  const int bits = narrow ? 62 : 124;
  std::vector<int> shift(groups);
  std::vector<double> scale(groups);
  bool all_finite = true;
  for (std::size_t o = 0; o < groups; ++o) {
    int e = 0;
    std::frexp(static_cast<double>(peak[o]), &e);
    shift[o] = std::min(bits - headroom - e, 1000);
    scale[o] = std::ldexp(1.0, shift[o]);
    all_finite = all_finite && finite[o];
  }
  std::vector<double> sums(groups);
  if (narrow) {
    std::vector<std::int64_t> acc(groups, 0);
    layout.visit([&](std::size_t i, std::size_t o) {
      const double v = finite[o] ? static_cast<double>(xs[i]) * scale[o] : 0.0;
      acc[o] += static_cast<std::int64_t>(v);
    });
    for (std::size_t o = 0; o < groups; ++o) sums[o] = std::ldexp(static_cast<double>(acc[o]), -shift[o]);
  } else {
    std::vector<__int128> acc(groups, 0);
    layout.visit([&](std::size_t i, std::size_t o) {
      // exact split of the scaled value into 2^60 limbs
      const double v = finite[o] ? static_cast<double>(xs[i]) * scale[o] : 0.0;
      const auto hi = static_cast<std::int64_t>(v * 0x1p-60);
      const auto lo = static_cast<std::int64_t>(v - static_cast<double>(hi) * 0x1p60);
      acc[o] += static_cast<__int128>(hi) * (std::int64_t{1} << 60) + lo;
    });
    for (std::size_t o = 0; o < groups; ++o) sums[o] = std::ldexp(static_cast<double>(acc[o]), -shift[o]);
  }
  if (!all_finite) {
    // inf or nan propagates; order no longer matters
    for (std::size_t o = 0; o < groups; ++o)
      if (!finite[o]) sums[o] = 0.0;
    layout.visit([&](std::size_t i, std::size_t o) {
      if (!finite[o]) sums[o] += static_cast<double>(xs[i]);
    });
  }
  std::vector<T> y(groups);
  for (std::size_t o = 0; o < groups; ++o) y[o] = static_cast<T>(sums[o] / static_cast<double>(count));
  count_flops(x.numel());
  Tensor<T> out(std::move(shape), std::move(y));
  if (detail::recording<T>({&x})) {
    detail::attach<T>(out, "mean", {x},
                      [layout = std::move(layout), count](std::span<const T> g, const GradRefs<T>& gin) {
                        const T inv = T(1) / static_cast<T>(count);
                        layout.visit([&](std::size_t i, std::size_t o) { gin[0][i] += g[o] * inv; });
                      });
  }
  return out;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  return mean(x, axes);
}

/// Broadcasts size-1 axes of x up to `shape`.
template <class T>
Tensor<T> expand(const Tensor<T>& x, const Shape& shape) {
  if (detail::broadcast_shape(x.shape(), shape) != shape) {
    throw DimensionError("expand: " + shape_str(x.shape()) + " cannot expand to " + shape_str(shape));
  }
  auto sx = detail::broadcast_strides(x.shape(), shape);
  std::vector<T> y(numel_of(shape));
  auto xs = x.data();
  detail::for_each_broadcast(shape, sx, sx,
                             [&](std::size_t o, std::size_t xo, std::size_t, std::size_t len, std::size_t st,
                                 std::size_t) {
                               for (std::size_t i = 0; i < len; ++i) y[o + i] = xs[xo + i * st];
                             });
  Tensor<T> out(shape, std::move(y));
  if (detail::recording<T>({&x})) {
    detail::attach<T>(out, "expand", {x}, [shape, sx](std::span<const T> g, const GradRefs<T>& gin) {
      detail::for_each_broadcast(shape, sx, sx,
                                 [&](std::size_t o, std::size_t xo, std::size_t, std::size_t len, std::size_t st,
                                     std::size_t) {
                                   for (std::size_t i = 0; i < len; ++i) gin[0][xo + i * st] += g[o + i];
                                 });
    });
  }
  return out;
}

/// Layer normalization over the last axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t C = x.shape().back(), rows = detail::leading(x.shape());
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + " do not match input " +
                         shape_str(x.shape()));
  }
  std::vector<T> y(x.numel()), xhat(x.numel()), rstd(rows);
  auto xs = x.data();
  auto gs = gamma.data();
  auto bs = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * C;
    T mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(C);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (row[c] - mu) * rs;
      xhat[r * C + c] = h;
      y[r * C + c] = h * gs[c] + bs[c];
    }
  }
  count_flops(5 * x.numel());
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::recording<T>({&x, &gamma, &beta})) {
    detail::attach<T>(
        out, "layer_norm", {x, gamma, beta},
        [gamma, xhat = std::move(xhat), rstd = std::move(rstd), C, rows](std::span<const T> g,
                                                                         const GradRefs<T>& gin) {
          auto gs = gamma.data();
          std::vector<T> dxh(C);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.data() + r * C;
            const T* hr = xhat.data() + r * C;
            if (gin.wants(1))
              for (std::size_t c = 0; c < C; ++c) gin[1][c] += gr[c] * hr[c];
            if (gin.wants(2))
              for (std::size_t c = 0; c < C; ++c) gin[2][c] += gr[c];
            if (!gin.wants(0)) continue;
            T m1 = 0, m2 = 0;
            for (std::size_t c = 0; c < C; ++c) {
              dxh[c] = gr[c] * gs[c];
              m1 += dxh[c];
              m2 += dxh[c] * hr[c];
            }
            m1 /= static_cast<T>(C);
            m2 /= static_cast<T>(C);
            T* dx = gin[0].data() + r * C;
            for (std::size_t c = 0; c < C; ++c) dx[c] += rstd[r] * (dxh[c] - m1 - hr[c] * m2);
          }
        });
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor<T> out(shape, x.vec());
  if (detail::recording<T>({&x})) {
    detail::attach<T>(out, "reshape", {x}, [](std::span<const T> g, const GradRefs<T>& gin) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    });
  }
  return out;
}

/// out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank) throw DimensionError("permute: permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<std::size_t> in_stride(rank);
  std::size_t run = 1;
  for (std::size_t d = rank; d-- > 0;) {
    in_stride[d] = run;
    run *= x.dim(d);
  }
  Shape shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = x.dim(perm[i]);
    stride[i] = in_stride[perm[i]];
  }
  // source offset for each output element
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < src.size(); ++o) {
    src[o] = off;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < shape[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> y(x.numel());
  auto xs = x.data();
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = xs[src[o]];
  Tensor<T> out(std::move(shape), std::move(y));
  if (detail::recording<T>({&x})) {
    detail::attach<T>(out, "permute", {x}, [src = std::move(src)](std::span<const T> g, const GradRefs<T>& gin) {
      for (std::size_t o = 0; o < g.size(); ++o) gin[0][src[o]] += g[o];
    });
  }
  return out;
}

/// Channels [begin, end) of the last axis.
template <class T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t C = x.shape().back(), rows = detail::leading(x.shape());
  if (begin >= end || end > C) throw DimensionError("slice_last: bad range for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  Shape shape = x.shape();
  shape.back() = w;
  std::vector<T> y(rows * w);
  auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xs.data() + r * C + begin, w, y.data() + r * w);
  Tensor<T> out(std::move(shape), std::move(y));
  if (detail::recording<T>({&x})) {
    detail::attach<T>(out, "slice_last", {x}, [rows, C, w, begin](std::span<const T> g, const GradRefs<T>& gin) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) gin[0][r * C + begin + c] += g[r * w + c];
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  Shape sa = a.shape(), sb = b.shape();
  sa.back() = sb.back() = 0;
  if (sa != sb) throw DimensionError("concat_last: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t ca = a.shape().back(), cb = b.shape().back(), rows = detail::leading(a.shape());
  Shape shape = a.shape();
  shape.back() = ca + cb;
  std::vector<T> y(rows * (ca + cb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * ca, ca, y.data() + r * (ca + cb));
    std::copy_n(b.data().data() + r * cb, cb, y.data() + r * (ca + cb) + ca);
  }
  Tensor<T> out(std::move(shape), std::move(y));
  if (detail::recording<T>({&a, &b})) {
    detail::attach<T>(out, "concat_last", {a, b}, [rows, ca, cb](std::span<const T> g, const GradRefs<T>& gin) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * (ca + cb);
        if (gin.wants(0))
          for (std::size_t c = 0; c < ca; ++c) gin[0][r * ca + c] += gr[c];
        if (gin.wants(1))
          for (std::size_t c = 0; c < cb; ++c) gin[1][r * cb + c] += gr[ca + c];
      }
    });
  }
  return out;
}

/// out[..., c] = sum_l gates[..., l] * levels[l][..., c], accumulated in
/// level order. All levels share one shape; gates carry one slice per level.
template <class T>
Tensor<T> gated_aggregate(const std::vector<Tensor<T>>& levels, const Tensor<T>& gates) {
  if (levels.empty()) throw DimensionError("gated_aggregate: no levels");
  const Shape& shape = levels.front().shape();
  const std::size_t nl = levels.size(), C = shape.back(), rows = detail::leading(shape);
  if (gates.shape().back() != nl) {
    throw DimensionError("gated_aggregate: " + std::to_string(nl) + " levels but gates " +
                         shape_str(gates.shape()));
  }
  if (detail::leading(gates.shape()) != rows || gates.rank() != shape.size()) {
    throw DimensionError("gated_aggregate: gates " + shape_str(gates.shape()) + " do not match levels " +
                         shape_str(shape));
  }
  for (const Tensor<T>& z : levels) {
    if (z.shape() != shape) throw DimensionError("gated_aggregate: level shapes differ");
  }
  std::vector<T> y(rows * C, T(0));
  auto gs = gates.data();
  for (std::size_t l = 0; l < nl; ++l) {
    const T* z = levels[l].data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T gv = gs[r * nl + l];
      T* __restrict dst = y.data() + r * C;
      const T* __restrict src = z + r * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += gv * src[c];
    }
  }
  count_flops(2 * nl * rows * C);
  Tensor<T> out(shape, std::move(y));
  std::vector<Tensor<T>> inputs(levels);
  inputs.push_back(gates);
  bool rec = detail::recording<T>({&gates});
  for (const Tensor<T>& z : levels) rec = rec || detail::recording<T>({&z});
  if (rec) {
    detail::attach<T>(out, "gated_aggregate", inputs,
                      [inputs, nl, rows, C](std::span<const T> g, const GradRefs<T>& gin) {
                        auto gs = inputs[nl].data();
                        for (std::size_t l = 0; l < nl; ++l) {
                          const T* z = inputs[l].data().data();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gr = g.data() + r * C;
                            if (gin.wants(l)) {
                              const T gv = gs[r * nl + l];
                              T* dz = gin[l].data() + r * C;
                              for (std::size_t c = 0; c < C; ++c) dz[c] += gv * gr[c];
                            }
                            if (gin.wants(nl)) {
                              T acc = 0;
                              for (std::size_t c = 0; c < C; ++c) acc += gr[c] * z[r * C + c];
                              gin[nl][r * nl + l] += acc;
                            }
                          }
                        }
                      });
  }
  return out;
}

/// Non-overlapping (pt, ph, pw) patches of x: [B,T,H,W,C] become tokens of
/// width pt*ph*pw*C, features ordered (dt, dy, dx, c).
template <class T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t pt, std::size_t ph, std::size_t pw) {
  detail::require_rank(x, 5, "patchify");
  const std::size_t B = x.dim(0), Tn = x.dim(1), H = x.dim(2), W = x.dim(3), C = x.dim(4);
  if (Tn % pt || H % ph || W % pw) {
    throw ConfigError("patchify: input " + shape_str(x.shape()) + " not divisible by patch (" +
                      std::to_string(pt) + "," + std::to_string(ph) + "," + std::to_string(pw) + ")");
  }
  const std::size_t To = Tn / pt, Ho = H / ph, Wo = W / pw, F = pt * ph * pw * C;
  std::vector<std::size_t> src(x.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t h = 0; h < Ho; ++h)
        for (std::size_t w = 0; w < Wo; ++w)
          for (std::size_t dt = 0; dt < pt; ++dt)
            for (std::size_t dy = 0; dy < ph; ++dy)
              for (std::size_t dx = 0; dx < pw; ++dx) {
                const std::size_t base = (((b * Tn + t * pt + dt) * H + h * ph + dy) * W + w * pw + dx) * C;
                for (std::size_t c = 0; c < C; ++c) src[o++] = base + c;
              }
  std::vector<T> y(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[src[i]];
  Tensor<T> out(Shape{B, To, Ho, Wo, F}, std::move(y));
  if (detail::recording<T>({&x})) {
    detail::attach<T>(out, "patchify", {x}, [src = std::move(src)](std::span<const T> g, const GradRefs<T>& gin) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][src[i]] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::recording<T>({&x})) {
    detail::attach<T>(out, "sum", {x}, [](std::span<const T> g, const GradRefs<T>& gin) {
      for (T& v : gin[0]) v += g[0];
    });
  }
  return out;
}

/// Row-wise softmax of [B,K] logits, no graph.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  detail::require_rank(logits, 2, "softmax");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<T> p(B * K);
  auto z = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    T mx = z[b * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[b * K + k]);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += (p[b * K + k] = std::exp(z[b * K + k] - mx));
    for (std::size_t k = 0; k < K; ++k) p[b * K + k] /= s;
  }
  return Tensor<T>(logits.shape(), std::move(p));
}

/// Label-smoothed one-hot targets: 1 - eps on the true class, eps/(K-1)
/// on every other class.
template <class T>
Tensor<T> smoothed_targets(const std::vector<int>& labels, std::size_t num_classes, std::type_identity_t<T> eps) {
  if (num_classes < 2 && eps != T(0)) throw ConfigError("label smoothing needs at least two classes");
  std::vector<T> t(labels.size() * num_classes, num_classes > 1 ? eps / static_cast<T>(num_classes - 1) : T(0));
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= num_classes) {
      throw DimensionError("label " + std::to_string(labels[b]) + " out of range for " +
                           std::to_string(num_classes) + " classes");
    }
    t[b * num_classes + static_cast<std::size_t>(labels[b])] = T(1) - eps;
  }
  return Tensor<T>(Shape{labels.size(), num_classes}, std::move(t));
}

/// Mean over the batch of -sum_k targets_k log softmax(logits)_k.
/// Targets are constants (soft labels from smoothing or mixing).
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  if (targets.shape() != logits.shape()) {
    throw DimensionError("softmax_cross_entropy: targets " + shape_str(targets.shape()) + " vs logits " +
                         shape_str(logits.shape()));
  }
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  Tensor<T> probs = softmax(logits);
  auto z = logits.data();
  auto t = targets.data();
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    T mx = z[b * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[b * K + k]);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[b * K + k] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) loss -= t[b * K + k] * (z[b * K + k] - lse);
  }
  Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(B));
  if (detail::recording<T>({&logits})) {
    detail::attach<T>(out, "softmax_cross_entropy", {logits},
                      [probs, targets, B, K](std::span<const T> g, const GradRefs<T>& gin) {
                        auto p = probs.data();
                        auto t = targets.data();
                        const T sc = g[0] / static_cast<T>(B);
                        for (std::size_t b = 0; b < B; ++b) {
                          T mass = 0;
                          for (std::size_t k = 0; k < K; ++k) mass += t[b * K + k];
                          for (std::size_t k = 0; k < K; ++k)
                            gin[0][b * K + k] += sc * (p[b * K + k] * mass - t[b * K + k]);
                        }
                      });
  }
  return out;
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                                std::type_identity_t<T> label_smoothing) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  return softmax_cross_entropy(logits, smoothed_targets<T>(labels, logits.dim(1), label_smoothing));
}

}  // namespace vfn
