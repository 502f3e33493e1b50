#pragma once

// Raw loops behind the differentiable ops. Every output element of a kernel
// is produced by the same instruction sequence regardless of its position
// (row tails are padded through the main path), so identical inputs give
// bit-identical outputs wherever they sit in a batch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <type_traits>
#include <cstddef>
#include <cstring>
#include <vector>

#include "vfn/parallel.hpp"

namespace vfn::kernels {

namespace detail {

// 64-byte lane group; the compiler lowers it to the widest vectors the target has.
template <class T>
using Vec [[gnu::vector_size(64)]] = T;

template <class T>
inline constexpr std::size_t kLanes = 64 / sizeof(T);

template <class T>
inline Vec<T> load(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <class T, class V>
inline void store(T* p, const V& v) {
  std::memcpy(p, &v, sizeof v);
}

/// y[R, V*lanes] += x[R,K] · w[K, V*lanes], accumulated in registers.
template <class T, std::size_t R, std::size_t V>
inline void gemm_tile(const T* __restrict x, std::size_t ldx, const T* __restrict w, std::size_t ldw,
                      T* __restrict y, std::size_t ldy, std::size_t K) {
  constexpr std::size_t L = kLanes<T>;
  Vec<T> acc[R][V];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < V; ++v) acc[r][v] = load(y + r * ldy + v * L);
  for (std::size_t k = 0; k < K; ++k) {
    Vec<T> b[V];
    for (std::size_t v = 0; v < V; ++v) b[v] = load(w + k * ldw + v * L);
    for (std::size_t r = 0; r < R; ++r) {
      const T a = x[r * ldx + k];
      for (std::size_t v = 0; v < V; ++v) acc[r][v] += a * b[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < V; ++v) store(y + r * ldy + v * L, acc[r][v]);
}

inline constexpr std::size_t kRows = 4;

/// kRows rows of y (+)= x · w. Columns past the last full lane group go
/// through the same tile on zero-padded copies (`wtail` is w's last columns
/// padded to one lane group).
template <class T>
inline void gemm_rows(const T* x, std::size_t ldx, const T* w, const T* wtail, T* y, std::size_t K,
                      std::size_t N) {
  constexpr std::size_t L = kLanes<T>;
  std::size_t j = 0;
  for (; j + 2 * L <= N; j += 2 * L) gemm_tile<T, kRows, 2>(x, ldx, w + j, N, y + j, N, K);
  for (; j + L <= N; j += L) gemm_tile<T, kRows, 1>(x, ldx, w + j, N, y + j, N, K);
  if (j < N) {
    const std::size_t cols = N - j;
    T ytail[kRows * L] = {};
    for (std::size_t r = 0; r < kRows; ++r) std::copy(y + r * N + j, y + r * N + N, ytail + r * L);
    gemm_tile<T, kRows, 1>(x, ldx, wtail, L, ytail, L, K);
    for (std::size_t r = 0; r < kRows; ++r) std::copy(ytail + r * L, ytail + r * L + cols, y + r * N + j);
  }
}

}  // namespace detail

/// y[M,N] (+)= x[M,K] · w[K,N], all row-major.
template <class T>
void gemm(const T* x, const T* w, T* y, std::size_t M, std::size_t K, std::size_t N, bool accumulate) {
  constexpr std::size_t L = detail::kLanes<T>;
  std::vector<T> wtail;
  if (N % L) {
    const std::size_t j = N - N % L;
    wtail.assign(K * L, T(0));
    for (std::size_t k = 0; k < K; ++k) std::copy(w + k * N + j, w + k * N + N, wtail.begin() + k * L);
  }
  constexpr std::size_t R = detail::kRows;
  const std::size_t blocks = (M + R - 1) / R;
  parallel_for(blocks, M * K * N, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> xpad, ypad;
    for (std::size_t blk = lo; blk < hi; ++blk) {
      const std::size_t i = blk * R;
      const std::size_t rows = std::min(R, M - i);
      if (rows == R) {
        T* y0 = y + i * N;
        if (!accumulate) std::fill(y0, y0 + R * N, T(0));
        detail::gemm_rows(x + i * K, K, w, wtail.data(), y0, K, N);
        continue;
      }
      xpad.assign(R * K, T(0));
      ypad.assign(R * N, T(0));
      std::copy(x + i * K, x + (i + rows) * K, xpad.begin());
      if (accumulate) std::copy(y + i * N, y + (i + rows) * N, ypad.begin());
      detail::gemm_rows(xpad.data(), K, w, wtail.data(), ypad.data(), K, N);
      std::copy(ypad.begin(), ypad.begin() + rows * N, y + i * N);
    }
  });
}

template <class T>
std::vector<T> transpose(const T* w, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = w[r * cols + c];
  return out;
}

/// dw[K,N] += x[M,K]^T · dy[M,N]. Rows are visited in chunks that stay in
/// cache; within each dw element the reduction over M runs in row order.
template <class T>
void gemm_tn_accumulate(const T* x, const T* dy, T* dw, std::size_t M, std::size_t K, std::size_t N) {
  using detail::load;
  using detail::store;
  using V = detail::Vec<T>;
  constexpr std::size_t L = detail::kLanes<T>, chunk = 128;
  const std::size_t kfull = K - K % 4, nfull = N - N % L;
  parallel_for(1, M * K * N, [&](std::size_t, std::size_t) {
    for (std::size_t i0 = 0; i0 < M; i0 += chunk) {
      const std::size_t i1 = std::min(M, i0 + chunk);
      for (std::size_t k = 0; k < kfull; k += 4) {
        std::size_t j = 0;
        for (; j + 2 * L <= N; j += 2 * L) {
          V acc[4][2];
          for (std::size_t r = 0; r < 4; ++r) {
            acc[r][0] = load(dw + (k + r) * N + j);
            acc[r][1] = load(dw + (k + r) * N + j + L);
          }
          for (std::size_t i = i0; i < i1; ++i) {
            const V d0 = load(dy + i * N + j), d1 = load(dy + i * N + j + L);
            const T* xi = x + i * K + k;
            for (std::size_t r = 0; r < 4; ++r) {
              acc[r][0] += xi[r] * d0;
              acc[r][1] += xi[r] * d1;
            }
          }
          for (std::size_t r = 0; r < 4; ++r) {
            store(dw + (k + r) * N + j, acc[r][0]);
            store(dw + (k + r) * N + j + L, acc[r][1]);
          }
        }
        for (; j < nfull; j += L) {
          V acc[4];
          for (std::size_t r = 0; r < 4; ++r) acc[r] = load(dw + (k + r) * N + j);
          for (std::size_t i = i0; i < i1; ++i) {
            const V d = load(dy + i * N + j);
            for (std::size_t r = 0; r < 4; ++r) acc[r] += x[i * K + k + r] * d;
          }
          for (std::size_t r = 0; r < 4; ++r) store(dw + (k + r) * N + j, acc[r]);
        }
      }
      // Leftover rows and columns of dw, element by element.
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const T a = x[i * K + k];
          T* __restrict row = dw + k * N;
          const T* __restrict d = dy + i * N;
          for (std::size_t c = k < kfull ? nfull : 0; c < N; ++c) row[c] += a * d[c];
        }
    }
  });
}

/// Depthwise 2-D correlation, channels last, zero "same" padding.
/// x,y: [N,H,W,C]; k: [ks,ks,C].
template <class T>
void dwconv2d(const T* x, const T* k, T* y, std::size_t N, std::size_t H, std::size_t W, std::size_t C,
              std::size_t ks) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(ks / 2);
  const std::ptrdiff_t h_size = static_cast<std::ptrdiff_t>(H), w_size = static_cast<std::ptrdiff_t>(W);
  parallel_for(N * H, N * H * W * C * ks * ks, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t nh = lo; nh < hi; ++nh) {
      const std::size_t n = nh / H;
      const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(nh % H);
      T* __restrict out = y + nh * W * C;
      std::fill(out, out + W * C, T(0));
      for (std::ptrdiff_t dy = 0; dy < static_cast<std::ptrdiff_t>(ks); ++dy) {
        const std::ptrdiff_t sh = h + dy - r;
        if (sh < 0 || sh >= h_size) continue;
        const T* src_row = x + (n * H + static_cast<std::size_t>(sh)) * W * C;
        for (std::ptrdiff_t dx = 0; dx < static_cast<std::ptrdiff_t>(ks); ++dx) {
          const T* __restrict tap = k + (static_cast<std::size_t>(dy) * ks + static_cast<std::size_t>(dx)) * C;
          const std::ptrdiff_t w_lo = std::max<std::ptrdiff_t>(0, r - dx);
          const std::ptrdiff_t w_hi = std::min<std::ptrdiff_t>(w_size, w_size + r - dx);
          for (std::ptrdiff_t w = w_lo; w < w_hi; ++w) {
            const T* __restrict src = src_row + static_cast<std::size_t>(w + dx - r) * C;
            T* __restrict dst = out + static_cast<std::size_t>(w) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * tap[c];
          }
        }
      }
    }
  });
}

/// Backward of dwconv2d: gx += correlation transpose, gk += input-gradient
/// products. Either output may be null.
template <class T>
void dwconv2d_backward(const T* x, const T* k, const T* gy, T* gx, T* gk, std::size_t N, std::size_t H,
                       std::size_t W, std::size_t C, std::size_t ks) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(ks / 2);
  const std::ptrdiff_t h_size = static_cast<std::ptrdiff_t>(H), w_size = static_cast<std::ptrdiff_t>(W);
  for (std::size_t nh = 0; nh < N * H; ++nh) {
    const std::size_t n = nh / H;
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(nh % H);
    const T* g_row = gy + nh * W * C;
    for (std::ptrdiff_t dy = 0; dy < static_cast<std::ptrdiff_t>(ks); ++dy) {
      const std::ptrdiff_t sh = h + dy - r;
      if (sh < 0 || sh >= h_size) continue;
      const std::size_t src_off = (n * H + static_cast<std::size_t>(sh)) * W * C;
      for (std::ptrdiff_t dx = 0; dx < static_cast<std::ptrdiff_t>(ks); ++dx) {
        const std::size_t tap_off = (static_cast<std::size_t>(dy) * ks + static_cast<std::size_t>(dx)) * C;
        const std::ptrdiff_t w_lo = std::max<std::ptrdiff_t>(0, r - dx);
        const std::ptrdiff_t w_hi = std::min<std::ptrdiff_t>(w_size, w_size + r - dx);
        for (std::ptrdiff_t w = w_lo; w < w_hi; ++w) {
          const std::size_t s = src_off + static_cast<std::size_t>(w + dx - r) * C;
          const T* __restrict g = g_row + static_cast<std::size_t>(w) * C;
          if (gx) {
            T* __restrict dst = gx + s;
            const T* __restrict tap = k + tap_off;
            for (std::size_t c = 0; c < C; ++c) dst[c] += g[c] * tap[c];
          }
          if (gk) {
            T* __restrict dk = gk + tap_off;
            const T* __restrict src = x + s;
            for (std::size_t c = 0; c < C; ++c) dk[c] += g[c] * src[c];
          }
        }
      }
    }
  }
}

/// Depthwise 1-D correlation along the middle axis of x viewed as
/// [outer, len, inner]; channel of inner index m is m % C. k: [ks, C].
template <class T>
void dwconv1d(const T* x, const T* k, T* y, std::size_t outer, std::size_t len, std::size_t inner, std::size_t C,
              std::size_t ks) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(ks / 2);
  const std::size_t groups = inner / C;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t < len; ++t) {
      T* __restrict out = y + (o * len + t) * inner;
      std::fill(out, out + inner, T(0));
      for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(ks); ++j) {
        const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(t) + j - r;
        if (st < 0 || st >= static_cast<std::ptrdiff_t>(len)) continue;
        const T* src = x + (o * len + static_cast<std::size_t>(st)) * inner;
        const T* __restrict tap = k + static_cast<std::size_t>(j) * C;
        for (std::size_t g = 0; g < groups; ++g) {
          const T* __restrict s = src + g * C;
          T* __restrict d = out + g * C;
          for (std::size_t c = 0; c < C; ++c) d[c] += s[c] * tap[c];
        }
      }
    }
  }
}

template <class T>
void dwconv1d_backward(const T* x, const T* k, const T* gy, T* gx, T* gk, std::size_t outer, std::size_t len,
                       std::size_t inner, std::size_t C, std::size_t ks) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(ks / 2);
  const std::size_t groups = inner / C;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t < len; ++t) {
      const T* g_row = gy + (o * len + t) * inner;
      for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(ks); ++j) {
        const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(t) + j - r;
        if (st < 0 || st >= static_cast<std::ptrdiff_t>(len)) continue;
        const std::size_t s_off = (o * len + static_cast<std::size_t>(st)) * inner;
        const std::size_t tap_off = static_cast<std::size_t>(j) * C;
        for (std::size_t g = 0; g < groups; ++g) {
          const T* __restrict gr = g_row + g * C;
          if (gx) {
            T* __restrict d = gx + s_off + g * C;
            for (std::size_t c = 0; c < C; ++c) d[c] += gr[c] * k[tap_off + c];
          }
          if (gk) {
            const T* __restrict s = x + s_off + g * C;
            for (std::size_t c = 0; c < C; ++c) gk[tap_off + c] += gr[c] * s[c];
          }
        }
      }
    }
  }
}

namespace detail {

using VecF = Vec<float>;
using VecI [[gnu::vector_size(64)]] = std::int32_t;

// exp on a lane group for arguments in [-87, 0]: Cody-Waite reduction and a
// degree-7 polynomial, about 1 ulp.
inline VecF exp_nonpos(VecF y) {
  y = y < -87.0f ? VecF{} - 87.0f : y;
  const VecF k = (y * std::numbers::log2e_v<float> + 12582912.0f) - 12582912.0f;
  const VecF r = (y - k * 0.693359375f) - k * -2.12194440e-4f;
  VecF p = 1.9875691500e-4f + VecF{};
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const VecI bits = (__builtin_convertvector(k, VecI) + 127) << 23;
  VecF scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return p * scale;
}

// Standard normal cdf through the rational erfc bound (abs error < 1e-7).
// The lower tail is formed directly, so it keeps its relative accuracy.
inline VecF normal_cdf(VecF x) {
  const VecF z = (x < 0.0f ? -x : x) * static_cast<float>(std::numbers::sqrt2 / 2);
  const VecF t = 1.0f / (z * 0.3275911f + 1.0f);
  VecF p = 1.061405429f + VecF{};
  p = p * t - 1.453152027f;
  p = p * t + 1.421413741f;
  p = p * t - 0.284496736f;
  p = p * t + 0.254829592f;
  const VecF tail = 0.5f * p * t * exp_nonpos(-z * z);
  return x < 0.0f ? tail : 1.0f - tail;
}

inline VecF normal_pdf(VecF x) {
  return exp_nonpos(-0.5f * x * x) * static_cast<float>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
}

template <class F>
void map_lanes(const float* x, float* y, std::size_t n, F f) {
  constexpr std::size_t L = kLanes<float>;
  std::size_t i = 0;
  for (; i + L <= n; i += L) store(y + i, f(load(x + i)));
  if (i < n) {
    float in[L] = {}, out[L];
    std::memcpy(in, x + i, (n - i) * sizeof(float));
    store(out, f(load(in)));
    std::memcpy(y + i, out, (n - i) * sizeof(float));
  }
}

}  // namespace detail

/// Standard normal cdf and density, elementwise. Double precision uses the
/// libm erf and exp; single precision runs a vectorised approximation.
template <class T>
void normal_cdf(const T* x, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    detail::map_lanes(x, y, n, [](detail::VecF v) { return detail::normal_cdf(v); });
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = T(0.5) * (T(1) + std::erf(x[i] * T(std::numbers::sqrt2 / 2)));
  }
}

template <class T>
void normal_pdf(const T* x, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    detail::map_lanes(x, y, n, [](detail::VecF v) { return detail::normal_pdf(v); });
  } else {
    for (std::size_t i = 0; i < n; ++i)
      y[i] = std::exp(T(-0.5) * x[i] * x[i]) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  }
}

}  // namespace vfn::kernels
