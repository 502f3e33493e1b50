#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace vfn {

namespace detail {
inline std::size_t& thread_setting() {
  static std::size_t threads = 1;
  return threads;
}
}  // namespace detail

/// Worker count used by op kernels. Work is split by output element, so
/// results are bit-identical for every thread count.
inline void set_num_threads(std::size_t n) { detail::thread_setting() = std::max<std::size_t>(1, n); }
inline std::size_t num_threads() { return detail::thread_setting(); }

/// Runs fn(lo, hi) over contiguous chunks of [0, n). `work` is a rough cost
/// estimate; small jobs stay on the calling thread.
template <class Fn>
void parallel_for(std::size_t n, std::size_t work, Fn&& fn) {
  std::size_t threads = std::min(num_threads(), n);
  if (threads <= 1 || work < (std::size_t{1} << 18)) {
    if (n) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads - 1);
  std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo < hi) pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
}

}  // namespace vfn
