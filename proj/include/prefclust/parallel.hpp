#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace prefclust {

/// Runs fn(i) for i in [0, n) on up to `threads` threads. Each index runs exactly once and
/// callers write results into per-index slots, so output never depends on the thread count.
/// If several calls throw, the exception from the lowest index is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (n == 0) return;
  threads = std::clamp<std::size_t>(threads, 1, n);
  std::vector<std::exception_ptr> errors(n);
  const auto run = [&](std::size_t begin) {
    for (std::size_t i = begin; i < n; i += threads) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run, t);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace prefclust
