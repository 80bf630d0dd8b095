#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace lcp {

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{0};  // 0 = hardware concurrency
  return cap;
}
}  // namespace detail

/// Global worker-count cap (the CLI's --threads). 0 means "use the hardware".
inline void set_thread_cap(int n) { detail::thread_cap().store(n); }

inline int effective_threads(std::int64_t work_items) {
  int cap = detail::thread_cap().load();
  if (cap <= 0) cap = static_cast<int>(std::thread::hardware_concurrency());
  if (cap < 1) cap = 1;
  if (work_items < cap) cap = static_cast<int>(work_items);
  return cap;
}

/// Runs fn(i) for i in [0, n). Each index must write only its own output
/// slot; results are then combined by the caller in index order, so the
/// outcome is bit-identical for any worker count.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  if (n <= 0) return;
  const int workers = effective_threads(n);
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&]() {
      while (true) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failed.load() && error) std::rethrow_exception(error);
}

}  // namespace lcp
