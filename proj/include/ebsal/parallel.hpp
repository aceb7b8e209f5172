#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ebsal {

namespace detail {
inline std::atomic<std::size_t>& thread_count_ref() {
  static std::atomic<std::size_t> n{1};
  return n;
}
}  // namespace detail

// Number of worker threads used by parallel_for. 1 selects the serial path.
inline std::size_t num_threads() { return detail::thread_count_ref().load(); }
inline void set_num_threads(std::size_t n) {
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  detail::thread_count_ref().store(n);
}

// Runs fn(i) for i in [0, n). Work items must write to disjoint outputs;
// callers reduce results in index order so output does not depend on the
// thread count. The first exception thrown by any item is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace ebsal
