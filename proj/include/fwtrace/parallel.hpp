#ifndef FWTRACE_PARALLEL_HPP_
#define FWTRACE_PARALLEL_HPP_

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace fwtrace {

// FWTRACE_WORKERS, or 1 when unset or malformed.
inline std::size_t default_workers() {
  if (const char* env = std::getenv("FWTRACE_WORKERS")) {
    try {
      const long n = std::stol(env);
      if (n > 0) return static_cast<std::size_t>(n);
    } catch (...) {
    }
  }
  return 1;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is owned
// by exactly one call, so writing results into slot i needs no locking. The
// first exception (by index) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace fwtrace

#endif  // FWTRACE_PARALLEL_HPP_
