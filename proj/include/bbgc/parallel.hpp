#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bbgc {

// Worker count: an explicit override if set, else BBGC_THREADS, else the
// hardware default.
std::size_t worker_count();

// 0 clears the override.
void set_worker_count(std::size_t n);

class ScopedWorkerCount {
 public:
  explicit ScopedWorkerCount(std::size_t n);
  ~ScopedWorkerCount();
  ScopedWorkerCount(const ScopedWorkerCount&) = delete;
  ScopedWorkerCount& operator=(const ScopedWorkerCount&) = delete;

 private:
  std::size_t previous_;
};

// Calls fn(begin, end) over contiguous static chunks of [0, n). Callers must
// make each index's result independent of the chunking; every parallel loop
// in the library writes per-index outputs only.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t min_chunk = 1) {
  if (n == 0) return;
  const std::size_t workers =
      std::max<std::size_t>(1, std::min(worker_count(), (n + min_chunk - 1) / std::max<std::size_t>(1, min_chunk)));
  if (workers == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> threads;
    threads.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      if (begin >= end) break;
      threads.emplace_back([&, begin, end] {
        try {
          fn(begin, end);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace bbgc
