#include "bbgc/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace bbgc {

namespace {
std::atomic<std::size_t> g_override{0};
}

std::size_t worker_count() {
  if (const std::size_t n = g_override.load(); n > 0) return n;
  if (const char* env = std::getenv("BBGC_THREADS"); env && *env) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void set_worker_count(std::size_t n) { g_override.store(n); }

ScopedWorkerCount::ScopedWorkerCount(std::size_t n) : previous_(g_override.load()) { set_worker_count(n); }

ScopedWorkerCount::~ScopedWorkerCount() { set_worker_count(previous_); }

}  // namespace bbgc
