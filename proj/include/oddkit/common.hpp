#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

namespace oddkit {

/// Base class for every error the library raises.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid argument or violated precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not line up for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed input document; carries the byte offset of the failure.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what), byte_offset_(byte_offset) {}
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

/// Value outside the numeric domain of an operation (zero norms, non-finite).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad run configuration (paths, incompatible sizes, missing fields).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Object patch extraction failed (empty or out-of-bounds mask).
class ExtractionError : public Error {
 public:
  using Error::Error;
};

/// File could not be read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3 };

namespace detail {
inline LogLevel& log_threshold() {
  static LogLevel level = LogLevel::warn;
  return level;
}
inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

inline void set_log_level(LogLevel level) { detail::log_threshold() = level; }

inline void log_msg(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) < static_cast<int>(detail::log_threshold())) return;
  static const char* names[] = {"debug", "info", "warn", "error"};
  std::lock_guard<std::mutex> lock(detail::log_mutex());
  std::cerr << "[oddkit:" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

/// Flushes subnormal floats to zero (FTZ + DAZ) while alive. Trained float32
/// nets push activations and gradients through exp() tails where subnormal
/// arithmetic runs ~100x slower on x86, and values below ~1e-38 carry no
/// signal at that precision anyway. The flag is per thread; every worker that
/// wants it must hold its own guard. Restored on destruction.
class DenormalGuard {
 public:
  DenormalGuard() {
#if defined(__SSE2__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040);
#endif
  }
  ~DenormalGuard() {
#if defined(__SSE2__)
    _mm_setcsr(saved_);
#endif
  }
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;

 private:
#if defined(__SSE2__)
  unsigned saved_ = 0;
#endif
};

/// Worker budget: min(hardware, ODDKIT_THREADS); at least 1.
inline int max_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("ODDKIT_THREADS")) {
    char* end = nullptr;
    long cap = std::strtol(env, &end, 10);
    if (end != env && cap >= 1 && cap < hw) hw = static_cast<int>(cap);
  }
  return hw;
}

/// Runs fn(i) for i in [0, n). With threads <= 1 runs inline on the calling
/// thread. Work is split into contiguous blocks; fn must not depend on
/// scheduling for its result.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn,
                         int threads = -1) {
  if (threads < 0) threads = max_threads();
  if (threads <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (threads > n) threads = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::int64_t block = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    std::int64_t lo = t * block;
    std::int64_t hi = std::min(n, lo + block);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace oddkit
