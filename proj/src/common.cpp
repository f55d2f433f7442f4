#include "gcnuq/common.hpp"

#include <atomic>
#include <exception>
#include <iostream>
#include <mutex>

namespace gcnuq {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kOutOfRange: return "out_of_range";
    case ErrorKind::kDuplicateEdge: return "duplicate_edge";
    case ErrorKind::kSelfLoop: return "self_loop";
    case ErrorKind::kMaskOverlap: return "mask_overlap";
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kEmptySet: return "empty_set";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kSpectralNorm: return "spectral_norm";
    case ErrorKind::kTooLarge: return "too_large";
    case ErrorKind::kSingular: return "singular";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::kWarning)};
std::mutex g_log_mutex;
}  // namespace

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }
LogLevel log_level() { return static_cast<LogLevel>(g_level.load()); }

void log_warning(const std::string& message) {
  if (g_level.load() < static_cast<int>(LogLevel::kWarning)) return;
  std::lock_guard lock(g_log_mutex);
  std::cerr << "[warn] " << message << '\n';
}

void log_info(const std::string& message) {
  if (g_level.load() < static_cast<int>(LogLevel::kInfo)) return;
  std::lock_guard lock(g_log_mutex);
  std::cerr << "[info] " << message << '\n';
}

void parallel_for(Index count, unsigned workers, const std::function<void(Index)>& fn) {
  if (count <= 0) return;
  const auto n_threads = static_cast<Index>(std::max(1u, workers));
  if (n_threads == 1 || count == 1) {
    for (Index i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    const Index spawned = std::min(n_threads, count);
    pool.reserve(static_cast<std::size_t>(spawned));
    for (Index t = 0; t < spawned; ++t) {
      pool.emplace_back([&] {
        for (Index i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace gcnuq
