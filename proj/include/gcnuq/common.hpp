#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gcnuq {

/************ dense / sparse bindings *********************/
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using SparseRowMatrix = Eigen::SparseMatrix<Scalar, Eigen::RowMajor, int>;

// The model is 64-bit throughout; the finite-difference tolerances assume it.
using Scalar = double;
using Matrix = MatrixX<Scalar>;
using Vector = VectorX<Scalar>;
using SparseMatrix = SparseRowMatrix<Scalar>;
using Index = Eigen::Index;
using NodeId = std::int64_t;

/************ errors **************************************/
enum class ErrorKind {
  kParse,
  kOutOfRange,
  kDuplicateEdge,
  kSelfLoop,
  kMaskOverlap,
  kShapeMismatch,
  kInvalidArgument,
  kEmptySet,
  kDivergence,
  kSpectralNorm,
  kTooLarge,
  kSingular,
  kIo,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, const std::string& message)
      : std::runtime_error(message), kind_(kind), module_(std::move(module)) {}

  ErrorKind kind() const { return kind_; }
  const std::string& module() const { return module_; }

 private:
  ErrorKind kind_;
  std::string module_;
};

/************ seeding *************************************/
// splitmix64 finalizer; used to fan a base seed out into independent streams.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  return mix_seed(mix_seed(base) ^ (tag * 0xd1b54a32d192ed03ULL));
}

// Purpose tags for derive_seed.
enum class SeedPurpose : std::uint64_t {
  kInit = 1,
  kSampling = 2,
  kAcquisition = 3,
  kSplit = 4,
  kSynth = 5,
};

constexpr std::uint64_t derive_seed(std::uint64_t base, SeedPurpose purpose) {
  return derive_seed(base, static_cast<std::uint64_t>(purpose));
}

/************ logging *************************************/
enum class LogLevel { kQuiet = 0, kWarning = 1, kInfo = 2 };
void set_log_level(LogLevel level);
LogLevel log_level();
void log_warning(const std::string& message);
void log_info(const std::string& message);

/************ parallelism *********************************/
inline unsigned default_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

// Runs fn(i) for i in [0, count) on up to `workers` threads. Each index is
// handled by exactly one call, so callers writing into slot i stay
// deterministic regardless of scheduling.
void parallel_for(Index count, unsigned workers, const std::function<void(Index)>& fn);

}  // namespace gcnuq
