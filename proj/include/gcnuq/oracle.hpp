#pragma once

#include "gcnuq/jackknife.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>

namespace gcnuq {

// Pass rule shared by every oracle comparison:
// |a − b| ≤ max(rel_tol · max(|a|, |b|), abs_floor).
template <typename T>
bool within_tolerance(T a, T b, T rel_tol, T abs_floor) {
  const T diff = std::abs(a - b);
  return diff <= std::max(rel_tol * std::max(std::abs(a), std::abs(b)), abs_floor);
}

// |a − b| / max(|a|, |b|, abs_floor / rel_tol); ≤ rel_tol iff within_tolerance.
template <typename T>
T relative_error(T a, T b, T rel_tol, T abs_floor) {
  const T denom = std::max({std::abs(a), std::abs(b), abs_floor / rel_tol});
  return denom > T(0) ? std::abs(a - b) / denom : T(0);
}

struct ErrorSummary {
  Scalar max_rel_err = 0.0;
  Scalar mean_rel_err = 0.0;
  Scalar max_abs_err = 0.0;
  Index worst_coordinate = -1;
  Index failures = 0;

  bool passed() const { return failures == 0; }
};

// Entrywise comparison; worst_coordinate is a column-major flat index.
template <typename DerivedA, typename DerivedB>
ErrorSummary compare(const Eigen::MatrixBase<DerivedA>& actual, const Eigen::MatrixBase<DerivedB>& expected,
                     Scalar rel_tol, Scalar abs_floor) {
  if (actual.rows() != expected.rows() || actual.cols() != expected.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "oracle", "compared arrays differ in shape");
  }
  ErrorSummary s;
  Scalar sum = 0.0;
  Index k = 0;
  for (Index c = 0; c < actual.cols(); ++c) {
    for (Index r = 0; r < actual.rows(); ++r, ++k) {
      const Scalar a = actual(r, c), b = expected(r, c);
      const Scalar rel = relative_error(a, b, rel_tol, abs_floor);
      sum += rel;
      s.max_abs_err = std::max(s.max_abs_err, std::abs(a - b));
      if (!within_tolerance(a, b, rel_tol, abs_floor) || !std::isfinite(rel)) ++s.failures;
      if (s.worst_coordinate < 0 || rel > s.max_rel_err) {
        s.max_rel_err = rel;
        s.worst_coordinate = k;
      }
    }
  }
  s.mean_rel_err = k > 0 ? sum / static_cast<Scalar>(k) : 0.0;
  return s;
}

// Retrains from the same seeded init with leave_out's loss term removed; the
// node stays in the graph.
GcnParams retrain_loo(const Graph& graph, const TrainConfig& train_cfg, NodeId leave_out);

inline constexpr Scalar kFdStep = 1e-5;

// Central differences of a scalar function.
Vector fd_gradient(const std::function<Scalar(const Vector&)>& f, const Vector& x, Scalar step = kFdStep);

// Central differences of the mean loss over `nodes` for every weight.
LayerGradient fd_gradient(const Graph& graph, const GcnParams& params, std::span<const NodeId> nodes,
                          Scalar step = kFdStep);

// Central differences of the mean-loss gradient over `nodes`.
struct FdHessianOptions {
  Scalar step = kFdStep;
  // Hold ∂R/∂E^(L) at its base value, leaving only the network-composition
  // part of the Hessian.
  bool freeze_output_gradient = false;
};

struct FdHessian {
  Matrix hessian;        // symmetrized (H + Hᵀ)/2
  Scalar asymmetry = 0;  // ‖H − Hᵀ‖_max before symmetrization
};

FdHessian fd_hessian(const Graph& graph, const GcnParams& params, std::span<const NodeId> nodes,
                     const FdHessianOptions& options = {});

// (H + λI)⁻¹ f by a full-pivot LU; kSingular if the system is singular.
Vector direct_solve(const Matrix& hessian, const Vector& f, Scalar damping);

// Dense (H_flat + λI)⁻¹ ∇_Θ r(node), H over the training mean loss.
FlatGradient direct_influence(const Graph& graph, const GcnParams& params, NodeId node, Scalar damping);

// Spearman rank correlation with average ranks for ties; 0 when either side
// is constant.
Scalar spearman(std::span<const Scalar> a, std::span<const Scalar> b);

struct LooComparison {
  std::vector<NodeId> nodes;
  std::vector<Scalar> influence_err;
  std::vector<Scalar> retrain_err;
  double influence_ms = 0.0;
  double retrain_ms = 0.0;
};

// LOO errors of every training node (or the first `limit` of them) by the
// influence sweep and by brute-force retraining from the same params/init.
LooComparison compare_loo(const Graph& graph, const TrainConfig& train_cfg, const GcnParams& params,
                          const InfluenceConfig& icfg, std::optional<Index> limit = std::nullopt);

struct OracleReport {
  std::optional<ErrorSummary> errors;
  std::optional<Scalar> spearman_rho;
  std::map<std::string, double> wall_ms;
  std::optional<double> speedup;

  std::string to_json() const;
};

// Trains on the first n_train pool nodes, then times a full LOO sweep by
// influence against one by retraining. Both run single-threaded.
OracleReport speedup_benchmark(const Graph& graph, const TrainConfig& train_cfg,
                               const InfluenceConfig& icfg, Index n_train);

struct VerificationCheck {
  std::string name;
  Scalar max_rel_err = 0.0;
  Scalar tolerance = 0.0;
  bool passed = false;
};

// Gradient, Hessian (full, composition part, zero diagonal blocks,
// symmetry), HVP and inverse-HVP checks against the oracles on a seeded
// 8-node, 2-layer instance.
std::vector<VerificationCheck> verify_small_instance(std::uint64_t seed);

// Norm-wise ‖a − b‖ / ‖b‖ (0 when both vanish).
Scalar relative_norm_error(const Vector& a, const Vector& b);

}  // namespace gcnuq
