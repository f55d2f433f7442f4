#pragma once

#include "gcnuq/influence.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

namespace gcnuq {

// Order-statistic quantile: the ⌈q(n+1)⌉-th smallest value, rank clipped to
// [1, n]. This is the only quantile convention in the library.
template <typename T>
Index quantile_rank(Index n, T q) {
  // q(n+1) that is an integer up to rounding must not round up a full rank.
  const T raw = q * static_cast<T>(n + 1);
  auto k = static_cast<Index>(std::ceil(raw - T(1e-9)));
  return std::clamp<Index>(k, 1, n);
}

template <typename T>
T quantile(std::span<const T> values, T q) {
  if (values.empty()) throw Error(ErrorKind::kEmptySet, "jackknife", "quantile of empty set");
  if (!(q > T(0)) || !(q < T(1))) {
    throw Error(ErrorKind::kInvalidArgument, "jackknife", "quantile level must lie in (0, 1)");
  }
  std::vector<T> v(values.begin(), values.end());
  const Index k = quantile_rank(static_cast<Index>(v.size()), q);
  auto nth = v.begin() + (k - 1);
  std::nth_element(v.begin(), nth, v.end());
  return *nth;
}

template <typename T>
T quantile(const std::vector<T>& values, T q) {
  return quantile(std::span<const T>(values), q);
}

struct IntervalConfig {
  Scalar alpha = 0.025;

  void validate() const;
};

struct Interval {
  Scalar lower = 0.0;
  Scalar upper = 0.0;

  Scalar width() const { return upper - lower; }
};

// Jackknife+: (Q_α{pred_i − err_i}, Q_{1−α}{pred_i + err_i}).
Interval jackknife_plus_generic(std::span<const Scalar> loo_preds_at_test,
                                std::span<const Scalar> loo_errs, Scalar alpha);

// Naive jackknife: (Q_α{pred − err_i}, Q_{1−α}{pred + err_i}).
Interval naive_jackknife(Scalar point_pred, std::span<const Scalar> loo_test_errs, Scalar alpha);

struct NodeUncertainty {
  NodeId node = -1;
  Scalar lower = 0.0;
  Scalar upper = 0.0;
  Scalar width = 0.0;
};

struct LooRecord {
  NodeId node = -1;
  Scalar err = 0.0;
};

// ‖y_node − GCN(node, Θ_loo)‖₂.
Scalar loo_error(const Graph& graph, NodeId node, const LooParams& loo);
Scalar loo_error(const Graph& graph, NodeId node, const Vector& probs);

struct LooEntry {
  LooRecord record;
  LooParams params;
};

// Interval for u from the LOO sweep; u's own record is skipped when u is a
// training node.
NodeUncertainty node_uncertainty(const Graph& graph, NodeId u, std::span<const LooEntry> loo_set,
                                 const IntervalConfig& config);

// Same as node_uncertainty, from precomputed ‖GCN(u, Θ_i)‖₂ values aligned
// with `records`.
NodeUncertainty interval_from_records(NodeId u, std::span<const LooRecord> records,
                                      std::span<const Scalar> norms_at_u, Scalar alpha);

// One influence-based LOO sweep over all training nodes.
std::vector<LooEntry> loo_sweep(const Graph& graph, const GcnParams& params,
                                const InfluenceConfig& iconfig, ResolvedInfluence* resolved = nullptr);

struct QuantifyResult {
  std::vector<NodeUncertainty> intervals;
  ResolvedInfluence influence;
  Scalar epsilon = 0.0;
};

// LOO sweep once, then an interval per target.
QuantifyResult quantify(const Graph& graph, const GcnParams& params, std::span<const NodeId> targets,
                        const InfluenceConfig& iconfig, const IntervalConfig& cconfig);
std::vector<NodeUncertainty> quantify_all(const Graph& graph, const GcnParams& params,
                                          std::span<const NodeId> targets,
                                          const InfluenceConfig& iconfig,
                                          const IntervalConfig& cconfig);

struct ReportHeader {
  Scalar alpha = 0.0;
  Scalar epsilon = 0.0;
  ResolvedInfluence influence;
  int num_layers = 0;
};

// Header lines `# key=value`, then a tab-separated table of node_id, lower,
// upper, width and, when flags are given, outside_field (0/1).
void write_uncertainty_report(std::ostream& out, const ReportHeader& header,
                              std::span<const NodeUncertainty> rows,
                              std::span<const char> outside_field = {});

}  // namespace gcnuq
