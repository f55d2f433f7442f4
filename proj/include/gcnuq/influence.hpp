#pragma once

#include "gcnuq/derivatives.hpp"

#include <functional>
#include <optional>
#include <span>

namespace gcnuq {

struct InfluenceConfig {
  // Nodes drawn per iteration; unset means min(16, |V_train|).
  std::optional<Index> sample_batch;
  Index iterations = 100;
  Scalar damping = 0.01;
  // Recursion scale s; unset means 1 / ⌈‖H + λI‖₂⌉ from a power-iteration
  // estimate.
  std::optional<Scalar> scale;
  std::uint64_t seed = 0;
  // Relative-change early stop; 0 runs all iterations.
  Scalar early_stop = 0.0;
  int spectral_iterations = 20;
  unsigned workers = 1;

  void validate() const;
};

// Applies the (sampled) flat Hessian of the mean loss over `batch` to x.
using SampledHessian = std::function<Vector(const Vector& x, std::span<const NodeId> batch)>;

// Settings the recursion ran with after defaults were resolved.
struct ResolvedInfluence {
  Index sample_batch = 0;
  Index iterations = 0;
  Scalar damping = 0.0;
  Scalar scale = 1.0;
  Scalar spectral_norm = 0.0;
  std::uint64_t seed = 0;
};

// Stochastic inverse-HVP recursion
//   x ← f + (I − s(Ĥ + λI)) x,  x₀ = f,
// with Ĥ drawn over a fresh batch (without replacement) each iteration;
// returns s·x ≈ (H + λI)⁻¹ f.
Vector neumann_inverse_hvp(const Vector& f, const SampledHessian& hessian,
                           std::span<const NodeId> pool, Index batch, Index iterations,
                           Scalar damping, Scalar scale, std::uint64_t seed, Scalar early_stop = 0.0);

// Largest |eigenvalue| of a symmetric operator by power iteration.
Scalar spectral_norm_estimate(const std::function<Vector(const Vector&)>& op, Index size,
                              int iterations, std::uint64_t seed);

// Shared state for many influence solves against one (graph, params):
// the full forward trace, the resolved batch size and the recursion scale.
class InfluenceSolver {
 public:
  InfluenceSolver(const Graph& graph, GcnParams params, const InfluenceConfig& config);

  const ResolvedInfluence& resolved() const { return resolved_; }
  const ParamLayout& layout() const { return layout_; }
  const GcnParams& params() const { return params_; }
  const ForwardTrace& trace() const { return trace_; }

  // Ĥ over the batch, evaluated on the batch's receptive field.
  Vector sampled_hvp(const Vector& x, std::span<const NodeId> batch) const;
  // (H + λI)⁻¹ f with the given sampling stream.
  FlatGradient solve(const FlatGradient& f, std::uint64_t stream_seed) const;
  // flatten(∇_Θ r(node)) on the node's receptive field.
  FlatGradient node_gradient(NodeId node) const;
  // (H + λI)⁻¹ ∇_Θ r(node); the sampling stream is derived from
  // (seed, node) so results do not depend on evaluation order.
  FlatGradient node_influence(NodeId node) const;

 private:
  const Graph& graph_;
  GcnParams params_;
  InfluenceConfig config_;
  ParamLayout layout_;
  ForwardTrace trace_;
  ResolvedInfluence resolved_;
};

FlatGradient hvp_solve(const Graph& graph, const GcnParams& params, const FlatGradient& f_u,
                       const InfluenceConfig& config);
FlatGradient node_influence(const Graph& graph, const GcnParams& params, NodeId node,
                            const InfluenceConfig& config);

struct LooParams {
  NodeId node = -1;
  GcnParams params;
  Scalar epsilon = 0.0;
};

// ε = −1/|V_train|.
Scalar loo_epsilon(const Graph& graph);

// Θ + ε · unflatten(influence).
LooParams loo_params(const GcnParams& params, const FlatGradient& influence, Scalar epsilon,
                     NodeId node = -1);

}  // namespace gcnuq
