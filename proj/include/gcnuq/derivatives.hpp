#pragma once

#include "gcnuq/gcn.hpp"

#include <span>
#include <vector>

namespace gcnuq {

// ∂loss/∂W^(l) for every layer, shaped like GcnParams.
struct LayerGradient {
  std::vector<Matrix> layers;

  const Matrix& layer(int l) const { return layers[static_cast<std::size_t>(l - 1)]; }
};

// Vertically stacked, per-layer column-major vectorization. This is the one
// layout shared by flatten, unflatten and every flat Hessian.
using FlatGradient = Vector;

class ParamLayout {
 public:
  explicit ParamLayout(const GcnParams& params);
  explicit ParamLayout(const LayerGradient& gradient);

  int num_layers() const { return static_cast<int>(rows_.size()); }
  Index size() const { return offsets_.back(); }
  Index rows(int l) const { return rows_[static_cast<std::size_t>(l - 1)]; }
  Index cols(int l) const { return cols_[static_cast<std::size_t>(l - 1)]; }
  Index offset(int l) const { return offsets_[static_cast<std::size_t>(l - 1)]; }
  // Flat index of W^(l)[r, c].
  Index index(int l, Index r, Index c) const { return offset(l) + r + c * rows(l); }

  bool matches(const GcnParams& params) const;

 private:
  std::vector<Index> rows_, cols_, offsets_;
};

FlatGradient flatten(const LayerGradient& gradient);
FlatGradient flatten(const GcnParams& params);
LayerGradient unflatten(const FlatGradient& flat, const ParamLayout& layout);
GcnParams unflatten_params(const FlatGradient& flat, const ParamLayout& layout);

// ∂loss/∂E^(l) for l = 1..L from ∂loss/∂E^(L), by the backward recursion
// G_l = Âᵀ (G_{l+1} ∘ σ'_{l+1}) W^(l+1)ᵀ.
Matrix grad_wrt_embeddings(const ForwardTrace& trace, const GcnParams& params,
                           const Matrix& loss_grad_at_output, int layer);

// All of G_1..G_L at once (index l-1).
std::vector<Matrix> embedding_gradients(const ForwardTrace& trace, const GcnParams& params,
                                        const Matrix& loss_grad_at_output);

// ∇_{W^(l)} = (ÂE^(l-1))ᵀ (G_l ∘ σ'_l) for every layer.
LayerGradient backpropagate(const ForwardTrace& trace, const GcnParams& params,
                            const Matrix& loss_grad_at_output);

// Gradient of the mean loss over `nodes`; a singleton gives ∇_Θ r(i, y_i, Θ).
LayerGradient grad_wrt_weights(const Graph& graph, const ForwardTrace& trace,
                               const GcnParams& params, std::span<const NodeId> nodes);
LayerGradient grad_wrt_weights(const Graph& graph, const ForwardTrace& trace,
                               const GcnParams& params, const LossTerms& terms);

// Second-order pieces that only depend on the base point.
struct CurvatureCache {
  std::vector<Matrix> embedding_grads;  // G_l, l = 1..L (index l-1)
  Matrix output_grad;                   // G_L
};

CurvatureCache make_curvature_cache(const Graph& graph, const ForwardTrace& trace,
                                    const GcnParams& params, const LossTerms& terms);

// ℌ_{l,i}[:, :, c, d] = ∂(∇_{W^(l)} R) / ∂W^(i)[c, d] with ∂R/∂E^(L) held at
// its base value; this is the network-composition part of the Hessian. The
// softmax cross-entropy curvature is added separately (see
// output_curvature_product).
Matrix hessian_block(const ForwardTrace& trace, const GcnParams& params,
                     const CurvatureCache& cache, int l, int i, Index c, Index d);
Matrix hessian_block(const Graph& graph, const ForwardTrace& trace, const GcnParams& params,
                     std::span<const NodeId> nodes, int l, int i, Index c, Index d);

// The two pieces behind the layer-(l-1) and layer-(l+1) cases, exposed so the
// seeds and recursions can be checked in isolation.
// ∂E^(k)/∂W^(i)[c,d] for k >= i (seed at k = i, forward recursion beyond).
Matrix embedding_sensitivity(const ForwardTrace& trace, const GcnParams& params, int i, Index c,
                             Index d, int k);
// ∂²R/∂E^(k)∂W^(i)[c,d] for k <= i-1 (seed at k = i-1, backward recursion below).
Matrix mixed_embedding_derivative(const ForwardTrace& trace, const GcnParams& params,
                                  const CurvatureCache& cache, int i, Index c, Index d, int k);

// Jᵀ Λ J v: Jacobian of the output logits, Λ = blockdiag of
// w_v/|nodes| · (diag(p_v) - p_v p_vᵀ) over loss nodes.
LayerGradient output_curvature_product(const Graph& graph, const ForwardTrace& trace,
                                       const GcnParams& params, const LossTerms& terms,
                                       const LayerGradient& direction);

// Exact Hessian-vector product of R (both parts) by forward-over-reverse
// differentiation of the backward pass.
LayerGradient hessian_vector_product(const Graph& graph, const ForwardTrace& trace,
                                     const GcnParams& params, const LossTerms& terms,
                                     const LayerGradient& direction);

inline constexpr Index kMaxMaterializedParams = 512;

// v ↦ H_flat v for R over a fixed node set, closed over one forward trace.
class FlatHessianOperator {
 public:
  FlatHessianOperator(const Graph& graph, ForwardTrace trace, GcnParams params, LossTerms terms);

  Index size() const { return layout_.size(); }
  const ParamLayout& layout() const { return layout_; }
  FlatGradient apply(const FlatGradient& v) const;

  // Assembled from hessian_block slices plus the output-curvature block.
  // Throws kTooLarge above kMaxMaterializedParams.
  Matrix materialize() const;
  // Network-composition part only (the five-case tensor, flattened).
  Matrix materialize_composition() const;

 private:
  const Graph& graph_;
  ForwardTrace trace_;
  GcnParams params_;
  LossTerms terms_;
  ParamLayout layout_;
  CurvatureCache cache_;
};

Matrix materialize_flat_hessian(const FlatHessianOperator& op);

}  // namespace gcnuq
