#include "gcnuq/derivatives.hpp"

namespace gcnuq {

namespace {
constexpr const char* kModule = "derivatives";

[[noreturn]] void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, kModule, message);
}

void check_layer(int l, int L) {
  if (l < 1 || l > L) {
    fail(ErrorKind::kOutOfRange, "layer " + std::to_string(l) + " outside [1, " + std::to_string(L) + "]");
  }
}

void check_direction(const LayerGradient& v, const GcnParams& params) {
  if (v.layers.size() != params.layers.size()) fail(ErrorKind::kShapeMismatch, "direction depth mismatch");
  for (std::size_t l = 0; l < v.layers.size(); ++l) {
    if (v.layers[l].rows() != params.layers[l].rows() || v.layers[l].cols() != params.layers[l].cols()) {
      fail(ErrorKind::kShapeMismatch, "direction shape mismatch at layer " + std::to_string(l + 1));
    }
  }
}

// (diag(p) - ppᵀ) x, scaled.
Vector softmax_curvature(const Vector& p, const Vector& x, Scalar scale) {
  return scale * (p.cwiseProduct(x) - p * p.dot(x));
}

// Forward-mode tangent of every embedding along `direction`; also returns
// the tangent of each layer's aggregate ÂE^(l-1) (index l-1).
struct Tangents {
  std::vector<Matrix> embeddings;  // dE^(l), index l (dE^(0) = 0)
  std::vector<Matrix> aggregates;  // d(ÂE^(l-1)), index l-1
};

Tangents forward_tangents(const ForwardTrace& trace, const GcnParams& params,
                          const LayerGradient& direction) {
  const int L = params.num_layers();
  Tangents t;
  t.embeddings.push_back(Matrix::Zero(trace.embedding(0).rows(), trace.embedding(0).cols()));
  for (int l = 1; l <= L; ++l) {
    Matrix dagg;
    Matrix dpre = trace.aggregate(l) * direction.layer(l);
    if (l == 1) {
      dagg = Matrix::Zero(trace.aggregate(1).rows(), trace.aggregate(1).cols());
    } else {
      dagg = trace.prop->adj(l) * t.embeddings.back();
      dpre.noalias() += dagg * params.weight(l);
    }
    t.embeddings.push_back(dpre.cwiseProduct(trace.mask(l)));
    t.aggregates.push_back(std::move(dagg));
  }
  return t;
}

Matrix logit_curvature(const Graph& graph, const ForwardTrace& trace, const LossTerms& terms,
                       const Matrix& dlogits) {
  const Matrix& logits = trace.logits();
  Matrix out = Matrix::Zero(logits.rows(), logits.cols());
  const Scalar inv_n = 1.0 / static_cast<Scalar>(terms.nodes.size());
  for (std::size_t k = 0; k < terms.nodes.size(); ++k) {
    const NodeId v = terms.nodes[k];
    if (graph.label(v) < 0) fail(ErrorKind::kInvalidArgument, "unlabeled loss node");
    const Index r = trace.output_row(v);
    const Vector p = softmax(logits.row(r).transpose());
    out.row(r) += softmax_curvature(p, dlogits.row(r).transpose(), terms.weight(k) * inv_n).transpose();
  }
  return out;
}

LossTerms terms_of(std::span<const NodeId> nodes) {
  LossTerms t;
  t.nodes.assign(nodes.begin(), nodes.end());
  return t;
}

}  // namespace

/************ layout **************************************/

ParamLayout::ParamLayout(const GcnParams& params) {
  offsets_.push_back(0);
  for (const auto& w : params.layers) {
    rows_.push_back(w.rows());
    cols_.push_back(w.cols());
    offsets_.push_back(offsets_.back() + w.size());
  }
}

ParamLayout::ParamLayout(const LayerGradient& gradient) : ParamLayout(GcnParams{gradient.layers}) {}

bool ParamLayout::matches(const GcnParams& params) const {
  if (params.num_layers() != num_layers()) return false;
  for (int l = 1; l <= num_layers(); ++l) {
    if (params.weight(l).rows() != rows(l) || params.weight(l).cols() != cols(l)) return false;
  }
  return true;
}

FlatGradient flatten(const LayerGradient& gradient) {
  const ParamLayout layout(gradient);
  FlatGradient flat(layout.size());
  for (int l = 1; l <= layout.num_layers(); ++l) {
    const Matrix& g = gradient.layer(l);
    flat.segment(layout.offset(l), g.size()) = Eigen::Map<const Vector>(g.data(), g.size());
  }
  return flat;
}

FlatGradient flatten(const GcnParams& params) { return flatten(LayerGradient{params.layers}); }

LayerGradient unflatten(const FlatGradient& flat, const ParamLayout& layout) {
  if (flat.size() != layout.size()) {
    fail(ErrorKind::kShapeMismatch, "flat vector length " + std::to_string(flat.size()) +
                                        " differs from parameter count " + std::to_string(layout.size()));
  }
  LayerGradient g;
  for (int l = 1; l <= layout.num_layers(); ++l) {
    g.layers.push_back(Eigen::Map<const Matrix>(flat.data() + layout.offset(l), layout.rows(l), layout.cols(l)));
  }
  return g;
}

GcnParams unflatten_params(const FlatGradient& flat, const ParamLayout& layout) {
  return GcnParams{unflatten(flat, layout).layers};
}

/************ first order *********************************/

std::vector<Matrix> embedding_gradients(const ForwardTrace& trace, const GcnParams& params,
                                        const Matrix& loss_grad_at_output) {
  const int L = params.num_layers();
  const Matrix& logits = trace.logits();
  if (loss_grad_at_output.rows() != logits.rows() || loss_grad_at_output.cols() != logits.cols()) {
    fail(ErrorKind::kShapeMismatch, "output gradient shape differs from logits");
  }
  std::vector<Matrix> grads(static_cast<std::size_t>(L));
  grads.back() = loss_grad_at_output;
  for (int l = L - 1; l >= 1; --l) {
    const Matrix delta = grads[static_cast<std::size_t>(l)].cwiseProduct(trace.mask(l + 1));
    grads[static_cast<std::size_t>(l - 1)] =
        (trace.prop->adj(l + 1).transpose() * delta) * params.weight(l + 1).transpose();
  }
  return grads;
}

Matrix grad_wrt_embeddings(const ForwardTrace& trace, const GcnParams& params,
                           const Matrix& loss_grad_at_output, int layer) {
  check_layer(layer, params.num_layers());
  return embedding_gradients(trace, params, loss_grad_at_output)[static_cast<std::size_t>(layer - 1)];
}

LayerGradient backpropagate(const ForwardTrace& trace, const GcnParams& params,
                            const Matrix& loss_grad_at_output) {
  const int L = params.num_layers();
  const Matrix& logits = trace.logits();
  if (loss_grad_at_output.rows() != logits.rows() || loss_grad_at_output.cols() != logits.cols()) {
    fail(ErrorKind::kShapeMismatch, "output gradient shape differs from logits");
  }
  LayerGradient out;
  out.layers.resize(static_cast<std::size_t>(L));
  Matrix g = loss_grad_at_output;
  for (int l = L; l >= 1; --l) {
    const Matrix delta = g.cwiseProduct(trace.mask(l));
    out.layers[static_cast<std::size_t>(l - 1)] = trace.aggregate(l).transpose() * delta;
    if (l > 1) g = (trace.prop->adj(l).transpose() * delta) * params.weight(l).transpose();
  }
  return out;
}

LayerGradient grad_wrt_weights(const Graph& graph, const ForwardTrace& trace,
                               const GcnParams& params, const LossTerms& terms) {
  return backpropagate(trace, params, output_gradient(graph, trace, terms));
}

LayerGradient grad_wrt_weights(const Graph& graph, const ForwardTrace& trace,
                               const GcnParams& params, std::span<const NodeId> nodes) {
  return grad_wrt_weights(graph, trace, params, terms_of(nodes));
}

/************ second order ********************************/

CurvatureCache make_curvature_cache(const Graph& graph, const ForwardTrace& trace,
                                    const GcnParams& params, const LossTerms& terms) {
  CurvatureCache cache;
  cache.output_grad = output_gradient(graph, trace, terms);
  cache.embedding_grads = embedding_gradients(trace, params, cache.output_grad);
  return cache;
}

Matrix embedding_sensitivity(const ForwardTrace& trace, const GcnParams& params, int i, Index c,
                             Index d, int k) {
  const int L = params.num_layers();
  check_layer(i, L);
  check_layer(k, L);
  if (k < i) fail(ErrorKind::kInvalidArgument, "sensitivity target precedes the perturbed layer");
  const Matrix& w = params.weight(i);
  if (c < 0 || c >= w.rows() || d < 0 || d >= w.cols()) fail(ErrorKind::kOutOfRange, "weight index out of range");

  // ∂E^(i)[a,b]/∂W^(i)[c,d] = σ'_i[a,b] (ÂE^(i-1))[a,c] I[b,d]
  Matrix s = Matrix::Zero(trace.mask(i).rows(), w.cols());
  s.col(d) = trace.mask(i).col(d).cwiseProduct(trace.aggregate(i).col(c));
  // ∂E^(k) = σ'_k ∘ (Â ∂E^(k-1) W^(k))
  for (int m = i + 1; m <= k; ++m) {
    s = trace.mask(m).cwiseProduct(Matrix(trace.prop->adj(m) * s) * params.weight(m));
  }
  return s;
}

Matrix mixed_embedding_derivative(const ForwardTrace& trace, const GcnParams& params,
                                  const CurvatureCache& cache, int i, Index c, Index d, int k) {
  const int L = params.num_layers();
  check_layer(i, L);
  if (k < 1 || k > i - 1) fail(ErrorKind::kInvalidArgument, "mixed derivative needs 1 <= k < i");
  const Matrix& w = params.weight(i);
  if (c < 0 || c >= w.rows() || d < 0 || d >= w.cols()) fail(ErrorKind::kOutOfRange, "weight index out of range");

  // ∂²R/∂E^(i-1)[a,b]∂W^(i)[c,d] = I[b,c] (Âᵀ(G_i ∘ σ'_i))[a,d]
  const Matrix& g_i = cache.embedding_grads[static_cast<std::size_t>(i - 1)];
  const Vector seed_col = trace.prop->adj(i).transpose() * g_i.col(d).cwiseProduct(trace.mask(i).col(d));
  Matrix t = Matrix::Zero(trace.embedding(i - 1).rows(), w.rows());
  t.col(c) = seed_col;
  // ∂²R/∂E^(m)∂W^(i) = Âᵀ (∂²R/∂E^(m+1)∂W^(i) ∘ σ'_{m+1}) W^(m+1)ᵀ
  for (int m = i - 2; m >= k; --m) {
    t = (trace.prop->adj(m + 1).transpose() * t.cwiseProduct(trace.mask(m + 1))) *
        params.weight(m + 1).transpose();
  }
  return t;
}

Matrix hessian_block(const ForwardTrace& trace, const GcnParams& params,
                     const CurvatureCache& cache, int l, int i, Index c, Index d) {
  const int L = params.num_layers();
  check_layer(l, L);
  check_layer(i, L);
  const Matrix& w = params.weight(i);
  if (c < 0 || c >= w.rows() || d < 0 || d >= w.cols()) fail(ErrorKind::kOutOfRange, "weight index out of range");

  const Matrix& wl = params.weight(l);
  if (i == l) return Matrix::Zero(wl.rows(), wl.cols());
  const Matrix& g_l = cache.embedding_grads[static_cast<std::size_t>(l - 1)];
  if (i < l) {
    // i = l-1 uses the seed directly; i < l-1 forwards it to layer l-1 first.
    const Matrix s = embedding_sensitivity(trace, params, i, c, d, l - 1);
    return Matrix(trace.prop->adj(l) * s).transpose() * g_l.cwiseProduct(trace.mask(l));
  }
  // i = l+1 uses the seed directly; i > l+1 backs it down to layer l first.
  const Matrix t = mixed_embedding_derivative(trace, params, cache, i, c, d, l);
  return trace.aggregate(l).transpose() * t.cwiseProduct(trace.mask(l));
}

Matrix hessian_block(const Graph& graph, const ForwardTrace& trace, const GcnParams& params,
                     std::span<const NodeId> nodes, int l, int i, Index c, Index d) {
  const CurvatureCache cache = make_curvature_cache(graph, trace, params, terms_of(nodes));
  return hessian_block(trace, params, cache, l, i, c, d);
}

LayerGradient output_curvature_product(const Graph& graph, const ForwardTrace& trace,
                                       const GcnParams& params, const LossTerms& terms,
                                       const LayerGradient& direction) {
  check_direction(direction, params);
  const Tangents t = forward_tangents(trace, params, direction);
  return backpropagate(trace, params, logit_curvature(graph, trace, terms, t.embeddings.back()));
}

LayerGradient hessian_vector_product(const Graph& graph, const ForwardTrace& trace,
                                     const GcnParams& params, const LossTerms& terms,
                                     const LayerGradient& direction) {
  check_direction(direction, params);
  const int L = params.num_layers();
  const Tangents t = forward_tangents(trace, params, direction);

  Matrix g = output_gradient(graph, trace, terms);
  Matrix dg = logit_curvature(graph, trace, terms, t.embeddings.back());
  LayerGradient out;
  out.layers.resize(static_cast<std::size_t>(L));
  for (int l = L; l >= 1; --l) {
    const Matrix delta = g.cwiseProduct(trace.mask(l));
    const Matrix ddelta = dg.cwiseProduct(trace.mask(l));
    Matrix& h = out.layers[static_cast<std::size_t>(l - 1)];
    h = trace.aggregate(l).transpose() * ddelta;
    if (l > 1) {
      h.noalias() += t.aggregates[static_cast<std::size_t>(l - 1)].transpose() * delta;
      const auto adj_t = trace.prop->adj(l).transpose();
      dg = adj_t * (ddelta * params.weight(l).transpose() + delta * direction.layer(l).transpose());
      g = (adj_t * delta) * params.weight(l).transpose();
    }
  }
  return out;
}

/************ flat operator *******************************/

FlatHessianOperator::FlatHessianOperator(const Graph& graph, ForwardTrace trace, GcnParams params,
                                         LossTerms terms)
    : graph_(graph),
      trace_(std::move(trace)),
      params_(std::move(params)),
      terms_(std::move(terms)),
      layout_(params_),
      cache_(make_curvature_cache(graph_, trace_, params_, terms_)) {}

FlatGradient FlatHessianOperator::apply(const FlatGradient& v) const {
  return flatten(hessian_vector_product(graph_, trace_, params_, terms_, unflatten(v, layout_)));
}

Matrix FlatHessianOperator::materialize_composition() const {
  const Index P = layout_.size();
  if (P > kMaxMaterializedParams) {
    fail(ErrorKind::kTooLarge, "refusing to materialize a " + std::to_string(P) + "x" +
                                   std::to_string(P) + " Hessian (limit " +
                                   std::to_string(kMaxMaterializedParams) + ")");
  }
  const int L = params_.num_layers();
  Matrix h = Matrix::Zero(P, P);
  for (int i = 1; i <= L; ++i) {
    for (Index d = 0; d < layout_.cols(i); ++d) {
      for (Index c = 0; c < layout_.rows(i); ++c) {
        const Index row = layout_.index(i, c, d);
        for (int l = 1; l <= L; ++l) {
          const Matrix block = hessian_block(trace_, params_, cache_, l, i, c, d);
          h.row(row).segment(layout_.offset(l), block.size()) =
              Eigen::Map<const Vector>(block.data(), block.size()).transpose();
        }
      }
    }
  }
  return h;
}

Matrix FlatHessianOperator::materialize() const {
  Matrix h = materialize_composition();
  const Index P = layout_.size();
  Vector e = Vector::Zero(P);
  for (Index p = 0; p < P; ++p) {
    e[p] = 1.0;
    const LayerGradient col =
        output_curvature_product(graph_, trace_, params_, terms_, unflatten(e, layout_));
    h.row(p) += flatten(col).transpose();
    e[p] = 0.0;
  }
  return h;
}

Matrix materialize_flat_hessian(const FlatHessianOperator& op) { return op.materialize(); }

}  // namespace gcnuq
