#include "gcnuq/influence.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace gcnuq {

namespace {
constexpr const char* kModule = "influence";

[[noreturn]] void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, kModule, message);
}

// Rows of a full-graph trace restricted to a receptive field.
ForwardTrace slice_trace(const ForwardTrace& full, PropagationPtr local) {
  auto gather = [](const Matrix& m, const std::vector<NodeId>& rows) {
    Matrix out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
    return out;
  };
  ForwardTrace t;
  const int L = full.num_layers();
  t.embeddings.push_back(local->input());
  for (int l = 1; l <= L; ++l) {
    const auto& rows = local->nodes(l);
    t.embeddings.push_back(gather(full.embedding(l), rows));
    t.aggregated.push_back(gather(full.aggregate(l), rows));
    t.act_masks.push_back(gather(full.mask(l), rows));
  }
  t.prop = std::move(local);
  return t;
}

constexpr std::uint64_t kNodeStreamTag = 0x6e6f6465ULL;  // "node"

}  // namespace

void InfluenceConfig::validate() const {
  if (sample_batch && *sample_batch < 1) fail(ErrorKind::kInvalidArgument, "sample batch t must be >= 1");
  if (iterations < 1) fail(ErrorKind::kInvalidArgument, "iterations m must be >= 1");
  if (!(damping >= 0.0)) fail(ErrorKind::kInvalidArgument, "damping must be >= 0");
  if (scale && !(*scale > 0.0)) fail(ErrorKind::kInvalidArgument, "scale must be > 0");
  if (!(early_stop >= 0.0)) fail(ErrorKind::kInvalidArgument, "early stop tolerance must be >= 0");
  if (spectral_iterations < 1) fail(ErrorKind::kInvalidArgument, "spectral iterations must be >= 1");
}

Vector neumann_inverse_hvp(const Vector& f, const SampledHessian& hessian,
                           std::span<const NodeId> pool, Index batch, Index iterations,
                           Scalar damping, Scalar scale, std::uint64_t seed, Scalar early_stop) {
  if (pool.empty()) fail(ErrorKind::kEmptySet, "empty sampling pool");
  if (batch < 1 || batch > static_cast<Index>(pool.size())) {
    fail(ErrorKind::kInvalidArgument, "batch size " + std::to_string(batch) + " exceeds pool of " +
                                          std::to_string(pool.size()));
  }
  std::vector<NodeId> order(pool.begin(), pool.end());
  std::vector<NodeId> sample(static_cast<std::size_t>(batch));
  std::mt19937_64 rng(seed);
  const Index n = static_cast<Index>(order.size());

  Vector x = f;
  for (Index iter = 1; iter <= iterations; ++iter) {
    // Partial Fisher-Yates: the first `batch` slots become the sample.
    for (Index k = 0; k < batch; ++k) {
      std::uniform_int_distribution<Index> pick(k, n - 1);
      std::swap(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(pick(rng))]);
    }
    std::copy_n(order.begin(), batch, sample.begin());
    std::sort(sample.begin(), sample.end());

    Vector next = f + x - scale * (hessian(x, sample) + damping * x);
    if (!next.allFinite()) {
      fail(ErrorKind::kDivergence, "inverse-HVP recursion diverged at iteration " + std::to_string(iter));
    }
    const bool converged = early_stop > 0.0 && (next - x).norm() <= early_stop * next.norm();
    x = std::move(next);
    if (converged) break;
  }
  return scale * x;
}

Scalar spectral_norm_estimate(const std::function<Vector(const Vector&)>& op, Index size,
                              int iterations, std::uint64_t seed) {
  if (size == 0) return 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> normal(0.0, 1.0);
  Vector x(size);
  for (Index i = 0; i < size; ++i) x[i] = normal(rng);
  x.normalize();
  Scalar rho = 0.0;
  for (int k = 0; k < iterations; ++k) {
    Vector y = op(x);
    rho = y.norm();
    if (!std::isfinite(rho)) fail(ErrorKind::kDivergence, "non-finite power iterate");
    if (rho == 0.0) return 0.0;
    x = y / rho;
  }
  return rho;
}

InfluenceSolver::InfluenceSolver(const Graph& graph, GcnParams params, const InfluenceConfig& config)
    : graph_(graph), params_(std::move(params)), config_(config), layout_(params_) {
  config_.validate();
  params_.validate();
  const auto& pool = graph_.train_mask();
  if (pool.empty()) fail(ErrorKind::kEmptySet, "training set is empty");
  const auto n_train = static_cast<Index>(pool.size());
  resolved_.sample_batch = config_.sample_batch.value_or(std::min<Index>(16, n_train));
  if (resolved_.sample_batch > n_train) {
    fail(ErrorKind::kInvalidArgument, "sample batch t = " + std::to_string(resolved_.sample_batch) +
                                          " exceeds |V_train| = " + std::to_string(n_train));
  }
  resolved_.iterations = config_.iterations;
  resolved_.damping = config_.damping;
  resolved_.seed = config_.seed;
  trace_ = forward(Propagation::full(graph_, params_.num_layers()), params_);

  const Scalar lambda = config_.damping;
  auto damped = [&](const Vector& x) -> Vector { return sampled_hvp(x, pool) + lambda * x; };
  resolved_.spectral_norm =
      spectral_norm_estimate(damped, layout_.size(), config_.spectral_iterations, derive_seed(config_.seed, SeedPurpose::kSampling));
  if (config_.scale) {
    resolved_.scale = *config_.scale;
    if (resolved_.scale * resolved_.spectral_norm > 1.0 + 1e-12) {
      std::ostringstream msg;
      msg << "scaled operator norm s*||H + lambda I|| = " << resolved_.scale * resolved_.spectral_norm
          << " > 1; use a smaller scale (at most " << 1.0 / resolved_.spectral_norm << ")";
      fail(ErrorKind::kSpectralNorm, msg.str());
    }
  } else {
    resolved_.scale = 1.0 / std::max<Scalar>(1.0, std::ceil(resolved_.spectral_norm));
  }
  std::ostringstream info;
  info << "influence: t=" << resolved_.sample_batch << " m=" << resolved_.iterations
       << " lambda=" << resolved_.damping << " s=" << resolved_.scale
       << " ||H+lambda I||~" << resolved_.spectral_norm;
  log_info(info.str());
}

Vector InfluenceSolver::sampled_hvp(const Vector& x, std::span<const NodeId> batch) const {
  auto local = Propagation::receptive_field(graph_, batch, params_.num_layers());
  const ForwardTrace t = slice_trace(trace_, std::move(local));
  LossTerms terms;
  terms.nodes.assign(batch.begin(), batch.end());
  return flatten(hessian_vector_product(graph_, t, params_, terms, unflatten(x, layout_)));
}

FlatGradient InfluenceSolver::solve(const FlatGradient& f, std::uint64_t stream_seed) const {
  if (f.size() != layout_.size()) {
    fail(ErrorKind::kShapeMismatch, "right-hand side has length " + std::to_string(f.size()) +
                                        ", expected " + std::to_string(layout_.size()));
  }
  SampledHessian h = [this](const Vector& x, std::span<const NodeId> batch) { return sampled_hvp(x, batch); };
  return neumann_inverse_hvp(f, h, graph_.train_mask(), resolved_.sample_batch, resolved_.iterations,
                             resolved_.damping, resolved_.scale, stream_seed, config_.early_stop);
}

FlatGradient InfluenceSolver::node_gradient(NodeId node) const {
  const NodeId single[] = {node};
  const ForwardTrace t = slice_trace(trace_, Propagation::receptive_field(graph_, single, params_.num_layers()));
  return flatten(grad_wrt_weights(graph_, t, params_, std::span<const NodeId>(single)));
}

FlatGradient InfluenceSolver::node_influence(NodeId node) const {
  return solve(node_gradient(node),
               derive_seed(derive_seed(config_.seed, SeedPurpose::kSampling) ^ kNodeStreamTag,
                           static_cast<std::uint64_t>(node)));
}

FlatGradient hvp_solve(const Graph& graph, const GcnParams& params, const FlatGradient& f_u,
                       const InfluenceConfig& config) {
  const InfluenceSolver solver(graph, params, config);
  return solver.solve(f_u, config.seed);
}

FlatGradient node_influence(const Graph& graph, const GcnParams& params, NodeId node,
                            const InfluenceConfig& config) {
  const InfluenceSolver solver(graph, params, config);
  return solver.node_influence(node);
}

Scalar loo_epsilon(const Graph& graph) {
  if (graph.train_mask().empty()) fail(ErrorKind::kEmptySet, "training set is empty");
  return -1.0 / static_cast<Scalar>(graph.train_mask().size());
}

LooParams loo_params(const GcnParams& params, const FlatGradient& influence, Scalar epsilon, NodeId node) {
  const ParamLayout layout(params);
  const LayerGradient delta = unflatten(influence, layout);
  LooParams out{node, params, epsilon};
  for (std::size_t l = 0; l < params.layers.size(); ++l) out.params.layers[l] += epsilon * delta.layers[l];
  return out;
}

}  // namespace gcnuq
