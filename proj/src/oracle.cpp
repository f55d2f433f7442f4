#include "gcnuq/oracle.hpp"

#include <chrono>
#include <limits>
#include <random>
#include <numeric>

#include <Eigen/LU>
#include <json.hpp>

namespace gcnuq {

namespace {
constexpr const char* kModule = "oracle";

[[noreturn]] void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, kModule, message);
}

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void check_step(Scalar step) {
  if (!(step > 0.0)) fail(ErrorKind::kInvalidArgument, "finite-difference step must be > 0");
}

std::vector<Scalar> average_ranks(std::span<const Scalar> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<Scalar> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const Scalar r = 0.5 * static_cast<Scalar>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}
}  // namespace

GcnParams retrain_loo(const Graph& graph, const TrainConfig& train_cfg, NodeId leave_out) {
  const auto& train = graph.train_mask();
  if (!std::binary_search(train.begin(), train.end(), leave_out)) {
    fail(ErrorKind::kInvalidArgument, "node " + std::to_string(leave_out) + " is not a training node");
  }
  if (train.size() < 2) fail(ErrorKind::kEmptySet, "leaving out the only training node leaves an empty loss");
  std::vector<NodeId> rest;
  rest.reserve(train.size() - 1);
  for (NodeId v : train) {
    if (v != leave_out) rest.push_back(v);
  }
  return train_with_history(graph.with_train_mask(std::move(rest)), train_cfg).params;
}

Vector fd_gradient(const std::function<Scalar(const Vector&)>& f, const Vector& x, Scalar step) {
  check_step(step);
  Vector g(x.size());
  Vector probe = x;
  for (Index k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + step;
    const Scalar up = f(probe);
    probe[k] = x[k] - step;
    const Scalar down = f(probe);
    probe[k] = x[k];
    g[k] = (up - down) / (2.0 * step);
  }
  return g;
}

LayerGradient fd_gradient(const Graph& graph, const GcnParams& params, std::span<const NodeId> nodes,
                          Scalar step) {
  check_step(step);
  if (nodes.empty()) fail(ErrorKind::kEmptySet, "no loss nodes");
  const auto prop = Propagation::receptive_field(graph, nodes, params.num_layers());
  const ParamLayout layout(params);
  auto loss = [&](const Vector& theta) {
    return total_loss(graph, forward(prop, unflatten_params(theta, layout)), nodes);
  };
  return unflatten(fd_gradient(loss, flatten(params), step), layout);
}

FdHessian fd_hessian(const Graph& graph, const GcnParams& params, std::span<const NodeId> nodes,
                     const FdHessianOptions& options) {
  check_step(options.step);
  if (nodes.empty()) fail(ErrorKind::kEmptySet, "no loss nodes");
  const ParamLayout layout(params);
  const Index P = layout.size();
  if (P > kMaxMaterializedParams) {
    fail(ErrorKind::kTooLarge, "P = " + std::to_string(P) + " exceeds " + std::to_string(kMaxMaterializedParams));
  }
  const auto prop = Propagation::receptive_field(graph, nodes, params.num_layers());
  LossTerms terms;
  terms.nodes.assign(nodes.begin(), nodes.end());
  const Matrix frozen = output_gradient(graph, forward(prop, params), terms);

  auto gradient = [&](const Vector& theta) -> Vector {
    const GcnParams p = unflatten_params(theta, layout);
    const ForwardTrace t = forward(prop, p);
    if (options.freeze_output_gradient) return flatten(backpropagate(t, p, frozen));
    return flatten(grad_wrt_weights(graph, t, p, terms));
  };

  const Vector theta = flatten(params);
  Vector probe = theta;
  Matrix h(P, P);
  for (Index k = 0; k < P; ++k) {
    probe[k] = theta[k] + options.step;
    const Vector up = gradient(probe);
    probe[k] = theta[k] - options.step;
    const Vector down = gradient(probe);
    probe[k] = theta[k];
    h.col(k) = (up - down) / (2.0 * options.step);
  }
  FdHessian out;
  out.asymmetry = P > 0 ? (h - h.transpose()).cwiseAbs().maxCoeff() : 0.0;
  out.hessian = 0.5 * (h + h.transpose());
  return out;
}

Vector direct_solve(const Matrix& hessian, const Vector& f, Scalar damping) {
  if (hessian.rows() != hessian.cols() || hessian.rows() != f.size()) {
    fail(ErrorKind::kShapeMismatch, "system dimensions disagree");
  }
  const Matrix a = hessian + damping * Matrix::Identity(f.size(), f.size());
  Eigen::FullPivLU<Matrix> lu(a);
  if (!lu.isInvertible()) fail(ErrorKind::kSingular, "damped Hessian is singular");
  return lu.solve(f);
}

FlatGradient direct_influence(const Graph& graph, const GcnParams& params, NodeId node, Scalar damping) {
  const auto& train = graph.train_mask();
  if (train.empty()) fail(ErrorKind::kEmptySet, "training set is empty");
  const auto prop = Propagation::full(graph, params.num_layers());
  ForwardTrace trace = forward(prop, params);
  const NodeId single[] = {node};
  const FlatGradient f = flatten(grad_wrt_weights(graph, trace, params, std::span<const NodeId>(single)));
  const FlatHessianOperator op(graph, std::move(trace), params, LossTerms{train, {}});
  return direct_solve(op.materialize(), f, damping);
}

Scalar spearman(std::span<const Scalar> a, std::span<const Scalar> b) {
  if (a.size() != b.size()) fail(ErrorKind::kShapeMismatch, "spearman inputs differ in length");
  if (a.size() < 2) return 0.0;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const Eigen::Map<const Vector> x(ra.data(), static_cast<Index>(ra.size()));
  const Eigen::Map<const Vector> y(rb.data(), static_cast<Index>(rb.size()));
  const Vector dx = x.array() - x.mean(), dy = y.array() - y.mean();
  const Scalar denom = std::sqrt(dx.squaredNorm() * dy.squaredNorm());
  return denom > 0.0 ? dx.dot(dy) / denom : 0.0;
}

LooComparison compare_loo(const Graph& graph, const TrainConfig& train_cfg, const GcnParams& params,
                          const InfluenceConfig& icfg, std::optional<Index> limit) {
  const auto& train = graph.train_mask();
  LooComparison out;
  const auto n = static_cast<std::size_t>(std::min<Index>(limit.value_or(static_cast<Index>(train.size())),
                                                          static_cast<Index>(train.size())));
  out.nodes.assign(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(n));
  out.influence_err.resize(n);
  out.retrain_err.resize(n);

  const auto t0 = Clock::now();
  {
    const InfluenceSolver solver(graph, params, icfg);
    const Scalar eps = loo_epsilon(graph);
    parallel_for(static_cast<Index>(n), icfg.workers, [&](Index k) {
      const NodeId i = out.nodes[static_cast<std::size_t>(k)];
      out.influence_err[static_cast<std::size_t>(k)] =
          loo_error(graph, i, loo_params(params, solver.node_influence(i), eps, i));
    });
  }
  out.influence_ms = ms_since(t0);

  const auto t1 = Clock::now();
  parallel_for(static_cast<Index>(n), icfg.workers, [&](Index k) {
    const NodeId i = out.nodes[static_cast<std::size_t>(k)];
    out.retrain_err[static_cast<std::size_t>(k)] = loo_error(graph, i, LooParams{i, retrain_loo(graph, train_cfg, i), 0.0});
  });
  out.retrain_ms = ms_since(t1);
  return out;
}

std::string OracleReport::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  if (errors) {
    j["max_rel_err"] = errors->max_rel_err;
    j["mean_rel_err"] = errors->mean_rel_err;
    j["max_abs_err"] = errors->max_abs_err;
    j["worst_coordinate"] = errors->worst_coordinate;
    j["failures"] = errors->failures;
  }
  if (spearman_rho) j["spearman_rho"] = *spearman_rho;
  if (!wall_ms.empty()) j["wall_ms"] = wall_ms;
  if (speedup) j["speedup"] = *speedup;
  return j.dump(2);
}

OracleReport speedup_benchmark(const Graph& graph, const TrainConfig& train_cfg, const InfluenceConfig& icfg,
                               Index n_train) {
  const auto& pool = graph.train_mask();
  if (n_train < 1 || n_train > static_cast<Index>(pool.size())) {
    fail(ErrorKind::kInvalidArgument, "n_train = " + std::to_string(n_train) + " outside [1, " +
                                          std::to_string(pool.size()) + "]");
  }
  const Graph g = graph.with_train_mask({pool.begin(), pool.begin() + n_train});
  const GcnParams params = train(g, train_cfg);
  InfluenceConfig single = icfg;
  single.workers = 1;
  OracleReport report;
  if (n_train == 1) {
    // No peers to retrain against; record the influence side only.
    const auto t0 = Clock::now();
    const InfluenceSolver solver(g, params, single);
    (void)solver.node_influence(g.train_mask().front());
    report.wall_ms["influence"] = ms_since(t0);
    report.wall_ms["retrain"] = 0.0;
    report.speedup = 0.0;
    return report;
  }
  const LooComparison cmp = compare_loo(g, train_cfg, params, single);
  report.wall_ms["influence"] = cmp.influence_ms;
  report.wall_ms["retrain"] = cmp.retrain_ms;
  report.speedup = cmp.influence_ms > 0.0 ? cmp.retrain_ms / cmp.influence_ms : 0.0;
  report.spearman_rho = spearman(cmp.influence_err, cmp.retrain_err);
  return report;
}

Scalar relative_norm_error(const Vector& a, const Vector& b) {
  const Scalar denom = b.norm();
  const Scalar diff = (a - b).norm();
  if (denom == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<Scalar>::infinity();
  return diff / denom;
}

std::vector<VerificationCheck> verify_small_instance(std::uint64_t seed) {
  SbmOptions so;
  so.blocks = 2;
  so.per_block = 4;
  so.p_in = 0.6;
  so.p_out = 0.2;
  so.feature_dim = 4;
  so.seed = seed;
  const Graph g = split_nodes(synth_sbm(so), 4, 0, 4, seed);
  const Index hidden[] = {4};
  const GcnParams params = init_params(g.feature_dim(), hidden, g.num_classes(), seed);
  const auto& nodes = g.train_mask();
  const ForwardTrace trace = forward(g, params);
  const FlatHessianOperator op(g, trace, params, LossTerms{nodes, {}});

  std::vector<VerificationCheck> checks;
  auto add = [&](std::string name, Scalar err, Scalar tol, bool passed) {
    checks.push_back({std::move(name), err, tol, passed});
  };
  auto add_summary = [&](std::string name, const ErrorSummary& s, Scalar tol) {
    add(std::move(name), s.max_rel_err, tol, s.passed());
  };

  add_summary("gradient_vs_fd",
              compare(flatten(grad_wrt_weights(g, trace, params, nodes)), flatten(fd_gradient(g, params, nodes)),
                      1e-5, 1e-8),
              1e-5);

  const Matrix h = op.materialize();
  add_summary("hessian_vs_fd", compare(h, fd_hessian(g, params, nodes).hessian, 1e-4, 1e-6), 1e-4);

  FdHessianOptions frozen;
  frozen.freeze_output_gradient = true;
  const Matrix fd_comp = fd_hessian(g, params, nodes, frozen).hessian;
  add_summary("composition_vs_fd", compare(op.materialize_composition(), fd_comp, 1e-4, 1e-6), 1e-4);

  const ParamLayout& layout = op.layout();
  Scalar diag_max = 0.0;
  for (int l = 1; l <= layout.num_layers(); ++l) {
    const Index n = layout.rows(l) * layout.cols(l);
    diag_max = std::max(diag_max, fd_comp.block(layout.offset(l), layout.offset(l), n, n).cwiseAbs().maxCoeff());
  }
  add("same_layer_blocks_zero", diag_max, 1e-6, diag_max < 1e-6);

  const Scalar scale = std::max(h.cwiseAbs().maxCoeff(), std::numeric_limits<Scalar>::min());
  const Scalar asym = (h - h.transpose()).cwiseAbs().maxCoeff() / scale;
  add("hessian_symmetry", asym, 1e-8, asym < 1e-8);

  std::mt19937_64 rng(derive_seed(seed, SeedPurpose::kSampling));
  std::normal_distribution<Scalar> normal;
  Vector v(op.size());
  for (Index k = 0; k < v.size(); ++k) v[k] = normal(rng);
  add_summary("hvp_vs_materialized", compare(op.apply(v), Vector(h * v), 1e-8, 1e-12), 1e-8);

  // The inverse-HVP recursion needs a positive-definite damped Hessian, so it
  // is checked near an optimum.
  TrainConfig tc;
  tc.epochs = 150;
  tc.learning_rate = 0.05;
  tc.hidden_dims = {4};
  tc.seed = seed;
  const GcnParams trained = train(g, tc);
  InfluenceConfig ic;
  ic.sample_batch = static_cast<Index>(nodes.size());
  // Full batches make the recursion deterministic; its contraction rate near
  // the damped smallest eigenvalue needs the long run.
  ic.iterations = 2000;
  ic.damping = 0.01;
  ic.seed = seed;
  const Scalar rho = InfluenceSolver(g, trained, ic).resolved().spectral_norm;
  ic.scale = 1.0 / rho;
  const NodeId u = nodes.front();
  const Scalar err = relative_norm_error(node_influence(g, trained, u, ic), direct_influence(g, trained, u, ic.damping));
  add("inverse_hvp_vs_direct", err, 1e-2, err <= 1e-2);
  return checks;
}

}  // namespace gcnuq
