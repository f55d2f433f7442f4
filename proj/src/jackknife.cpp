#include "gcnuq/jackknife.hpp"

#include <charconv>

namespace gcnuq {

namespace {
constexpr const char* kModule = "jackknife";

[[noreturn]] void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, kModule, message);
}

// Shortest text that round-trips to the same double.
std::string fmt(Scalar x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

Scalar prob_norm_at(const ForwardTrace& trace, NodeId u) { return predict_probs(trace, u).norm(); }
}  // namespace

void IntervalConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 0.5)) fail(ErrorKind::kInvalidArgument, "alpha must lie in (0, 0.5)");
}

Interval jackknife_plus_generic(std::span<const Scalar> preds, std::span<const Scalar> errs, Scalar alpha) {
  if (preds.size() != errs.size()) fail(ErrorKind::kShapeMismatch, "prediction and error counts differ");
  if (preds.empty()) fail(ErrorKind::kEmptySet, "no leave-one-out records");
  std::vector<Scalar> lo(preds.size()), hi(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    lo[i] = preds[i] - errs[i];
    hi[i] = preds[i] + errs[i];
  }
  return {quantile(lo, alpha), quantile(hi, 1.0 - alpha)};
}

Interval naive_jackknife(Scalar point_pred, std::span<const Scalar> errs, Scalar alpha) {
  if (errs.empty()) fail(ErrorKind::kEmptySet, "no leave-one-out errors");
  std::vector<Scalar> lo(errs.size()), hi(errs.size());
  for (std::size_t i = 0; i < errs.size(); ++i) {
    lo[i] = point_pred - errs[i];
    hi[i] = point_pred + errs[i];
  }
  return {quantile(lo, alpha), quantile(hi, 1.0 - alpha)};
}

Scalar loo_error(const Graph& graph, NodeId node, const Vector& probs) {
  const int y = graph.label(node);
  if (y < 0) fail(ErrorKind::kInvalidArgument, "node " + std::to_string(node) + " has no label");
  Vector diff = -probs;
  diff[y] += 1.0;
  return diff.norm();
}

Scalar loo_error(const Graph& graph, NodeId node, const LooParams& loo) {
  const NodeId single[] = {node};
  const ForwardTrace t = forward(Propagation::receptive_field(graph, single, loo.params.num_layers()), loo.params);
  return loo_error(graph, node, predict_probs(t, node));
}

NodeUncertainty interval_from_records(NodeId u, std::span<const LooRecord> records,
                                      std::span<const Scalar> norms_at_u, Scalar alpha) {
  if (records.size() != norms_at_u.size()) fail(ErrorKind::kShapeMismatch, "records and norms differ in length");
  std::vector<Scalar> preds, errs;
  preds.reserve(records.size());
  errs.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].node == u) continue;
    preds.push_back(norms_at_u[i]);
    errs.push_back(records[i].err);
  }
  if (preds.empty()) {
    fail(ErrorKind::kEmptySet, "no leave-one-out records remain for node " + std::to_string(u));
  }
  const Interval iv = jackknife_plus_generic(preds, errs, alpha);
  return {u, iv.lower, iv.upper, iv.width()};
}

NodeUncertainty node_uncertainty(const Graph& graph, NodeId u, std::span<const LooEntry> loo_set,
                                 const IntervalConfig& config) {
  config.validate();
  std::vector<LooRecord> records;
  std::vector<Scalar> norms;
  for (const auto& entry : loo_set) {
    if (entry.record.node == u) continue;
    records.push_back(entry.record);
    norms.push_back(prob_norm_at(forward(graph, entry.params.params), u));
  }
  return interval_from_records(u, records, norms, config.alpha);
}

std::vector<LooEntry> loo_sweep(const Graph& graph, const GcnParams& params,
                                const InfluenceConfig& iconfig, ResolvedInfluence* resolved) {
  const InfluenceSolver solver(graph, params, iconfig);
  if (resolved) *resolved = solver.resolved();
  const Scalar eps = loo_epsilon(graph);
  const auto& train = graph.train_mask();
  std::vector<LooEntry> entries(train.size());
  parallel_for(static_cast<Index>(train.size()), iconfig.workers, [&](Index k) {
    const NodeId i = train[static_cast<std::size_t>(k)];
    LooEntry& e = entries[static_cast<std::size_t>(k)];
    e.params = loo_params(params, solver.node_influence(i), eps, i);
    e.record = {i, loo_error(graph, i, e.params)};
  });
  return entries;
}

QuantifyResult quantify(const Graph& graph, const GcnParams& params, std::span<const NodeId> targets,
                        const InfluenceConfig& iconfig, const IntervalConfig& cconfig) {
  cconfig.validate();
  QuantifyResult result;
  result.epsilon = loo_epsilon(graph);
  if (targets.empty()) return result;
  for (NodeId u : targets) {
    if (u < 0 || u >= graph.num_nodes()) fail(ErrorKind::kOutOfRange, "target " + std::to_string(u) + " out of range");
  }

  const auto entries = loo_sweep(graph, params, iconfig, &result.influence);
  std::vector<LooRecord> records;
  for (const auto& e : entries) records.push_back(e.record);

  // norms(i, k) = ‖GCN(targets[k], Θ_i)‖₂
  Matrix norms(static_cast<Index>(entries.size()), static_cast<Index>(targets.size()));
  parallel_for(static_cast<Index>(entries.size()), iconfig.workers, [&](Index i) {
    const ForwardTrace t = forward(graph, entries[static_cast<std::size_t>(i)].params.params);
    for (std::size_t k = 0; k < targets.size(); ++k) norms(i, static_cast<Index>(k)) = prob_norm_at(t, targets[k]);
  });

  result.intervals.reserve(targets.size());
  std::vector<Scalar> column(entries.size());
  for (std::size_t k = 0; k < targets.size(); ++k) {
    for (std::size_t i = 0; i < entries.size(); ++i) column[i] = norms(static_cast<Index>(i), static_cast<Index>(k));
    result.intervals.push_back(interval_from_records(targets[k], records, column, cconfig.alpha));
  }
  return result;
}

std::vector<NodeUncertainty> quantify_all(const Graph& graph, const GcnParams& params,
                                          std::span<const NodeId> targets,
                                          const InfluenceConfig& iconfig,
                                          const IntervalConfig& cconfig) {
  return quantify(graph, params, targets, iconfig, cconfig).intervals;
}

void write_uncertainty_report(std::ostream& out, const ReportHeader& h,
                              std::span<const NodeUncertainty> rows, std::span<const char> outside_field) {
  if (!outside_field.empty() && outside_field.size() != rows.size()) {
    fail(ErrorKind::kShapeMismatch, "one receptive-field flag per row required");
  }
  out << "# alpha=" << fmt(h.alpha) << '\n'
      << "# epsilon=" << fmt(h.epsilon) << '\n'
      << "# t=" << h.influence.sample_batch << '\n'
      << "# m=" << h.influence.iterations << '\n'
      << "# lambda=" << fmt(h.influence.damping) << '\n'
      << "# s=" << fmt(h.influence.scale) << '\n'
      << "# seed=" << h.influence.seed << '\n'
      << "# layers=" << h.num_layers << '\n';
  out << "node_id\tlower\tupper\twidth";
  if (!outside_field.empty()) out << "\toutside_field";
  out << '\n';
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k];
    out << r.node << '\t' << fmt(r.lower) << '\t' << fmt(r.upper) << '\t' << fmt(r.width);
    if (!outside_field.empty()) out << '\t' << (outside_field[k] ? 1 : 0);
    out << '\n';
  }
}

}  // namespace gcnuq
