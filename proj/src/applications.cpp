#include "gcnuq/applications.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <numeric>
#include <set>

#include <json.hpp>

namespace gcnuq {

namespace {
constexpr const char* kModule = "applications";

[[noreturn]] void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, kModule, message);
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

constexpr std::uint64_t kInitialLabelsTag = 0x696e6974ULL;  // "init"

std::vector<NodeId> sorted(std::vector<NodeId> v) {
  std::sort(v.begin(), v.end());
  return v;
}
}  // namespace

void AcquisitionConfig::validate(std::span<const NodeId> pool) const {
  if (step_size < 1) fail(ErrorKind::kInvalidArgument, "step size b must be >= 1");
  if (budget < step_size) fail(ErrorKind::kInvalidArgument, "budget K must be >= step size b");
  if (budget % step_size != 0) fail(ErrorKind::kInvalidArgument, "budget K must be a multiple of b");
  if (initial_labels.empty()) fail(ErrorKind::kEmptySet, "no initial labels");
  const std::set<NodeId> in_pool(pool.begin(), pool.end());
  const std::set<NodeId> initial(initial_labels.begin(), initial_labels.end());
  if (initial.size() != initial_labels.size()) fail(ErrorKind::kInvalidArgument, "duplicate initial label");
  for (NodeId v : initial_labels) {
    if (!in_pool.count(v)) {
      fail(ErrorKind::kInvalidArgument, "initial label " + std::to_string(v) + " is not in the training pool");
    }
  }
  const auto remaining = static_cast<Index>(in_pool.size() - initial.size());
  if (remaining < budget) {
    fail(ErrorKind::kInvalidArgument, "budget " + std::to_string(budget) + " exceeds the " +
                                          std::to_string(remaining) + " unlabeled pool nodes");
  }
}

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kJackknife: return "jackknife";
    case Strategy::kRandom: return "random";
    case Strategy::kDegree: return "degree";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "jackknife") return Strategy::kJackknife;
  if (name == "random") return Strategy::kRandom;
  if (name == "degree") return Strategy::kDegree;
  fail(ErrorKind::kInvalidArgument, "unknown strategy '" + name + "'");
}

std::vector<NodeId> draw_initial_labels(std::span<const NodeId> pool, Index count, std::uint64_t seed) {
  if (count < 0 || static_cast<std::size_t>(count) > pool.size()) {
    fail(ErrorKind::kInvalidArgument, "cannot draw " + std::to_string(count) + " initial labels from a pool of " +
                                          std::to_string(pool.size()));
  }
  std::vector<NodeId> order(pool.begin(), pool.end());
  std::sort(order.begin(), order.end());
  std::mt19937_64 rng(derive_seed(derive_seed(seed, SeedPurpose::kAcquisition), kInitialLabelsTag));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(count));
  return sorted(std::move(order));
}

std::vector<NodeId> acquire_top_b(std::span<const NodeUncertainty> uncertainties, Index b) {
  if (b < 0 || static_cast<std::size_t>(b) > uncertainties.size()) {
    fail(ErrorKind::kInvalidArgument, "cannot acquire " + std::to_string(b) + " nodes from a pool of " +
                                          std::to_string(uncertainties.size()));
  }
  std::vector<NodeUncertainty> ranked(uncertainties.begin(), uncertainties.end());
  std::sort(ranked.begin(), ranked.end(), [](const NodeUncertainty& a, const NodeUncertainty& c) {
    if (a.width != c.width) return a.width > c.width;
    return a.node < c.node;
  });
  std::vector<NodeId> out;
  out.reserve(static_cast<std::size_t>(b));
  for (Index k = 0; k < b; ++k) out.push_back(ranked[static_cast<std::size_t>(k)].node);
  return out;
}

std::vector<StepMetrics> active_learning_run(const Graph& graph, const AcquisitionConfig& acq,
                                             const TrainConfig& train_cfg,
                                             const InfluenceConfig& icfg,
                                             const IntervalConfig& ccfg, Strategy strategy) {
  const auto& pool = graph.train_mask();
  acq.validate(pool);
  train_cfg.validate();
  std::vector<NodeId> labeled = sorted(acq.initial_labels);
  std::mt19937_64 rng(derive_seed(acq.seed, SeedPurpose::kAcquisition));

  std::vector<StepMetrics> metrics;
  const Index steps = acq.budget / acq.step_size;
  std::vector<NodeId> queried;
  // Model on the current labels; training is deterministic, so the previous
  // step's retrain is the model the next query is scored with.
  GcnParams params;
  for (Index step = 0; step <= steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    if (step > 0) {
      std::vector<NodeId> unlabeled;
      std::set_difference(pool.begin(), pool.end(), labeled.begin(), labeled.end(),
                          std::back_inserter(unlabeled));
      const Graph current = graph.with_train_mask(labeled);
      switch (strategy) {
        case Strategy::kJackknife: {
          const auto widths = quantify_all(current, params, unlabeled, icfg, ccfg);
          queried = acquire_top_b(widths, acq.step_size);
          break;
        }
        case Strategy::kRandom: {
          std::shuffle(unlabeled.begin(), unlabeled.end(), rng);
          queried.assign(unlabeled.begin(), unlabeled.begin() + acq.step_size);
          break;
        }
        case Strategy::kDegree: {
          std::stable_sort(unlabeled.begin(), unlabeled.end(), [&](NodeId a, NodeId b) {
            return graph.degree(a) > graph.degree(b);
          });
          queried.assign(unlabeled.begin(), unlabeled.begin() + acq.step_size);
          break;
        }
      }
      labeled.insert(labeled.end(), queried.begin(), queried.end());
      std::sort(labeled.begin(), labeled.end());
    }
    const Graph current = graph.with_train_mask(labeled);
    params = train(current, train_cfg);
    StepMetrics m;
    m.step = step;
    m.labels_used = static_cast<Index>(labeled.size());
    m.micro_f1_test = graph.test_mask().empty() ? 0.0 : evaluate_micro_f1(current, params, graph.test_mask());
    m.wall_ms = elapsed_ms(start);
    m.queried = queried;
    metrics.push_back(std::move(m));
  }
  return metrics;
}

void ReweightConfig::validate() const {
  if (!(tau >= 0.0)) fail(ErrorKind::kInvalidArgument, "tau must be >= 0");
  if (recompute_every < 1) fail(ErrorKind::kInvalidArgument, "recompute interval must be >= 1");
}

std::vector<Scalar> beta_scale(std::span<const Scalar> widths) {
  if (widths.empty()) return {};
  Scalar sq = 0.0;
  for (Scalar w : widths) sq += w * w;
  std::vector<Scalar> beta(widths.size());
  if (!(sq > 0.0)) {
    log_warning("all uncertainty widths are zero; using uniform loss weights");
    std::fill(beta.begin(), beta.end(), 1.0 / std::sqrt(static_cast<Scalar>(widths.size())));
    return beta;
  }
  const Scalar norm = std::sqrt(sq);
  for (std::size_t i = 0; i < widths.size(); ++i) beta[i] = std::abs(widths[i]) / norm;
  return beta;
}

namespace {
std::vector<Scalar> loss_weights(std::span<const Scalar> betas, Scalar tau) {
  std::vector<Scalar> w(betas.size());
  for (std::size_t i = 0; i < betas.size(); ++i) w[i] = std::pow(betas[i], tau);
  return w;
}
}  // namespace

Scalar weighted_loss(const Graph& graph, const ForwardTrace& trace, std::span<const Scalar> betas, Scalar tau) {
  if (betas.size() != graph.train_mask().size()) {
    fail(ErrorKind::kShapeMismatch, "one beta per training node required");
  }
  LossTerms terms{graph.train_mask(), loss_weights(betas, tau)};
  return weighted_mean_loss(graph, trace, terms);
}

SslResult ssl_train(const Graph& graph, const TrainConfig& train_cfg, const ReweightConfig& rcfg,
                    const InfluenceConfig& icfg, const IntervalConfig& ccfg) {
  rcfg.validate();
  ccfg.validate();
  const auto& train_nodes = graph.train_mask();
  if (train_nodes.empty()) fail(ErrorKind::kEmptySet, "training set is empty");
  Trainer trainer(graph, train_cfg, train_nodes);
  // Until the first recompute every node carries weight 1.
  std::vector<Scalar> weights(train_nodes.size(), 1.0);

  SslResult result;
  const auto start = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    if (epoch > 0 && epoch % rcfg.recompute_every == 0) {
      if (train_nodes.size() < 2) {
        log_warning("a single training node has no leave-one-out peers; keeping uniform weights");
      } else {
        const auto widths = quantify_all(graph, trainer.params(), train_nodes, icfg, ccfg);
        std::vector<Scalar> w(widths.size());
        for (std::size_t i = 0; i < widths.size(); ++i) w[i] = widths[i].width;
        weights = loss_weights(beta_scale(w), rcfg.tau);
        if (rcfg.unit_mean_weights) {
          const Scalar mean = std::accumulate(weights.begin(), weights.end(), 0.0) / static_cast<Scalar>(weights.size());
          if (mean > 0.0) {
            for (Scalar& x : weights) x /= mean;
          }
        }
      }
    }
    result.loss_history.push_back(trainer.step(weights));
    StepMetrics m;
    m.step = epoch + 1;
    m.labels_used = static_cast<Index>(train_nodes.size());
    m.micro_f1_test =
        graph.test_mask().empty() ? 0.0 : evaluate_micro_f1(graph, trainer.params(), graph.test_mask());
    m.wall_ms = elapsed_ms(start);
    result.metrics.push_back(std::move(m));
  }
  result.params = trainer.params();
  return result;
}

bool outside_receptive_field(const Graph& graph, NodeId u, int num_layers) {
  if (u < 0 || u >= graph.num_nodes()) fail(ErrorKind::kOutOfRange, "node " + std::to_string(u) + " out of range");
  const auto dist = hop_distances(graph, u);
  for (NodeId v : graph.train_mask()) {
    if (v == u) continue;
    const Index d = dist[static_cast<std::size_t>(v)];
    if (d >= 0 && d <= num_layers) return false;
  }
  return true;
}

void write_metrics(std::ostream& out, std::span<const StepMetrics> metrics, bool with_timing) {
  for (const auto& m : metrics) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["labels_used"] = m.labels_used;
    j["micro_f1_test"] = m.micro_f1_test;
    if (with_timing) j["wall_ms"] = m.wall_ms;
    if (!m.queried.empty()) j["queried"] = m.queried;
    out << j.dump() << '\n';
  }
}

}  // namespace gcnuq
