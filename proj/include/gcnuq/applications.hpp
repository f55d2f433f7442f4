#pragma once

#include "gcnuq/jackknife.hpp"

#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace gcnuq {

struct AcquisitionConfig {
  Index step_size = 20;  // b
  Index budget = 100;    // K
  std::uint64_t seed = 0;
  std::vector<NodeId> initial_labels;

  // `pool` is the node set queries are drawn from.
  void validate(std::span<const NodeId> pool) const;
};

enum class Strategy { kJackknife, kRandom, kDegree };

const char* to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

// `count` distinct pool nodes drawn from a seeded shuffle, sorted by id.
std::vector<NodeId> draw_initial_labels(std::span<const NodeId> pool, Index count, std::uint64_t seed);

// The b widest nodes, ties to the smaller id, ordered (width desc, id asc).
std::vector<NodeId> acquire_top_b(std::span<const NodeUncertainty> uncertainties, Index b);

struct StepMetrics {
  Index step = 0;
  Index labels_used = 0;
  double micro_f1_test = 0.0;
  double wall_ms = 0.0;
  std::vector<NodeId> queried;  // nodes added before this retrain
};

// Query loop over graph.train_mask() as the label pool. Each step retrains
// from the same seeded init on the current labels; the first record is the
// model on initial_labels alone.
std::vector<StepMetrics> active_learning_run(const Graph& graph, const AcquisitionConfig& acq,
                                             const TrainConfig& train_cfg,
                                             const InfluenceConfig& icfg,
                                             const IntervalConfig& ccfg, Strategy strategy);

struct ReweightConfig {
  Scalar tau = 2.0;
  int recompute_every = 10;
  // Rescale β^τ to mean 1 before training on it. Unit-norm β shrinks the
  // loss by ~1/n, which Adam's slow second-moment estimate turns into a long
  // learning-rate drop; the relative weights are unchanged.
  bool unit_mean_weights = true;

  void validate() const;
};

// β_u = |U(u)| / ‖U‖₂; all-zero widths fall back to 1/√n with a warning.
std::vector<Scalar> beta_scale(std::span<const Scalar> widths);

// Mean over training nodes of β_u^τ · r_u, betas aligned with train_mask().
Scalar weighted_loss(const Graph& graph, const ForwardTrace& trace, std::span<const Scalar> betas,
                     Scalar tau);

struct SslResult {
  GcnParams params;
  std::vector<StepMetrics> metrics;  // one record per epoch
  std::vector<Scalar> loss_history;
};

SslResult ssl_train(const Graph& graph, const TrainConfig& train_cfg, const ReweightConfig& rcfg,
                    const InfluenceConfig& icfg, const IntervalConfig& ccfg);

// True iff every training node other than u is more than L hops from u.
bool outside_receptive_field(const Graph& graph, NodeId u, int num_layers);

// One JSON object per line: step, labels_used, micro_f1_test and, when
// with_timing is set, wall_ms.
void write_metrics(std::ostream& out, std::span<const StepMetrics> metrics, bool with_timing);

}  // namespace gcnuq
