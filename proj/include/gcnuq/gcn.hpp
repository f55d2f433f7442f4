#pragma once

#include "gcnuq/propagation.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace gcnuq {

// Θ = {W^(1), ..., W^(L)}; W^(l) is h_{l-1} × h_l.
struct GcnParams {
  std::vector<Matrix> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  const Matrix& weight(int l) const { return layers[static_cast<std::size_t>(l - 1)]; }
  Matrix& weight(int l) { return layers[static_cast<std::size_t>(l - 1)]; }
  Index input_dim() const { return layers.front().rows(); }
  Index output_dim() const { return layers.back().cols(); }
  Index parameter_count() const;

  // Throws kShapeMismatch unless the shapes chain, kInvalidArgument on
  // non-finite entries.
  void validate() const;

  friend bool operator==(const GcnParams&, const GcnParams&) = default;
};

// Symmetric uniform init with bound √(6 / (fan_in + fan_out)).
GcnParams init_params(Index input_dim, std::span<const Index> hidden_dims, Index num_classes,
                      std::uint64_t seed);

// Per-layer caches of one forward pass over a Propagation. Layer indices are
// 1-based; embedding(0) is the input. Rows of layer l follow prop->nodes(l).
struct ForwardTrace {
  PropagationPtr prop;
  std::vector<Matrix> embeddings;  // E^(0..L)
  std::vector<Matrix> aggregated;  // ÂE^(l-1), l = 1..L
  std::vector<Matrix> act_masks;   // σ'_l, l = 1..L (all ones at L)

  int num_layers() const { return static_cast<int>(aggregated.size()); }
  const Matrix& embedding(int l) const { return embeddings[static_cast<std::size_t>(l)]; }
  const Matrix& aggregate(int l) const { return aggregated[static_cast<std::size_t>(l - 1)]; }
  const Matrix& mask(int l) const { return act_masks[static_cast<std::size_t>(l - 1)]; }
  const Matrix& logits() const { return embeddings.back(); }
  Index output_row(NodeId v) const;
};

// ReLU on layers 1..L-1, identity on layer L (softmax is fused into the loss).
ForwardTrace forward(PropagationPtr prop, const GcnParams& params);
ForwardTrace forward(const Graph& graph, const GcnParams& params);

// Numerically stable softmax of one logit row.
Vector softmax(const Eigen::Ref<const Vector>& logits);
Vector predict_probs(const ForwardTrace& trace, NodeId node);

inline constexpr Scalar kProbabilityFloor = 1e-12;

Scalar node_loss(const Graph& graph, const ForwardTrace& trace, NodeId node);
Scalar total_loss(const Graph& graph, const ForwardTrace& trace, std::span<const NodeId> nodes);

// Loss terms R = (1/|nodes|) Σ w_v r_v; empty weights mean w_v = 1.
struct LossTerms {
  std::vector<NodeId> nodes;
  std::vector<Scalar> weights;

  Scalar weight(std::size_t k) const { return weights.empty() ? 1.0 : weights[k]; }
};

Scalar weighted_mean_loss(const Graph& graph, const ForwardTrace& trace, const LossTerms& terms);

// ∂R/∂E^(L) on the trace's output rows: rows w_v (p_v - y_v) / |nodes| for
// loss nodes, zero elsewhere.
Matrix output_gradient(const Graph& graph, const ForwardTrace& trace, const LossTerms& terms);

struct TrainConfig {
  double learning_rate = 0.01;
  int epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::vector<Index> hidden_dims{16};

  void validate() const;
};

// Full-batch Adam over the training receptive field. The loss weights, when
// set, can be replaced between steps.
class Trainer {
 public:
  Trainer(const Graph& graph, const TrainConfig& config, std::vector<NodeId> train_nodes);

  // One optimizer step on the weighted mean loss; returns the loss evaluated
  // before the update.
  Scalar step(std::span<const Scalar> weights = {});

  const GcnParams& params() const { return params_; }
  const std::vector<NodeId>& train_nodes() const { return terms_.nodes; }
  int epoch() const { return t_; }

 private:
  const Graph& graph_;
  TrainConfig config_;
  LossTerms terms_;
  PropagationPtr prop_;
  GcnParams params_;
  std::vector<Matrix> m_, v_;
  int t_ = 0;
};

struct TrainResult {
  GcnParams params;
  std::vector<Scalar> loss_history;
};

TrainResult train_with_history(const Graph& graph, const TrainConfig& config,
                               std::optional<std::span<const Scalar>> loss_weights = std::nullopt);
GcnParams train(const Graph& graph, const TrainConfig& config,
                std::optional<std::span<const Scalar>> loss_weights = std::nullopt);

std::vector<int> predict_classes(const ForwardTrace& trace, std::span<const NodeId> nodes);

// Micro-averaged F1; for single-label multi-class prediction every error is
// one false positive and one false negative, so this equals accuracy.
double micro_f1(std::span<const int> predictions, std::span<const int> truth);

double evaluate_micro_f1(const Graph& graph, const GcnParams& params, std::span<const NodeId> nodes);

// Checkpoint: ordered layer shapes with row-major values.
void save_params(const GcnParams& params, const std::filesystem::path& path);
GcnParams load_params(const std::filesystem::path& path);
std::string serialize_params(const GcnParams& params);
GcnParams parse_params(const std::string& text);

}  // namespace gcnuq
