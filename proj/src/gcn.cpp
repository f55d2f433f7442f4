#include "gcnuq/gcn.hpp"

#include "gcnuq/derivatives.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace gcnuq {

namespace {
constexpr const char* kModule = "gcn_model";

[[noreturn]] void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, kModule, message);
}
}  // namespace

Index GcnParams::parameter_count() const {
  Index p = 0;
  for (const auto& w : layers) p += w.size();
  return p;
}

void GcnParams::validate() const {
  if (layers.empty()) fail(ErrorKind::kShapeMismatch, "no layers");
  for (std::size_t l = 1; l < layers.size(); ++l) {
    if (layers[l - 1].cols() != layers[l].rows()) {
      fail(ErrorKind::kShapeMismatch, "layer " + std::to_string(l) + " has " +
                                          std::to_string(layers[l - 1].cols()) +
                                          " columns but layer " + std::to_string(l + 1) +
                                          " expects " + std::to_string(layers[l].rows()));
    }
  }
  for (const auto& w : layers) {
    if (!w.allFinite()) fail(ErrorKind::kInvalidArgument, "non-finite weight");
  }
}

GcnParams init_params(Index input_dim, std::span<const Index> hidden_dims, Index num_classes,
                      std::uint64_t seed) {
  std::vector<Index> dims{input_dim};
  dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
  dims.push_back(num_classes);
  std::mt19937_64 rng(derive_seed(seed, SeedPurpose::kInit));
  GcnParams params;
  for (std::size_t l = 1; l < dims.size(); ++l) {
    const Index fan_in = dims[l - 1];
    const Index fan_out = dims[l];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(fan_in, fan_out);
    for (Index c = 0; c < fan_out; ++c) {
      for (Index r = 0; r < fan_in; ++r) w(r, c) = dist(rng);
    }
    params.layers.push_back(std::move(w));
  }
  return params;
}

Index ForwardTrace::output_row(NodeId v) const {
  const Index r = prop->output_row(v);
  if (r < 0) fail(ErrorKind::kOutOfRange, "node " + std::to_string(v) + " not among trace outputs");
  return r;
}

ForwardTrace forward(PropagationPtr prop, const GcnParams& params) {
  const int L = params.num_layers();
  if (prop->num_layers() != L) {
    fail(ErrorKind::kShapeMismatch, "propagation depth " + std::to_string(prop->num_layers()) +
                                        " differs from layer count " + std::to_string(L));
  }
  if (params.input_dim() != prop->input().cols()) {
    fail(ErrorKind::kShapeMismatch, "W^(1) expects " + std::to_string(params.input_dim()) +
                                        " features, graph has " +
                                        std::to_string(prop->input().cols()));
  }
  ForwardTrace t;
  t.prop = prop;
  t.embeddings.reserve(static_cast<std::size_t>(L) + 1);
  t.embeddings.push_back(prop->input());
  for (int l = 1; l <= L; ++l) {
    Matrix agg = l == 1 ? prop->input_aggregate() : Matrix(prop->adj(l) * t.embeddings.back());
    Matrix pre = agg * params.weight(l);
    if (l < L) {
      // σ'(0) = 0: the mask is strictly positive pre-activations.
      Matrix mask = (pre.array() > 0.0).cast<Scalar>().matrix();
      t.embeddings.push_back(pre.cwiseProduct(mask));
      t.act_masks.push_back(std::move(mask));
    } else {
      t.act_masks.push_back(Matrix::Ones(pre.rows(), pre.cols()));
      t.embeddings.push_back(std::move(pre));
    }
    t.aggregated.push_back(std::move(agg));
  }
  if (!t.logits().allFinite()) fail(ErrorKind::kDivergence, "non-finite logits in forward pass");
  return t;
}

ForwardTrace forward(const Graph& graph, const GcnParams& params) {
  return forward(Propagation::full(graph, params.num_layers()), params);
}

Vector softmax(const Eigen::Ref<const Vector>& logits) {
  const Scalar top = logits.maxCoeff();
  Vector e = (logits.array() - top).exp().matrix();
  return e / e.sum();
}

Vector predict_probs(const ForwardTrace& trace, NodeId node) {
  return softmax(trace.logits().row(trace.output_row(node)).transpose());
}

namespace {
Scalar cross_entropy(const Vector& probs, int label) {
  return -std::log(std::max(probs[label], kProbabilityFloor));
}
}  // namespace

Scalar node_loss(const Graph& graph, const ForwardTrace& trace, NodeId node) {
  const int y = graph.label(node);
  if (y < 0) fail(ErrorKind::kInvalidArgument, "node " + std::to_string(node) + " has no label");
  return cross_entropy(predict_probs(trace, node), y);
}

Scalar total_loss(const Graph& graph, const ForwardTrace& trace, std::span<const NodeId> nodes) {
  if (nodes.empty()) fail(ErrorKind::kEmptySet, "total_loss over empty node set");
  Scalar sum = 0.0;
  for (NodeId v : nodes) sum += node_loss(graph, trace, v);
  return sum / static_cast<Scalar>(nodes.size());
}

Scalar weighted_mean_loss(const Graph& graph, const ForwardTrace& trace, const LossTerms& terms) {
  if (terms.nodes.empty()) fail(ErrorKind::kEmptySet, "loss over empty node set");
  Scalar sum = 0.0;
  for (std::size_t k = 0; k < terms.nodes.size(); ++k) {
    sum += terms.weight(k) * node_loss(graph, trace, terms.nodes[k]);
  }
  return sum / static_cast<Scalar>(terms.nodes.size());
}

Matrix output_gradient(const Graph& graph, const ForwardTrace& trace, const LossTerms& terms) {
  if (terms.nodes.empty()) fail(ErrorKind::kEmptySet, "loss over empty node set");
  if (!terms.weights.empty() && terms.weights.size() != terms.nodes.size()) {
    fail(ErrorKind::kShapeMismatch, "loss weights do not match loss nodes");
  }
  const Matrix& logits = trace.logits();
  Matrix g = Matrix::Zero(logits.rows(), logits.cols());
  const Scalar inv_n = 1.0 / static_cast<Scalar>(terms.nodes.size());
  for (std::size_t k = 0; k < terms.nodes.size(); ++k) {
    const NodeId v = terms.nodes[k];
    const Index r = trace.output_row(v);
    const int y = graph.label(v);
    if (y < 0) fail(ErrorKind::kInvalidArgument, "node " + std::to_string(v) + " has no label");
    Vector p = softmax(logits.row(r).transpose());
    p[y] -= 1.0;
    g.row(r) += (terms.weight(k) * inv_n) * p.transpose();
  }
  return g;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    fail(ErrorKind::kInvalidArgument, "learning rate must be finite and non-negative");
  }
  if (epochs < 1) fail(ErrorKind::kInvalidArgument, "epochs must be >= 1");
  for (Index h : hidden_dims) {
    if (h < 1) fail(ErrorKind::kInvalidArgument, "hidden dims must be positive");
  }
}

Trainer::Trainer(const Graph& graph, const TrainConfig& config, std::vector<NodeId> train_nodes)
    : graph_(graph), config_(config) {
  config_.validate();
  if (train_nodes.empty()) fail(ErrorKind::kEmptySet, "training set is empty");
  terms_.nodes = std::move(train_nodes);
  params_ = init_params(graph.feature_dim(), config_.hidden_dims, graph.num_classes(), config_.seed);
  prop_ = Propagation::full(graph, params_.num_layers());
  for (const auto& w : params_.layers) {
    m_.push_back(Matrix::Zero(w.rows(), w.cols()));
    v_.push_back(Matrix::Zero(w.rows(), w.cols()));
  }
}

Scalar Trainer::step(std::span<const Scalar> weights) {
  terms_.weights.assign(weights.begin(), weights.end());
  const ForwardTrace trace = forward(prop_, params_);
  const Scalar loss = weighted_mean_loss(graph_, trace, terms_);
  if (!std::isfinite(loss)) {
    fail(ErrorKind::kDivergence, "non-finite training loss at epoch " + std::to_string(t_ + 1));
  }
  const LayerGradient grad = backpropagate(trace, params_, output_gradient(graph_, trace, terms_));
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, t_);
  const double c2 = 1.0 - std::pow(config_.beta2, t_);
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    const Matrix& g = grad.layers[l];
    m_[l] = config_.beta1 * m_[l] + (1.0 - config_.beta1) * g;
    v_[l] = config_.beta2 * v_[l] + (1.0 - config_.beta2) * g.cwiseAbs2();
    params_.layers[l].array() -=
        config_.learning_rate * (m_[l].array() / c1) / ((v_[l].array() / c2).sqrt() + config_.adam_eps);
  }
  return loss;
}

TrainResult train_with_history(const Graph& graph, const TrainConfig& config,
                               std::optional<std::span<const Scalar>> loss_weights) {
  Trainer trainer(graph, config, graph.train_mask());
  std::span<const Scalar> weights;
  if (loss_weights) {
    if (loss_weights->size() != graph.train_mask().size()) {
      fail(ErrorKind::kShapeMismatch, "one loss weight per training node required");
    }
    weights = *loss_weights;
  }
  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(config.epochs));
  for (int e = 0; e < config.epochs; ++e) result.loss_history.push_back(trainer.step(weights));
  result.params = trainer.params();
  return result;
}

GcnParams train(const Graph& graph, const TrainConfig& config,
                std::optional<std::span<const Scalar>> loss_weights) {
  return train_with_history(graph, config, loss_weights).params;
}

std::vector<int> predict_classes(const ForwardTrace& trace, std::span<const NodeId> nodes) {
  std::vector<int> out;
  out.reserve(nodes.size());
  for (NodeId v : nodes) {
    Index best = 0;
    trace.logits().row(trace.output_row(v)).maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

double micro_f1(std::span<const int> predictions, std::span<const int> truth) {
  if (predictions.size() != truth.size()) {
    fail(ErrorKind::kShapeMismatch, "prediction and truth lengths differ");
  }
  if (predictions.empty()) fail(ErrorKind::kEmptySet, "micro_f1 of empty input");
  // Pooled over classes: TP = correct, FP = FN = incorrect.
  std::size_t tp = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) tp += predictions[i] == truth[i] ? 1 : 0;
  const double fp = static_cast<double>(truth.size() - tp);
  const double precision = static_cast<double>(tp) / (static_cast<double>(tp) + fp);
  const double recall = precision;
  if (tp == 0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double evaluate_micro_f1(const Graph& graph, const GcnParams& params, std::span<const NodeId> nodes) {
  const ForwardTrace trace = forward(Propagation::receptive_field(graph, nodes, params.num_layers()), params);
  const auto pred = predict_classes(trace, nodes);
  std::vector<int> truth;
  truth.reserve(nodes.size());
  for (NodeId v : nodes) truth.push_back(graph.label(v));
  return micro_f1(pred, truth);
}

/************ checkpoint **********************************/

std::string serialize_params(const GcnParams& params) {
  nlohmann::json doc;
  doc["layers"] = nlohmann::json::array();
  for (const auto& w : params.layers) {
    nlohmann::json layer;
    layer["rows"] = w.rows();
    layer["cols"] = w.cols();
    std::vector<Scalar> values;
    values.reserve(static_cast<std::size_t>(w.size()));
    for (Index r = 0; r < w.rows(); ++r) {
      for (Index c = 0; c < w.cols(); ++c) values.push_back(w(r, c));
    }
    layer["values"] = std::move(values);
    doc["layers"].push_back(std::move(layer));
  }
  return doc.dump();
}

GcnParams parse_params(const std::string& text) {
  GcnParams params;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& layer : doc.at("layers")) {
      const auto rows = layer.at("rows").get<Index>();
      const auto cols = layer.at("cols").get<Index>();
      const auto values = layer.at("values").get<std::vector<Scalar>>();
      if (static_cast<Index>(values.size()) != rows * cols) {
        fail(ErrorKind::kShapeMismatch, "checkpoint layer value count mismatch");
      }
      Matrix w(rows, cols);
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) w(r, c) = values[static_cast<std::size_t>(r * cols + c)];
      }
      params.layers.push_back(std::move(w));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("checkpoint: ") + e.what());
  }
  params.validate();
  return params;
}

void save_params(const GcnParams& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write checkpoint " + path.string());
  out << serialize_params(params) << '\n';
}

GcnParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open checkpoint " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_params(buffer.str());
}

}  // namespace gcnuq
