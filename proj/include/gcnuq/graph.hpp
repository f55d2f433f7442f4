#pragma once

#include "gcnuq/common.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

namespace gcnuq {

using Edge = std::pair<NodeId, NodeId>;

// Undirected, unweighted attributed graph with train/val/test node masks.
//
// Edges are stored canonically as (min, max) in first-appearance order. The
// renormalized propagation matrix is built once at construction and shared
// between copies; a Graph never changes after construction (use
// with_train_mask to derive a relabelled copy).
class Graph {
 public:
  Graph(Index num_nodes, std::vector<Edge> edges, Matrix features, std::vector<int> labels,
        std::vector<NodeId> train_mask, std::vector<NodeId> val_mask,
        std::vector<NodeId> test_mask, std::optional<int> num_classes = std::nullopt);

  Index num_nodes() const { return num_nodes_; }
  Index feature_dim() const { return features_.cols(); }
  int num_classes() const { return num_classes_; }

  const std::vector<Edge>& edges() const { return edges_; }
  const Matrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }
  int label(NodeId v) const { return labels_[static_cast<std::size_t>(v)]; }

  const std::vector<NodeId>& train_mask() const { return train_; }
  const std::vector<NodeId>& val_mask() const { return val_; }
  const std::vector<NodeId>& test_mask() const { return test_; }

  // Â = D̃^{-1/2}(A + I)D̃^{-1/2}.
  const SparseMatrix& laplacian() const { return *laplacian_; }
  // Number of neighbours (self-loop excluded).
  Index degree(NodeId v) const;

  // Same structure and features, different training set. Validated like the
  // constructor; the propagation matrix is shared, not rebuilt.
  Graph with_train_mask(std::vector<NodeId> train) const;
  Graph with_masks(std::vector<NodeId> train, std::vector<NodeId> val,
                   std::vector<NodeId> test) const;

  friend bool operator==(const Graph& a, const Graph& b);

 private:
  Graph() = default;
  void validate_masks() const;

  Index num_nodes_ = 0;
  std::vector<Edge> edges_;
  Matrix features_;
  std::vector<int> labels_;
  int num_classes_ = 0;
  std::vector<NodeId> train_, val_, test_;
  std::shared_ptr<const SparseMatrix> laplacian_;
};

SparseMatrix build_renormalized_laplacian(Index num_nodes, const std::vector<Edge>& edges);
inline SparseMatrix build_renormalized_laplacian(const Graph& g) {
  return build_renormalized_laplacian(g.num_nodes(), g.edges());
}

// Sparse × dense, one row at a time in column order.
Matrix spmm(const SparseMatrix& m, const Matrix& dense);

// Structured text (JSON) graph file; see README for the schema.
Graph load_graph(const std::filesystem::path& path);
Graph parse_graph(const std::string& text);
void write_graph(const Graph& g, const std::filesystem::path& path);
std::string serialize_graph(const Graph& g);

struct SbmOptions {
  Index blocks = 3;
  Index per_block = 20;
  double p_in = 0.3;
  double p_out = 0.02;
  Index feature_dim = 8;
  double noise_std = 1.0;
  std::uint64_t seed = 0;
};

// Stochastic block model: labels are block ids, features a one-hot block
// signal plus Gaussian noise. Masks are left empty (see split_nodes).
Graph synth_sbm(const SbmOptions& options);
Graph synth_sbm(Index blocks, Index per_block, double p_in, double p_out, Index feature_dim,
                std::uint64_t seed);

// Seeded random split of all nodes into train/val/test (remaining nodes
// unassigned). Counts must fit in num_nodes.
Graph split_nodes(const Graph& g, Index n_train, Index n_val, Index n_test, std::uint64_t seed);

}  // namespace gcnuq
