#pragma once

#include "gcnuq/graph.hpp"

#include <memory>
#include <span>
#include <vector>

namespace gcnuq {

// Per-layer restriction of Â to the rows an L-layer network actually needs.
//
// nodes[L] are the output nodes (sorted, unique); nodes[l-1] is nodes[l] plus
// its one-hop neighbourhood. adj[l-1] holds Â[nodes[l], nodes[l-1]], so layer
// l maps embeddings over nodes[l-1] to embeddings over nodes[l]. The full
// graph is the special case where every layer covers every node.
class Propagation {
 public:
  static std::shared_ptr<const Propagation> full(const Graph& g, int num_layers);
  static std::shared_ptr<const Propagation> receptive_field(const Graph& g,
                                                            std::span<const NodeId> outputs,
                                                            int num_layers);

  int num_layers() const { return static_cast<int>(adj_.size()); }
  bool is_full() const { return full_; }

  // Layer l in 1..L.
  const SparseMatrix& adj(int l) const { return *adj_[static_cast<std::size_t>(l - 1)]; }
  const std::vector<NodeId>& nodes(int l) const { return nodes_[static_cast<std::size_t>(l)]; }
  const std::vector<NodeId>& outputs() const { return nodes_.back(); }

  // X restricted to nodes(0), and adj(1) · that, computed once.
  const Matrix& input() const { return input_; }
  const Matrix& input_aggregate() const { return input_aggregate_; }

  // Row of `v` among the outputs; -1 if absent.
  Index output_row(NodeId v) const;
  // Row of `v` within layer l's node list; -1 if absent.
  Index row_in_layer(int l, NodeId v) const;

 private:
  Propagation() = default;

  bool full_ = false;
  std::vector<std::shared_ptr<const SparseMatrix>> adj_;
  std::vector<std::vector<NodeId>> nodes_;
  Matrix input_;
  Matrix input_aggregate_;
};

using PropagationPtr = std::shared_ptr<const Propagation>;

// Hop distance from `source` to every node (-1 if unreachable), BFS.
std::vector<Index> hop_distances(const Graph& g, NodeId source);

}  // namespace gcnuq
