#include "gcnuq/propagation.hpp"

#include <algorithm>
#include <deque>

namespace gcnuq {

namespace {

// Â[rows, cols] with both index lists sorted; column positions looked up
// through `scratch` (size n, all -1 on entry and on exit).
SparseMatrix restrict_rows_cols(const SparseMatrix& a, const std::vector<NodeId>& rows,
                                const std::vector<NodeId>& cols, std::vector<int>& scratch) {
  for (std::size_t j = 0; j < cols.size(); ++j) scratch[static_cast<std::size_t>(cols[j])] = static_cast<int>(j);
  SparseMatrix out(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  Index nnz = 0;
  for (NodeId r : rows) nnz += a.outerIndexPtr()[r + 1] - a.outerIndexPtr()[r];
  out.reserve(nnz);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.startVec(static_cast<Index>(i));
    for (SparseMatrix::InnerIterator it(a, rows[i]); it; ++it) {
      const int j = scratch[static_cast<std::size_t>(it.col())];
      if (j >= 0) out.insertBack(static_cast<Index>(i), j) = it.value();
    }
  }
  out.finalize();
  for (NodeId c : cols) scratch[static_cast<std::size_t>(c)] = -1;
  return out;
}

std::vector<NodeId> expand_one_hop(const SparseMatrix& a, const std::vector<NodeId>& nodes,
                                   std::vector<char>& mark) {
  std::vector<NodeId> out;
  for (NodeId v : nodes) {
    for (SparseMatrix::InnerIterator it(a, v); it; ++it) {
      const auto u = static_cast<std::size_t>(it.col());
      if (!mark[u]) {
        mark[u] = 1;
        out.push_back(static_cast<NodeId>(u));
      }
    }
  }
  for (NodeId u : out) mark[static_cast<std::size_t>(u)] = 0;
  std::sort(out.begin(), out.end());
  return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<NodeId>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace

std::shared_ptr<const Propagation> Propagation::full(const Graph& g, int num_layers) {
  if (num_layers < 1) throw Error(ErrorKind::kInvalidArgument, "graph_core", "num_layers < 1");
  auto p = std::shared_ptr<Propagation>(new Propagation());
  p->full_ = true;
  std::vector<NodeId> all(static_cast<std::size_t>(g.num_nodes()));
  for (Index v = 0; v < g.num_nodes(); ++v) all[static_cast<std::size_t>(v)] = v;
  auto shared = std::make_shared<const SparseMatrix>(g.laplacian());
  p->adj_.assign(static_cast<std::size_t>(num_layers), shared);
  p->nodes_.assign(static_cast<std::size_t>(num_layers) + 1, all);
  p->input_ = g.features();
  p->input_aggregate_ = g.laplacian() * p->input_;
  return p;
}

std::shared_ptr<const Propagation> Propagation::receptive_field(const Graph& g,
                                                                std::span<const NodeId> outputs,
                                                                int num_layers) {
  if (num_layers < 1) throw Error(ErrorKind::kInvalidArgument, "graph_core", "num_layers < 1");
  const auto& a = g.laplacian();
  auto p = std::shared_ptr<Propagation>(new Propagation());
  p->nodes_.resize(static_cast<std::size_t>(num_layers) + 1);
  auto& top = p->nodes_.back();
  top.assign(outputs.begin(), outputs.end());
  std::sort(top.begin(), top.end());
  top.erase(std::unique(top.begin(), top.end()), top.end());
  for (NodeId v : top) {
    if (v < 0 || v >= g.num_nodes()) {
      throw Error(ErrorKind::kOutOfRange, "graph_core", "node " + std::to_string(v) + " out of range");
    }
  }

  std::vector<char> mark(static_cast<std::size_t>(g.num_nodes()), 0);
  for (int l = num_layers; l >= 1; --l) {
    p->nodes_[static_cast<std::size_t>(l - 1)] =
        expand_one_hop(a, p->nodes_[static_cast<std::size_t>(l)], mark);
  }
  std::vector<int> scratch(static_cast<std::size_t>(g.num_nodes()), -1);
  p->adj_.resize(static_cast<std::size_t>(num_layers));
  for (int l = 1; l <= num_layers; ++l) {
    p->adj_[static_cast<std::size_t>(l - 1)] = std::make_shared<const SparseMatrix>(
        restrict_rows_cols(a, p->nodes_[static_cast<std::size_t>(l)],
                           p->nodes_[static_cast<std::size_t>(l - 1)], scratch));
  }
  p->input_ = gather_rows(g.features(), p->nodes_.front());
  p->input_aggregate_ = p->adj(1) * p->input_;
  return p;
}

Index Propagation::row_in_layer(int l, NodeId v) const {
  const auto& list = nodes_[static_cast<std::size_t>(l)];
  if (full_) return (v >= 0 && v < static_cast<NodeId>(list.size())) ? v : -1;
  auto it = std::lower_bound(list.begin(), list.end(), v);
  if (it == list.end() || *it != v) return -1;
  return static_cast<Index>(it - list.begin());
}

Index Propagation::output_row(NodeId v) const { return row_in_layer(num_layers(), v); }

std::vector<Index> hop_distances(const Graph& g, NodeId source) {
  std::vector<Index> dist(static_cast<std::size_t>(g.num_nodes()), -1);
  const auto& a = g.laplacian();
  std::deque<NodeId> queue{source};
  dist[static_cast<std::size_t>(source)] = 0;
  while (!queue.empty()) {
    const NodeId v = queue.front();
    queue.pop_front();
    for (SparseMatrix::InnerIterator it(a, v); it; ++it) {
      auto& d = dist[static_cast<std::size_t>(it.col())];
      if (d < 0) {
        d = dist[static_cast<std::size_t>(v)] + 1;
        queue.push_back(it.col());
      }
    }
  }
  return dist;
}

}  // namespace gcnuq
