#pragma once

#include "gcnuq/graph.hpp"

#include <vector>

namespace gcnuq::testing {

// Path 0–1–…–(n-1) with one-hot-ish features and labels v % classes.
inline Graph path_graph(Index n, int classes = 2, std::vector<NodeId> train = {}, std::vector<NodeId> test = {}) {
  std::vector<Edge> edges;
  for (NodeId v = 0; v + 1 < n; ++v) edges.emplace_back(v, v + 1);
  Matrix x = Matrix::Zero(n, classes);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (NodeId v = 0; v < n; ++v) {
    labels[static_cast<std::size_t>(v)] = static_cast<int>(v % classes);
    x(v, v % classes) = 1.0;
  }
  return Graph(n, std::move(edges), std::move(x), std::move(labels), std::move(train), {}, std::move(test), classes);
}

inline Graph small_sbm(std::uint64_t seed, Index per_block = 4, Index n_train = 6, Index feature_dim = 5) {
  SbmOptions o;
  o.blocks = 3;
  o.per_block = per_block;
  o.p_in = 0.5;
  o.p_out = 0.1;
  o.feature_dim = feature_dim;
  o.seed = seed;
  const Graph g = synth_sbm(o);
  return split_nodes(g, n_train, 0, g.num_nodes() - n_train, seed);
}

}  // namespace gcnuq::testing
