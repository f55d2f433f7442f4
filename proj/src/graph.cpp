#include "gcnuq/graph.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace gcnuq {

namespace {

constexpr const char* kModule = "graph_core";

[[noreturn]] void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, kModule, message);
}

void check_mask(const std::vector<NodeId>& mask, Index n, const std::vector<int>& labels,
                const char* name) {
  std::set<NodeId> seen;
  for (NodeId v : mask) {
    if (v < 0 || v >= n) {
      fail(ErrorKind::kOutOfRange, std::string(name) + " node " + std::to_string(v) +
                                       " outside [0, " + std::to_string(n) + ")");
    }
    if (!seen.insert(v).second) {
      fail(ErrorKind::kMaskOverlap,
           std::string(name) + " lists node " + std::to_string(v) + " twice");
    }
    if (labels[static_cast<std::size_t>(v)] < 0) {
      fail(ErrorKind::kInvalidArgument,
           std::string(name) + " node " + std::to_string(v) + " has no label");
    }
  }
}

}  // namespace

Graph::Graph(Index num_nodes, std::vector<Edge> edges, Matrix features, std::vector<int> labels,
             std::vector<NodeId> train_mask, std::vector<NodeId> val_mask,
             std::vector<NodeId> test_mask, std::optional<int> num_classes)
    : num_nodes_(num_nodes),
      features_(std::move(features)),
      labels_(std::move(labels)),
      train_(std::move(train_mask)),
      val_(std::move(val_mask)),
      test_(std::move(test_mask)) {
  if (num_nodes_ < 0) fail(ErrorKind::kInvalidArgument, "negative node count");
  if (features_.rows() != num_nodes_) {
    fail(ErrorKind::kShapeMismatch, "feature matrix has " + std::to_string(features_.rows()) +
                                        " rows for " + std::to_string(num_nodes_) + " nodes");
  }
  if (!features_.allFinite()) fail(ErrorKind::kInvalidArgument, "non-finite feature value");
  if (static_cast<Index>(labels_.size()) != num_nodes_) {
    fail(ErrorKind::kShapeMismatch, "label array length differs from num_nodes");
  }

  int max_label = -1;
  for (int y : labels_) {
    if (y < -1) fail(ErrorKind::kOutOfRange, "label " + std::to_string(y) + " is negative");
    max_label = std::max(max_label, y);
  }
  num_classes_ = num_classes.value_or(max_label + 1);
  if (max_label >= num_classes_) {
    fail(ErrorKind::kOutOfRange, "label " + std::to_string(max_label) + " outside [0, " +
                                     std::to_string(num_classes_) + ")");
  }

  // Canonical (min, max) edges. A reversed copy of an existing edge is a
  // directed listing and is folded in; an identical repeat is an error.
  std::map<Edge, bool> seen;  // canonical edge -> orientation of first listing
  edges_.reserve(edges.size());
  bool symmetrized = false;
  for (const auto& [u, v] : edges) {
    if (u < 0 || v < 0 || u >= num_nodes_ || v >= num_nodes_) {
      fail(ErrorKind::kOutOfRange, "edge (" + std::to_string(u) + "," + std::to_string(v) +
                                       ") outside [0, " + std::to_string(num_nodes_) + ")");
    }
    if (u == v) fail(ErrorKind::kSelfLoop, "self-loop on node " + std::to_string(u));
    const Edge key{std::min(u, v), std::max(u, v)};
    const bool forward = u < v;
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen.emplace(key, forward);
      edges_.push_back(key);
    } else if (it->second != forward) {
      symmetrized = true;
    } else {
      fail(ErrorKind::kDuplicateEdge,
           "duplicate edge (" + std::to_string(u) + "," + std::to_string(v) + ")");
    }
  }
  if (symmetrized) log_warning("directed edge pairs found; graph symmetrized");

  validate_masks();
  laplacian_ = std::make_shared<const SparseMatrix>(build_renormalized_laplacian(num_nodes_, edges_));
}

void Graph::validate_masks() const {
  check_mask(train_, num_nodes_, labels_, "train_mask");
  check_mask(val_, num_nodes_, labels_, "val_mask");
  check_mask(test_, num_nodes_, labels_, "test_mask");
  std::vector<int> owner(static_cast<std::size_t>(num_nodes_), 0);
  int tag = 0;
  for (const auto* mask : {&train_, &val_, &test_}) {
    ++tag;
    for (NodeId v : *mask) {
      auto& o = owner[static_cast<std::size_t>(v)];
      if (o != 0) {
        fail(ErrorKind::kMaskOverlap, "node " + std::to_string(v) + " appears in two masks");
      }
      o = tag;
    }
  }
}

Index Graph::degree(NodeId v) const {
  const auto& a = *laplacian_;
  return a.outerIndexPtr()[v + 1] - a.outerIndexPtr()[v] - 1;
}

Graph Graph::with_train_mask(std::vector<NodeId> train) const {
  return with_masks(std::move(train), val_, test_);
}

Graph Graph::with_masks(std::vector<NodeId> train, std::vector<NodeId> val,
                        std::vector<NodeId> test) const {
  Graph g;
  g.num_nodes_ = num_nodes_;
  g.edges_ = edges_;
  g.features_ = features_;
  g.labels_ = labels_;
  g.num_classes_ = num_classes_;
  g.train_ = std::move(train);
  g.val_ = std::move(val);
  g.test_ = std::move(test);
  g.laplacian_ = laplacian_;
  g.validate_masks();
  return g;
}

bool operator==(const Graph& a, const Graph& b) {
  return a.num_nodes_ == b.num_nodes_ && a.edges_ == b.edges_ && a.features_ == b.features_ &&
         a.labels_ == b.labels_ && a.num_classes_ == b.num_classes_ && a.train_ == b.train_ &&
         a.val_ == b.val_ && a.test_ == b.test_;
}

SparseMatrix build_renormalized_laplacian(Index num_nodes, const std::vector<Edge>& edges) {
  // Degrees of A + I.
  std::vector<Index> degree(static_cast<std::size_t>(num_nodes), 1);
  for (const auto& [u, v] : edges) {
    ++degree[static_cast<std::size_t>(u)];
    ++degree[static_cast<std::size_t>(v)];
  }
  std::vector<Eigen::Triplet<Scalar, int>> triplets;
  triplets.reserve(static_cast<std::size_t>(num_nodes) + 2 * edges.size());
  for (Index v = 0; v < num_nodes; ++v) {
    const auto d = static_cast<Scalar>(degree[static_cast<std::size_t>(v)]);
    triplets.emplace_back(static_cast<int>(v), static_cast<int>(v), 1.0 / d);
  }
  for (const auto& [u, v] : edges) {
    const Scalar du = static_cast<Scalar>(degree[static_cast<std::size_t>(u)]);
    const Scalar dv = static_cast<Scalar>(degree[static_cast<std::size_t>(v)]);
    const Scalar value = 1.0 / std::sqrt(du * dv);
    triplets.emplace_back(static_cast<int>(u), static_cast<int>(v), value);
    triplets.emplace_back(static_cast<int>(v), static_cast<int>(u), value);
  }
  SparseMatrix a(num_nodes, num_nodes);
  a.setFromTriplets(triplets.begin(), triplets.end());
  a.makeCompressed();
  return a;
}

Matrix spmm(const SparseMatrix& m, const Matrix& dense) {
  if (m.cols() != dense.rows()) {
    throw Error(ErrorKind::kShapeMismatch, kModule,
                "spmm: " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + " times " +
                    std::to_string(dense.rows()) + "x" + std::to_string(dense.cols()));
  }
  // Row-major sparse times dense accumulates each output row over that row's
  // nonzeros in ascending column order.
  Matrix out = m * dense;
  return out;
}

/************ file format *********************************/

namespace {

using nlohmann::json;

template <typename T>
T field(const json& doc, const char* name) {
  if (!doc.contains(name)) fail(ErrorKind::kParse, std::string("missing field '") + name + "'");
  try {
    return doc.at(name).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("field '") + name + "': " + e.what());
  }
}

}  // namespace

Graph parse_graph(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, e.what());
  }
  if (!doc.is_object()) fail(ErrorKind::kParse, "graph document must be an object");

  const auto n = field<Index>(doc, "num_nodes");
  const auto raw_edges = field<std::vector<std::vector<NodeId>>>(doc, "edges");
  const auto rows = field<std::vector<std::vector<Scalar>>>(doc, "features");
  const auto labels = field<std::vector<int>>(doc, "labels");
  auto mask = [&](const char* name) {
    return doc.contains(name) ? field<std::vector<NodeId>>(doc, name) : std::vector<NodeId>{};
  };

  std::vector<Edge> edges;
  edges.reserve(raw_edges.size());
  for (const auto& e : raw_edges) {
    if (e.size() != 2) fail(ErrorKind::kParse, "edge entries must be [u, v] pairs");
    edges.emplace_back(e[0], e[1]);
  }
  if (static_cast<Index>(rows.size()) != n) {
    fail(ErrorKind::kShapeMismatch, "features has " + std::to_string(rows.size()) +
                                        " rows for " + std::to_string(n) + " nodes");
  }
  const Index dim = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
  Matrix features(n, dim);
  for (Index r = 0; r < n; ++r) {
    const auto& row = rows[static_cast<std::size_t>(r)];
    if (static_cast<Index>(row.size()) != dim) fail(ErrorKind::kShapeMismatch, "ragged feature rows");
    for (Index c = 0; c < dim; ++c) features(r, c) = row[static_cast<std::size_t>(c)];
  }
  std::optional<int> classes;
  if (doc.contains("num_classes")) classes = field<int>(doc, "num_classes");
  return Graph(n, std::move(edges), std::move(features), labels, mask("train_mask"),
               mask("val_mask"), mask("test_mask"), classes);
}

Graph load_graph(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open graph file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_graph(buffer.str());
}

std::string serialize_graph(const Graph& g) {
  json doc;
  doc["num_nodes"] = g.num_nodes();
  doc["num_classes"] = g.num_classes();
  json edges = json::array();
  for (const auto& [u, v] : g.edges()) edges.push_back({u, v});
  doc["edges"] = std::move(edges);
  json features = json::array();
  for (Index r = 0; r < g.num_nodes(); ++r) {
    json row = json::array();
    for (Index c = 0; c < g.feature_dim(); ++c) row.push_back(g.features()(r, c));
    features.push_back(std::move(row));
  }
  doc["features"] = std::move(features);
  doc["labels"] = g.labels();
  doc["train_mask"] = g.train_mask();
  doc["val_mask"] = g.val_mask();
  doc["test_mask"] = g.test_mask();
  return doc.dump();
}

void write_graph(const Graph& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write graph file " + path.string());
  out << serialize_graph(g) << '\n';
}

/************ synthesis ***********************************/

Graph synth_sbm(const SbmOptions& o) {
  if (o.p_in < 0 || o.p_in > 1 || o.p_out < 0 || o.p_out > 1) {
    fail(ErrorKind::kInvalidArgument, "edge probabilities must lie in [0, 1]");
  }
  if (o.blocks < 1 || o.per_block < 1 || o.feature_dim < 1) {
    fail(ErrorKind::kInvalidArgument, "blocks, per_block and feature_dim must be positive");
  }
  const Index n = o.blocks * o.per_block;
  std::mt19937_64 rng(derive_seed(o.seed, SeedPurpose::kSynth));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, o.noise_std);

  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index v = 0; v < n; ++v) labels[static_cast<std::size_t>(v)] = static_cast<int>(v / o.per_block);

  std::vector<Edge> edges;
  for (Index u = 0; u < n; ++u) {
    for (Index v = u + 1; v < n; ++v) {
      const double p = labels[static_cast<std::size_t>(u)] == labels[static_cast<std::size_t>(v)]
                           ? o.p_in
                           : o.p_out;
      if (unit(rng) < p) edges.emplace_back(u, v);
    }
  }

  Matrix features(n, o.feature_dim);
  for (Index v = 0; v < n; ++v) {
    for (Index c = 0; c < o.feature_dim; ++c) features(v, c) = noise(rng);
    features(v, labels[static_cast<std::size_t>(v)] % o.feature_dim) += 1.0;
  }
  return Graph(n, std::move(edges), std::move(features), std::move(labels), {}, {}, {},
               static_cast<int>(o.blocks));
}

Graph synth_sbm(Index blocks, Index per_block, double p_in, double p_out, Index feature_dim,
                std::uint64_t seed) {
  SbmOptions o;
  o.blocks = blocks;
  o.per_block = per_block;
  o.p_in = p_in;
  o.p_out = p_out;
  o.feature_dim = feature_dim;
  o.seed = seed;
  return synth_sbm(o);
}

Graph split_nodes(const Graph& g, Index n_train, Index n_val, Index n_test, std::uint64_t seed) {
  if (n_train < 0 || n_val < 0 || n_test < 0 || n_train + n_val + n_test > g.num_nodes()) {
    fail(ErrorKind::kInvalidArgument, "split sizes exceed node count");
  }
  std::vector<NodeId> order(static_cast<std::size_t>(g.num_nodes()));
  for (Index v = 0; v < g.num_nodes(); ++v) order[static_cast<std::size_t>(v)] = v;
  std::mt19937_64 rng(derive_seed(seed, SeedPurpose::kSplit));
  std::shuffle(order.begin(), order.end(), rng);
  auto take = [&](Index from, Index count) {
    std::vector<NodeId> out(order.begin() + from, order.begin() + from + count);
    std::sort(out.begin(), out.end());
    return out;
  };
  return g.with_masks(take(0, n_train), take(n_train, n_val), take(n_train + n_val, n_test));
}

}  // namespace gcnuq
