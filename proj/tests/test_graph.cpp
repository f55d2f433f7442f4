#include "fixtures.hpp"
#include "gcnuq/propagation.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace gcnuq;

namespace {

// Dense D^{-1/2}(A+I)D^{-1/2}, independent of the sparse builder.
Matrix dense_laplacian(Index n, const std::vector<Edge>& edges) {
  Matrix a = Matrix::Identity(n, n);
  for (auto [u, v] : edges) a(u, v) = a(v, u) = 1.0;
  const Vector d = a.rowwise().sum();
  const Vector s = d.array().rsqrt();
  return s.asDiagonal() * a * s.asDiagonal();
}

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kIo;
}

const char* kThreeNode = R"({
  "num_nodes": 3, "num_classes": 2,
  "edges": [[0, 1], [1, 2]],
  "features": [[1, 0], [0, 1], [1, 1]],
  "labels": [0, 1, 0],
  "train_mask": [0], "val_mask": [], "test_mask": [2]
})";

}  // namespace

TEST_CASE("laplacian of a single node is [[1]]") {
  const SparseMatrix a = build_renormalized_laplacian(1, {});
  CHECK(Matrix(a)(0, 0) == doctest::Approx(1.0));
  CHECK(a.nonZeros() == 1);
}

TEST_CASE("laplacian of one edge is all halves") {
  const Matrix a(build_renormalized_laplacian(2, {{0, 1}}));
  CHECK(a.isApprox(Matrix::Constant(2, 2, 0.5)));
}

TEST_CASE("laplacian of path 0-1-2 matches the dense reference") {
  const std::vector<Edge> edges{{0, 1}, {1, 2}};
  const Matrix a(build_renormalized_laplacian(3, edges));
  CHECK(a(0, 1) == doctest::Approx(1.0 / std::sqrt(6.0)).epsilon(1e-12));
  CHECK(a(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK((a - dense_laplacian(3, edges)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("laplacian storage is symmetric, sorted and zero-free") {
  const Graph g = synth_sbm(3, 10, 0.4, 0.05, 4, 11);
  const SparseMatrix& a = g.laplacian();
  CHECK((Matrix(a) - Matrix(a).transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((Matrix(a) - dense_laplacian(g.num_nodes(), g.edges())).cwiseAbs().maxCoeff() < 1e-14);
  for (Index r = 0; r < a.outerSize(); ++r) {
    Index last = -1;
    for (SparseMatrix::InnerIterator it(a, r); it; ++it) {
      CHECK(it.col() > last);
      CHECK(it.value() != 0.0);
      last = it.col();
    }
  }
}

TEST_CASE("spmm") {
  const Matrix d = Matrix::Random(3, 4);
  SparseMatrix eye(3, 3);
  eye.setIdentity();
  CHECK(spmm(eye, d) == d);

  SparseMatrix empty(3, 3);
  CHECK(spmm(empty, d).isZero(0.0));

  const std::vector<Edge> edges{{0, 1}, {1, 2}};
  const SparseMatrix a = build_renormalized_laplacian(3, edges);
  const Matrix ref = dense_laplacian(3, edges) * Matrix::Ones(3, 1);
  CHECK((spmm(a, Matrix::Ones(3, 1)) - ref).cwiseAbs().maxCoeff() < 1e-15);

  CHECK(kind_of([&] { spmm(a, Matrix::Ones(4, 1)); }) == ErrorKind::kShapeMismatch);
}

TEST_CASE("graph file round trip") {
  const Graph g = parse_graph(kThreeNode);
  CHECK(g.num_nodes() == 3);
  CHECK(g.num_classes() == 2);
  CHECK(g.train_mask() == std::vector<NodeId>{0});
  CHECK(parse_graph(serialize_graph(g)) == g);

  const auto path = std::filesystem::temp_directory_path() / "gcnuq_test_graph.json";
  write_graph(g, path);
  CHECK(load_graph(path) == g);
  std::filesystem::remove(path);
}

TEST_CASE("graph validation errors have distinct kinds") {
  auto edit = [](const std::string& from, const std::string& to) {
    std::string text = kThreeNode;
    const auto pos = text.find(from);
    REQUIRE(pos != std::string::npos);
    return text.replace(pos, from.size(), to);
  };
  CHECK(kind_of([&] { parse_graph(edit("[1, 2]]", "[0, 7]]")); }) == ErrorKind::kOutOfRange);
  CHECK(kind_of([&] { parse_graph(edit("\"test_mask\": [2]", "\"test_mask\": [0]")); }) == ErrorKind::kMaskOverlap);
  CHECK(kind_of([&] { parse_graph(edit("[1, 2]]", "[0, 1]]")); }) == ErrorKind::kDuplicateEdge);
  CHECK(kind_of([&] { parse_graph(edit("[1, 2]]", "[2, 2]]")); }) == ErrorKind::kSelfLoop);
  CHECK(kind_of([&] { parse_graph("{ not json"); }) == ErrorKind::kParse);
  CHECK(kind_of([&] { load_graph("/nonexistent/graph.json"); }) == ErrorKind::kIo);
}

TEST_CASE("a reversed edge is merged, not duplicated") {
  const Graph g(3, {{0, 1}, {1, 0}, {1, 2}}, Matrix::Zero(3, 1), {0, 0, 0}, {}, {}, {});
  CHECK(g.edges().size() == 2);
  CHECK(g.degree(1) == 2);
}

TEST_CASE("sbm with p_in=1, p_out=0 gives disjoint cliques") {
  const Graph g = synth_sbm(2, 3, 1.0, 0.0, 2, 5);
  CHECK(g.edges().size() == 6);
  for (auto [u, v] : g.edges()) CHECK(u / 3 == v / 3);
  for (NodeId v = 0; v < 6; ++v) CHECK(g.degree(v) == 2);
}

TEST_CASE("sbm is deterministic per seed") {
  CHECK(synth_sbm(3, 20, 0.3, 0.02, 8, 4) == synth_sbm(3, 20, 0.3, 0.02, 8, 4));
  CHECK(synth_sbm(3, 20, 0.3, 0.02, 8, 4).edges() != synth_sbm(3, 20, 0.3, 0.02, 8, 5).edges());
}

TEST_CASE("sbm intra-block edge count is within 4 sigma of its mean") {
  const Graph g = synth_sbm(3, 20, 0.3, 0.02, 8, 1);
  Index intra = 0;
  for (auto [u, v] : g.edges()) intra += (g.label(u) == g.label(v));
  const double pairs = 3 * 190;
  const double mean = pairs * 0.3, sigma = std::sqrt(pairs * 0.3 * 0.7);
  CHECK(std::abs(static_cast<double>(intra) - mean) <= 4 * sigma);
}

TEST_CASE("split_nodes gives disjoint sorted masks") {
  const Graph g = split_nodes(synth_sbm(3, 10, 0.3, 0.05, 4, 2), 9, 6, 15, 3);
  CHECK(g.train_mask().size() == 9);
  CHECK(g.val_mask().size() == 6);
  CHECK(g.test_mask().size() == 15);
  CHECK(std::is_sorted(g.train_mask().begin(), g.train_mask().end()));
}

TEST_CASE("receptive field holds exactly the L-hop neighbourhood") {
  const Graph g = testing::path_graph(7);
  const NodeId out[] = {3};
  const auto prop = Propagation::receptive_field(g, out, 2);
  CHECK(prop->nodes(2) == std::vector<NodeId>{3});
  CHECK(prop->nodes(1) == std::vector<NodeId>{2, 3, 4});
  CHECK(prop->nodes(0) == std::vector<NodeId>{1, 2, 3, 4, 5});
  const auto dist = hop_distances(g, 0);
  CHECK(dist[6] == 6);
}
