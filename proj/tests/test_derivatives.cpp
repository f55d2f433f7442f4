#include "fixtures.hpp"
#include "gcnuq/derivatives.hpp"

#include <doctest.h>

#include <cmath>

using namespace gcnuq;

namespace {

constexpr Scalar kStep = 1e-5;

struct Instance {
  Graph graph;
  GcnParams params;
  ForwardTrace trace;
  LossTerms terms;
};

Instance make_instance(std::uint64_t seed, std::vector<Index> hidden = {4}, Index per_block = 4,
                       Index n_train = 6) {
  Graph g = testing::small_sbm(seed, per_block, n_train);
  GcnParams p = init_params(g.feature_dim(), hidden, g.num_classes(), seed);
  ForwardTrace t = forward(g, p);
  LossTerms terms{g.train_mask(), {}};
  return {std::move(g), std::move(p), std::move(t), std::move(terms)};
}

// Mean loss over `nodes` when E^(layer) is replaced by `e` and the rest of
// the network is evaluated densely.
Scalar loss_from_layer(const Graph& g, const GcnParams& p, int layer, Matrix e, std::span<const NodeId> nodes) {
  const Matrix a(g.laplacian());
  for (int l = layer + 1; l <= p.num_layers(); ++l) {
    e = a * e * p.weight(l);
    if (l < p.num_layers()) e = e.cwiseMax(0.0);
  }
  Scalar sum = 0.0;
  for (NodeId v : nodes) {
    const Vector z = e.row(v).transpose();
    const Scalar m = z.maxCoeff();
    sum += -(z[g.label(v)] - m - std::log((z.array() - m).exp().sum()));
  }
  return sum / static_cast<Scalar>(nodes.size());
}

void check_close(const Matrix& a, const Matrix& b, Scalar rel, Scalar floor) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  for (Index i = 0; i < a.size(); ++i) {
    const Scalar x = a.data()[i], y = b.data()[i];
    CHECK(std::abs(x - y) <= std::max(rel * std::max(std::abs(x), std::abs(y)), floor));
  }
}

Scalar flat_loss(const Instance& in, const Vector& theta) {
  const ParamLayout layout(in.params);
  return total_loss(in.graph, forward(in.graph, unflatten_params(theta, layout)), in.terms.nodes);
}

}  // namespace

TEST_CASE("flatten is column-major per layer") {
  LayerGradient g;
  g.layers.push_back((Matrix(2, 2) << 1, 2, 3, 4).finished());
  Vector expected(4);
  expected << 1, 3, 2, 4;
  CHECK(flatten(g) == expected);
  CHECK(flatten(LayerGradient{{Matrix::Zero(3, 2)}}).isZero(0.0));
  CHECK(flatten(LayerGradient{{Matrix::Zero(3, 2)}}).size() == 6);
}

TEST_CASE("flatten/unflatten round trip") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Index hidden[] = {3 + static_cast<Index>(seed), 2};
    const GcnParams p = init_params(4, hidden, 3, seed);
    const ParamLayout layout(p);
    CHECK(unflatten_params(flatten(p), layout) == p);
    const FlatGradient v = Vector::Random(layout.size());
    CHECK(flatten(unflatten(v, layout)) == v);
    CHECK(layout.index(2, 1, 0) == layout.offset(2) + 1);
    CHECK(layout.index(2, 0, 1) == layout.offset(2) + layout.rows(2));
  }
}

TEST_CASE("grad_wrt_embeddings") {
  const Instance in = make_instance(1);
  const Matrix gl = output_gradient(in.graph, in.trace, in.terms);

  SUBCASE("identity at the output layer") { CHECK(grad_wrt_embeddings(in.trace, in.params, gl, 2) == gl); }

  SUBCASE("zero when the next layer's activations are dead") {
    ForwardTrace dead = in.trace;
    dead.act_masks[1].setZero();
    CHECK(grad_wrt_embeddings(dead, in.params, gl, 1).isZero(0.0));
  }

  SUBCASE("matches finite differences in E^(l)") {
    for (int l = 1; l <= 2; ++l) {
      const Matrix g = grad_wrt_embeddings(in.trace, in.params, gl, l);
      Matrix fd(g.rows(), g.cols());
      Matrix e = in.trace.embedding(l);
      for (Index r = 0; r < e.rows(); ++r) {
        for (Index c = 0; c < e.cols(); ++c) {
          const Scalar x = e(r, c);
          e(r, c) = x + kStep;
          const Scalar up = loss_from_layer(in.graph, in.params, l, e, in.terms.nodes);
          e(r, c) = x - kStep;
          const Scalar down = loss_from_layer(in.graph, in.params, l, e, in.terms.nodes);
          e(r, c) = x;
          fd(r, c) = (up - down) / (2 * kStep);
        }
      }
      check_close(g, fd, 1e-5, 1e-8);
    }
  }
}

TEST_CASE("grad_wrt_weights") {
  SUBCASE("one-hot prediction on the true class gives zero gradient") {
    Matrix x(1, 2);
    x << 1000.0, -1000.0;
    const Graph g(1, {}, x, {0}, {0}, {}, {}, 2);
    const GcnParams p{{Matrix::Identity(2, 2)}};
    const ForwardTrace t = forward(g, p);
    CHECK(grad_wrt_weights(g, t, p, g.train_mask()).layer(1).cwiseAbs().maxCoeff() <= 1e-12);
  }

  SUBCASE("dead hidden layer gives zero first-layer gradient") {
    Instance in = make_instance(2);
    // Positive features and negative W1 make every pre-activation negative.
    Matrix x = in.graph.features().cwiseAbs();
    const Graph g(in.graph.num_nodes(), in.graph.edges(), x, in.graph.labels(), in.graph.train_mask(), {}, {});
    in.params.weight(1) = -in.params.weight(1).cwiseAbs();
    const ForwardTrace t = forward(g, in.params);
    CHECK(t.mask(1).isZero(0.0));
    const LayerGradient grad = grad_wrt_weights(g, t, in.params, g.train_mask());
    CHECK(grad.layer(1).isZero(0.0));
  }

  SUBCASE("per-entry match with finite differences on 20 instances") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Instance in = make_instance(seed);
      const Vector analytic = flatten(grad_wrt_weights(in.graph, in.trace, in.params, in.terms.nodes));
      const Vector theta = flatten(in.params);
      Vector fd(theta.size()), probe = theta;
      for (Index k = 0; k < theta.size(); ++k) {
        probe[k] = theta[k] + kStep;
        const Scalar up = flat_loss(in, probe);
        probe[k] = theta[k] - kStep;
        const Scalar down = flat_loss(in, probe);
        probe[k] = theta[k];
        fd[k] = (up - down) / (2 * kStep);
      }
      check_close(analytic, fd, 1e-5, 1e-8);
    }
  }

  SUBCASE("singleton set gives the node-wise gradient on any propagation") {
    const Instance in = make_instance(3, {4}, 6);
    const NodeId u[] = {7};
    const auto local = forward(Propagation::receptive_field(in.graph, u, 2), in.params);
    const Vector a = flatten(grad_wrt_weights(in.graph, in.trace, in.params, u));
    const Vector b = flatten(grad_wrt_weights(in.graph, local, in.params, u));
    check_close(a, b, 1e-12, 1e-15);
  }
}

TEST_CASE("same-layer Hessian blocks are zero") {
  const Instance in = make_instance(4, {3, 3});
  const CurvatureCache cache = make_curvature_cache(in.graph, in.trace, in.params, in.terms);
  for (int l = 1; l <= 3; ++l) {
    const Matrix& w = in.params.weight(l);
    for (Index c = 0; c < w.rows(); ++c) {
      for (Index d = 0; d < w.cols(); ++d) CHECK(hessian_block(in.trace, in.params, cache, l, l, c, d).isZero(0.0));
    }
  }
}

TEST_CASE("embedding sensitivity: seed equals the direct formula, recursion matches finite differences") {
  const Instance in = make_instance(5, {4, 3});
  for (int i = 1; i <= 3; ++i) {
    const Index c = 1, d = 2 % in.params.weight(i).cols();
    Matrix direct = Matrix::Zero(in.trace.embedding(i).rows(), in.params.weight(i).cols());
    direct.col(d) = in.trace.mask(i).col(d).cwiseProduct(in.trace.aggregate(i).col(c));
    CHECK(embedding_sensitivity(in.trace, in.params, i, c, d, i) == direct);

    for (int k = i; k <= 3; ++k) {
      GcnParams up = in.params, down = in.params;
      up.weight(i)(c, d) += kStep;
      down.weight(i)(c, d) -= kStep;
      const Matrix fd = (forward(in.graph, up).embedding(k) - forward(in.graph, down).embedding(k)) / (2 * kStep);
      check_close(embedding_sensitivity(in.trace, in.params, i, c, d, k), fd, 1e-5, 1e-8);
    }
  }
}

TEST_CASE("mixed embedding derivative matches finite differences with the output gradient frozen") {
  const Instance in = make_instance(6, {4, 3});
  const CurvatureCache cache = make_curvature_cache(in.graph, in.trace, in.params, in.terms);
  const Matrix frozen = cache.output_grad;
  for (int i = 2; i <= 3; ++i) {
    const Index c = 0, d = 1;
    for (int k = 1; k < i; ++k) {
      GcnParams up = in.params, down = in.params;
      up.weight(i)(c, d) += kStep;
      down.weight(i)(c, d) -= kStep;
      const Matrix fd = (grad_wrt_embeddings(forward(in.graph, up), up, frozen, k) -
                         grad_wrt_embeddings(forward(in.graph, down), down, frozen, k)) /
                        (2 * kStep);
      check_close(mixed_embedding_derivative(in.trace, in.params, cache, i, c, d, k), fd, 1e-5, 1e-8);
    }
  }
}

TEST_CASE("materialized Hessian") {
  const Instance in = make_instance(7);
  const FlatHessianOperator op(in.graph, in.trace, in.params, in.terms);
  const Matrix h = op.materialize();

  SUBCASE("symmetric") {
    CHECK((h - h.transpose()).cwiseAbs().maxCoeff() <= 1e-8 * h.cwiseAbs().maxCoeff());
    const Index p = 3, q = op.size() - 2;
    const Vector hp = op.apply(Vector::Unit(op.size(), p)), hq = op.apply(Vector::Unit(op.size(), q));
    CHECK(std::abs(hp[q] - hq[p]) <= 1e-8 * std::max(std::abs(hp[q]), 1e-12));
  }

  SUBCASE("HVP equals H v") {
    const Vector v = Vector::Random(op.size());
    check_close(op.apply(v), h * v, 1e-10, 1e-14);
  }

  SUBCASE("matches finite differences of the analytic gradient") {
    const ParamLayout layout(in.params);
    const Vector theta = flatten(in.params);
    Matrix fd(op.size(), op.size());
    Vector probe = theta;
    auto grad = [&](const Vector& t) {
      const GcnParams p = unflatten_params(t, layout);
      return flatten(grad_wrt_weights(in.graph, forward(in.graph, p), p, in.terms.nodes));
    };
    for (Index k = 0; k < theta.size(); ++k) {
      probe[k] = theta[k] + kStep;
      const Vector up = grad(probe);
      probe[k] = theta[k] - kStep;
      const Vector down = grad(probe);
      probe[k] = theta[k];
      fd.col(k) = (up - down) / (2 * kStep);
    }
    check_close(h, 0.5 * (fd + fd.transpose()), 1e-4, 1e-6);
  }

  SUBCASE("size guard") {
    const Index hidden[] = {120};
    const GcnParams big = init_params(in.graph.feature_dim(), hidden, 3, 0);
    const FlatHessianOperator op_big(in.graph, forward(in.graph, big), big, in.terms);
    CHECK_THROWS_AS(op_big.materialize(), Error);
  }
}

TEST_CASE("one-layer linear model has the closed-form Gauss-Newton Hessian") {
  const Graph g = testing::small_sbm(8, 4, 5);
  const GcnParams p = init_params(g.feature_dim(), std::span<const Index>{}, 3, 8);
  REQUIRE(p.num_layers() == 1);
  const ForwardTrace t = forward(g, p);
  const FlatHessianOperator op(g, t, p, LossTerms{g.train_mask(), {}});

  const Matrix ax = Matrix(g.laplacian()) * g.features();
  const Index dim = ax.cols(), c = 3;
  Matrix ref = Matrix::Zero(dim * c, dim * c);
  for (NodeId v : g.train_mask()) {
    const Vector z = (ax.row(v) * p.weight(1)).transpose();
    const Vector prob = (z.array() - z.maxCoeff()).exp() / (z.array() - z.maxCoeff()).exp().sum();
    const Matrix lambda = Matrix(prob.asDiagonal()) - prob * prob.transpose();
    const Vector a = ax.row(v).transpose();
    // vec is column-major: index r + k·dim for W[r, k].
    for (Index k = 0; k < c; ++k) {
      for (Index j = 0; j < c; ++j) ref.block(k * dim, j * dim, dim, dim) += lambda(k, j) * a * a.transpose();
    }
  }
  ref /= static_cast<Scalar>(g.train_mask().size());
  check_close(op.materialize(), ref, 1e-10, 1e-14);
}
