#include "fixtures.hpp"
#include "gcnuq/jackknife.hpp"

#include <doctest.h>

#include <numeric>
#include <random>
#include <sstream>

using namespace gcnuq;

namespace {

// Records with hand-set norms: node_uncertainty recomputes norms from
// parameters, so these go through interval_from_records.
NodeUncertainty from_lists(NodeId u, std::vector<Scalar> norms, std::vector<Scalar> errs, Scalar alpha) {
  std::vector<LooRecord> records;
  for (std::size_t i = 0; i < errs.size(); ++i) records.push_back({static_cast<NodeId>(100 + i), errs[i]});
  return interval_from_records(u, records, norms, alpha);
}

}  // namespace

TEST_CASE("quantile follows the ceil(q(n+1)) order statistic") {
  const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  CHECK(quantile(v, 0.75) == 4.0);
  CHECK(quantile(v, 0.05) == 1.0);
  CHECK(quantile(v, 0.5) == 3.0);
  // 0.2·5 is 1 up to rounding and must not round up to the second rank.
  CHECK(quantile(v, 0.2) == 1.0);
  CHECK(quantile(v, 0.99) == 4.0);
  for (double q : {0.01, 0.5, 0.99}) CHECK(quantile(std::vector<double>{7.5}, q) == 7.5);
  CHECK(quantile_rank<double>(5, 0.2) == 2);
  CHECK(quantile_rank<double>(5, 0.8) == 5);
}

TEST_CASE("quantile errors") {
  CHECK_THROWS_AS(quantile(std::vector<double>{}, 0.5), Error);
  CHECK_THROWS_AS(quantile(std::vector<double>{1.0}, 0.0), Error);
  CHECK_THROWS_AS(quantile(std::vector<double>{1.0}, 1.0), Error);
}

TEST_CASE("interval config accepts only 0 < alpha < 0.5") {
  CHECK_NOTHROW(IntervalConfig{0.025}.validate());
  CHECK_THROWS_AS(IntervalConfig{0.0}.validate(), Error);
  CHECK_THROWS_AS(IntervalConfig{0.5}.validate(), Error);
  CHECK_THROWS_AS(IntervalConfig{0.7}.validate(), Error);
}

TEST_CASE("leave-one-out error") {
  const Graph g = testing::path_graph(3, 3, {0, 1, 2});
  CHECK(loo_error(g, 1, (Vector(3) << 0.0, 1.0, 0.0).finished()) == 0.0);
  const Graph g2 = testing::path_graph(2, 2, {0, 1});
  CHECK(loo_error(g2, 1, (Vector(2) << 0.5, 0.5).finished()) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
  CHECK(loo_error(g2, 0, (Vector(2) << 0.5, 0.5).finished()) == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK(loo_error(g, 0, (Vector(3) << 0.1, 0.6, 0.3).finished()) == doctest::Approx(1.12250).epsilon(1e-5));

  Matrix x = Matrix::Zero(2, 1);
  const Graph unlabeled(2, {{0, 1}}, x, {0, -1}, {0}, {}, {}, 2);
  CHECK_THROWS_AS(loo_error(unlabeled, 1, (Vector(2) << 0.5, 0.5).finished()), Error);
}

TEST_CASE("leave-one-out error from parameters uses the receptive field") {
  const Graph g = testing::small_sbm(2);
  const Index hidden[] = {4};
  const LooParams loo{0, init_params(g.feature_dim(), hidden, g.num_classes(), 2), -0.1};
  const NodeId u = g.train_mask()[1];
  CHECK(loo_error(g, u, loo) == doctest::Approx(loo_error(g, u, predict_probs(forward(g, loo.params), u))).epsilon(1e-12));
}

TEST_CASE("interval construction") {
  SUBCASE("constant norms and errors give v ± e") {
    const auto r = from_lists(0, {0.9, 0.9, 0.9, 0.9}, {0.2, 0.2, 0.2, 0.2}, 0.1);
    CHECK(r.lower == doctest::Approx(0.7));
    CHECK(r.upper == doctest::Approx(1.1));
    CHECK(r.width == doctest::Approx(0.4));
  }

  SUBCASE("zero errors and identical norms give zero width") {
    CHECK(from_lists(0, {0.6, 0.6, 0.6}, {0.0, 0.0, 0.0}, 0.025).width == 0.0);
  }

  SUBCASE("five records at alpha 0.2") {
    // Q_0.2 takes rank ceil(1.2) = 2 and Q_0.8 takes rank ceil(4.8) = 5.
    const auto r = from_lists(0, {0.8, 0.9, 1.0, 1.1, 1.2}, {0.1, 0.1, 0.1, 0.1, 0.1}, 0.2);
    CHECK(r.lower == doctest::Approx(0.8));
    CHECK(r.upper == doctest::Approx(1.3));
    CHECK(r.width == doctest::Approx(0.5));
    CHECK(r.width == r.upper - r.lower);
  }

  SUBCASE("u's own record is excluded") {
    std::vector<LooRecord> records{{3, 5.0}, {4, 0.1}};
    const std::vector<Scalar> norms{1.0, 1.0};
    const auto r = interval_from_records(3, records, norms, 0.1);
    CHECK(r.lower == doctest::Approx(0.9));
    CHECK(r.upper == doctest::Approx(1.1));
    const std::vector<LooRecord> only{{3, 5.0}};
    CHECK_THROWS_AS(interval_from_records(3, only, std::vector<Scalar>{1.0}, 0.1), Error);
  }

  SUBCASE("permuting records leaves the interval unchanged") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
    std::vector<LooRecord> records;
    std::vector<Scalar> norms;
    for (int i = 0; i < 15; ++i) {
      records.push_back({i, unit(rng)});
      norms.push_back(unit(rng));
    }
    const auto base = interval_from_records(99, records, norms, 0.1);
    std::vector<std::size_t> perm(records.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 10; ++trial) {
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<LooRecord> r2;
      std::vector<Scalar> n2;
      for (std::size_t k : perm) {
        r2.push_back(records[k]);
        n2.push_back(norms[k]);
      }
      const auto other = interval_from_records(99, r2, n2, 0.1);
      CHECK(other.lower == base.lower);
      CHECK(other.upper == base.upper);
    }
  }
}

TEST_CASE("width is nonnegative and monotone in alpha on random records") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 30);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = count(rng);
    std::vector<Scalar> norms(n), errs(n);
    for (int i = 0; i < n; ++i) {
      norms[i] = unit(rng);
      errs[i] = unit(rng);
    }
    Scalar a1 = 0.49 * unit(rng) + 1e-3, a2 = 0.49 * unit(rng) + 1e-3;
    if (a1 > a2) std::swap(a1, a2);
    const auto w1 = from_lists(-1, norms, errs, a1).width;
    const auto w2 = from_lists(-1, norms, errs, a2).width;
    CHECK(w2 >= 0.0);
    CHECK(w1 >= w2);
  }
}

TEST_CASE("generic jackknife+") {
  const std::vector<Scalar> preds{2.0, 2.0, 2.0}, errs{0.5, 0.5, 0.5};
  const Interval iv = jackknife_plus_generic(preds, errs, 0.1);
  CHECK(iv.lower == 1.5);
  CHECK(iv.upper == 2.5);
  const std::vector<Scalar> p2{0.3, 1.0, -0.2}, zero{0.0, 0.0, 0.0};
  const Interval iv2 = jackknife_plus_generic(p2, zero, 0.2);
  CHECK(iv2.lower <= iv2.upper);
  CHECK_THROWS_AS(jackknife_plus_generic(preds, std::vector<Scalar>{1.0}, 0.1), Error);
  CHECK_THROWS_AS(jackknife_plus_generic({}, {}, 0.1), Error);
}

TEST_CASE("naive jackknife") {
  const Interval a = naive_jackknife(1.0, std::vector<Scalar>{0.1, 0.2, 0.3}, 0.25);
  CHECK(a.lower == doctest::Approx(0.7));
  CHECK(a.upper == doctest::Approx(1.3));
  const Interval b = naive_jackknife(2.0, std::vector<Scalar>{0.4, 0.4}, 0.1);
  CHECK(b.lower == doctest::Approx(1.6));
  CHECK(b.upper == doctest::Approx(2.4));
  const Interval c = naive_jackknife(0.0, std::vector<Scalar>{0.3}, 0.1);
  CHECK(c.width() == doctest::Approx(0.6));
  CHECK_THROWS_AS(naive_jackknife(0.0, {}, 0.1), Error);
}

TEST_CASE("quantify_all") {
  const Graph g = testing::small_sbm(5, 4, 5);
  const Index hidden[] = {4};
  const GcnParams p = init_params(g.feature_dim(), hidden, g.num_classes(), 5);
  InfluenceConfig ic;
  ic.iterations = 10;
  ic.seed = 5;
  const IntervalConfig cc{0.1};

  SUBCASE("empty targets give an empty list") { CHECK(quantify_all(g, p, {}, ic, cc).empty()); }

  SUBCASE("equals per-node interval construction exactly") {
    std::vector<NodeId> targets(static_cast<std::size_t>(g.num_nodes()));
    std::iota(targets.begin(), targets.end(), 0);
    const auto all = quantify_all(g, p, targets, ic, cc);
    const auto sweep = loo_sweep(g, p, ic);
    REQUIRE(sweep.size() == g.train_mask().size());
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto one = node_uncertainty(g, targets[k], sweep, cc);
      CHECK(all[k].node == one.node);
      CHECK(all[k].lower == one.lower);
      CHECK(all[k].upper == one.upper);
      CHECK(all[k].width >= 0.0);
    }
  }

  SUBCASE("parallel sweep matches the serial sweep") {
    const NodeId t[] = {0, 7, 11};
    InfluenceConfig par = ic;
    par.workers = 4;
    const auto a = quantify_all(g, p, t, ic, cc), b = quantify_all(g, p, t, par, cc);
    for (std::size_t k = 0; k < 3; ++k) CHECK(a[k].width == b[k].width);
  }

  SUBCASE("single training node gives v ± e") {
    const Graph one = split_nodes(g, 1, 0, 3, 1);
    const NodeId i = one.train_mask()[0];
    const NodeId u = one.test_mask()[0];
    const auto sweep = loo_sweep(one, p, ic);
    REQUIRE(sweep.size() == 1);
    const Scalar v = predict_probs(forward(one, sweep[0].params.params), u).norm();
    const auto r = quantify_all(one, p, std::span<const NodeId>(&u, 1), ic, cc);
    CHECK(r[0].lower == doctest::Approx(v - sweep[0].record.err).epsilon(1e-12));
    CHECK(r[0].upper == doctest::Approx(v + sweep[0].record.err).epsilon(1e-12));
    CHECK_THROWS_AS(quantify_all(one, p, std::span<const NodeId>(&i, 1), ic, cc), Error);
  }

  SUBCASE("out-of-range target is rejected") {
    const NodeId bad[] = {g.num_nodes()};
    CHECK_THROWS_AS(quantify_all(g, p, bad, ic, cc), Error);
  }
}

TEST_CASE("uncertainty report format") {
  ReportHeader h;
  h.alpha = 0.025;
  h.epsilon = -0.25;
  h.influence = {4, 100, 0.01, 0.5, 1.7, 3};
  h.num_layers = 2;
  const std::vector<NodeUncertainty> rows{{0, 0.5, 1.25, 0.75}, {2, 0.1, 0.1, 0.0}};
  std::ostringstream out;
  write_uncertainty_report(out, h, rows);
  CHECK(out.str() ==
        "# alpha=0.025\n# epsilon=-0.25\n# t=4\n# m=100\n# lambda=0.01\n# s=0.5\n# seed=3\n# layers=2\n"
        "node_id\tlower\tupper\twidth\n0\t0.5\t1.25\t0.75\n2\t0.1\t0.1\t0\n");

  std::ostringstream flagged;
  const char flags[] = {1, 0};
  write_uncertainty_report(flagged, h, rows, flags);
  CHECK(flagged.str().find("width\toutside_field\n0\t0.5\t1.25\t0.75\t1\n2\t0.1\t0.1\t0\t0\n") != std::string::npos);
  const char one_flag[] = {1};
  std::ostringstream bad;
  CHECK_THROWS_AS(write_uncertainty_report(bad, h, rows, one_flag), Error);
}
