#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "misuse/clusterer.hpp"
#include "misuse/corpus.hpp"
#include "misuse/error.hpp"
#include "misuse/lda.hpp"
#include "misuse/ocsvm.hpp"

using namespace misuse;

namespace {

std::vector<FeatureVector> gaussian(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FeatureVector> pts(n, FeatureVector(dim));
  for (auto& p : pts)
    for (double& x : p) x = rng.normal();
  return pts;
}

// Exact minimizer of 0.5 a'Ka subject to sum(a) = 1, 0 <= a <= C, found by
// enumerating every (lower, upper, free) labelling of the coordinates and
// solving the equality-constrained problem on the free ones.
std::vector<double> qp_oracle(const std::vector<FeatureVector>& pts, double nu, double gamma) {
  const std::size_t n = pts.size();
  const double C = 1.0 / (nu * static_cast<double>(n));
  Eigen::MatrixXd K(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) K(i, j) = rbf_kernel(pts[i], pts[j], gamma);

  std::size_t combos = 1;
  for (std::size_t i = 0; i < n; ++i) combos *= 3;
  double best = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_a;
  for (std::size_t code = 0; code < combos; ++code) {
    std::vector<int> label(n);
    std::size_t c = code;
    for (std::size_t i = 0; i < n; ++i, c /= 3) label[i] = static_cast<int>(c % 3);  // 0 lower, 1 upper, 2 free
    Eigen::VectorXd a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    std::vector<Eigen::Index> F;
    for (std::size_t i = 0; i < n; ++i) {
      if (label[i] == 1) a(static_cast<Eigen::Index>(i)) = C;
      if (label[i] == 2) F.push_back(static_cast<Eigen::Index>(i));
    }
    const double fixed = a.sum();
    if (F.empty()) {
      if (std::abs(fixed - 1.0) > 1e-12) continue;
    } else {
      // [K_FF  -1] [a_F] = [-K_F,U a_U]
      // [1'     0] [rho]   [1 - fixed ]
      const auto m = static_cast<Eigen::Index>(F.size());
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m + 1, m + 1);
      Eigen::VectorXd b(m + 1);
      for (Eigen::Index r = 0; r < m; ++r) {
        for (Eigen::Index s = 0; s < m; ++s) A(r, s) = K(F[r], F[s]);
        A(r, m) = -1.0;
        A(m, r) = 1.0;
        b(r) = -(K.row(F[r]) * a)(0);
      }
      b(m) = 1.0 - fixed;
      const Eigen::VectorXd x = A.fullPivLu().solve(b);
      if (!((A * x - b).norm() < 1e-9)) continue;
      bool feasible = true;
      for (Eigen::Index r = 0; r < m; ++r) {
        if (x(r) < -1e-12 || x(r) > C + 1e-12) feasible = false;
        a(F[r]) = x(r);
      }
      if (!feasible) continue;
    }
    const double obj = 0.5 * a.dot(K * a);
    if (obj < best) {
      best = obj;
      best_a = a;
    }
  }
  return {best_a.data(), best_a.data() + best_a.size()};
}

LdaEnsemble one_run(const RowMatrix& theta, std::size_t d, const std::string& fingerprint) {
  TopicModel m;
  m.topics = theta.cols;
  m.theta = theta;
  m.phi = RowMatrix(theta.cols, d, 1.0 / static_cast<double>(d));
  LdaEnsemble e;
  e.runs.push_back(m);
  e.corpus_fingerprint = fingerprint;
  return e;
}

SessionDataset tiny(std::size_t m) {
  DatasetBuilder b;
  const std::vector<std::string> acts{"A", "B"};
  for (std::size_t i = 0; i < m; ++i) b.add("s" + std::to_string(i), acts);
  return std::move(b).build();
}

}  // namespace

TEST_CASE("featurize") {
  const std::vector<ActionId> s{0, 0, 1};
  const auto f = featurize(s, 3);
  CHECK(f[0] == doctest::Approx(2.0 / 3.0));
  CHECK(f[1] == doctest::Approx(1.0 / 3.0));
  CHECK(f[2] == 0.0);
  const std::vector<ActionId> c{2};
  CHECK(featurize(c, 3) == FeatureVector{0, 0, 1});
  CHECK_THROWS_AS(featurize(std::vector<ActionId>{}, 3), InvalidArgument);
}

TEST_CASE("OC-SVM nu-property on a Gaussian cloud") {
  const auto pts = gaussian(200, 2, 17);
  OcSvmParams p;
  p.nu = 0.1;
  p.gamma = 0.5;
  const auto model = train_ocsvm(pts, p);
  std::size_t outliers = 0;
  for (const auto& x : pts) outliers += score(model, x) < 0.0;
  const double frac = static_cast<double>(outliers) / 200.0;
  CHECK(frac >= 0.05);
  CHECK(frac <= 0.20);
  CHECK(static_cast<double>(model.support_vectors.size()) / 200.0 >= p.nu - 0.05);

  const double sum = std::accumulate(model.alphas.begin(), model.alphas.end(), 0.0);
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  const double C = 1.0 / (p.nu * 200.0);
  for (double a : model.alphas) {
    CHECK(a > 0.0);
    CHECK(a <= C + 1e-12);
  }

  // margin geometry: free SVs sit on f = 0, bounded ones on or outside it
  for (std::size_t i = 0; i < model.alphas.size(); ++i) {
    const double f = score(model, model.support_vectors[i]);
    if (model.alphas[i] < C - 1e-9)
      CHECK(std::abs(f) <= 1e-2);
    else
      CHECK(f <= 1e-2);
  }

  FeatureVector mean(2, 0.0);
  for (const auto& x : pts)
    for (std::size_t k = 0; k < 2; ++k) mean[k] += x[k] / 200.0;
  CHECK(score(model, mean) > score(model, FeatureVector{10.0, 0.0}));

  // -rho < f(x) <= sum(alpha) - rho
  for (const auto& x : gaussian(50, 2, 99)) {
    const double f = score(model, x);
    CHECK(f > -model.rho);
    CHECK(f <= sum - model.rho + 1e-12);
  }
  CHECK(score(model, mean) == score(model, mean));
  CHECK_THROWS_AS(score(model, FeatureVector{1.0}), InvalidArgument);
}

TEST_CASE("SMO matches the exhaustive QP oracle") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const auto pts = gaussian(7, 2, seed);
    for (double nu : {0.3, 0.5}) {
      const auto oracle = qp_oracle(pts, nu, 0.5);
      const auto alpha = solve_ocsvm_dual(pts, nu, 0.5, 1e-4);
      REQUIRE(alpha.size() == oracle.size());
      for (std::size_t i = 0; i < alpha.size(); ++i) CHECK(std::abs(alpha[i] - oracle[i]) <= 1e-3);
    }
  }
}

TEST_CASE("identical training points") {
  const std::vector<FeatureVector> pts(20, FeatureVector{0.3, 0.7});
  const auto model = train_ocsvm(pts, OcSvmParams{});
  const double at = score(model, pts[0]);
  CHECK(at == doctest::Approx(1.0 - model.rho));
  CHECK(at >= 0.0);
  double prev = at;
  for (double r : {0.1, 0.3, 0.6, 1.0, 2.0}) {
    const double f = score(model, FeatureVector{0.3 + r, 0.7});
    CHECK(f < prev);
    prev = f;
  }
}

TEST_CASE("OC-SVM JSON round-trip") {
  const auto model = train_ocsvm(gaussian(40, 3, 5), OcSvmParams{});
  CHECK(model.gamma == doctest::Approx(1.0 / 3.0));
  CHECK(model.nu == 0.05);
  CHECK(ocsvm_from_json(ocsvm_to_json(model)) == model);
  CHECK_THROWS_AS(ocsvm_from_json("{\"version\":3}"), FormatError);
}

TEST_CASE("routing") {
  const auto a = train_ocsvm(gaussian(30, 2, 1), OcSvmParams{});
  std::vector<FeatureVector> shifted = gaussian(30, 2, 2);
  for (auto& p : shifted) p[0] += 6.0;
  const auto b = train_ocsvm(shifted, OcSvmParams{});

  const std::vector<ClusterSvm> single{{7, a}};
  CHECK(route(FeatureVector{100.0, 100.0}, single).cluster == 7);

  const std::vector<ClusterSvm> twins{{4, a}, {2, a}};
  const auto r = route(FeatureVector{0.0, 0.0}, twins);
  CHECK(r.cluster == 2);
  CHECK(r.scores.size() == 2);

  const std::vector<ClusterSvm> two{{0, a}, {1, b}};
  CHECK(route(FeatureVector{0.0, 0.0}, two).cluster == 0);
  CHECK(route(FeatureVector{6.0, 0.0}, two).cluster == 1);

  // uniform positive rescaling of every model leaves the argmax alone
  auto scaled = two;
  for (auto& m : scaled) {
    for (double& al : m.model.alphas) al *= 3.5;
    m.model.rho *= 3.5;
  }
  for (const auto& x : gaussian(40, 2, 3)) CHECK(route(x, scaled).cluster == route(x, two).cluster);
}

TEST_CASE("route voter") {
  RouteVoter v;
  v.push(1);
  v.push(1);
  CHECK(v.push(2) == 1);

  RouteVoter w;
  w.push(1);
  CHECK(w.push(2) == 2);

  RouteVoter f(15);
  for (int t = 0; t < 15; ++t) f.push(t < 8 ? 3 : 5);
  CHECK(f.frozen());
  const auto frozen = f.current();
  CHECK(frozen == 3);
  for (int t = 0; t < 185; ++t) CHECK(f.push(9) == frozen);
}

TEST_CASE("online router freezes after the horizon") {
  // two clusters over d=4: cluster 0 lives on actions {0,1}, cluster 1 on {2,3}
  std::vector<FeatureVector> c0, c1;
  Rng rng(3);
  for (int i = 0; i < 40; ++i) {
    const double u = rng.uniform(0.2, 0.8);
    c0.push_back({u, 1 - u, 0, 0});
    c1.push_back({0, 0, u, 1 - u});
  }
  const std::vector<ClusterSvm> models{{0, train_ocsvm(c0, OcSvmParams{})}, {1, train_ocsvm(c1, OcSvmParams{})}};
  OnlineRouter router(models, 4, 15);
  std::vector<ClusterId> votes;
  for (int t = 0; t < 200; ++t) {
    const ActionId a = t < 15 ? static_cast<ActionId>(t % 2) : static_cast<ActionId>(2 + t % 2);
    const auto d = router.push(a);
    votes.push_back(d.voted);
    if (t > 100) CHECK(d.instantaneous == 1);
  }
  for (std::size_t t = 14; t < votes.size(); ++t) CHECK(votes[t] == votes[14]);
  CHECK(votes[14] == 0);
}

TEST_CASE("assign_sessions") {
  const auto ds = tiny(4);
  RowMatrix theta(4, 3);
  const double rows[4][3] = {{0.6, 0.3, 0.1}, {0.1, 0.2, 0.7}, {0.4, 0.2, 0.4}, {0.2, 0.5, 0.3}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 3; ++k) theta(i, k) = rows[i][k];
  const auto e = one_run(theta, 2, ds.fingerprint());

  SUBCASE("one cluster with every topic takes everything") {
    const std::vector<ClusterSelection> sel{{0, "all", {{0, 0}, {0, 1}, {0, 2}}}};
    const auto a = assign_sessions(e, sel, ds);
    REQUIRE(a.k() == 1);
    CHECK(a.clusters[0].sessions.size() == 4);
  }
  SUBCASE("largest summed theta wins, ties to the lowest id") {
    const std::vector<ClusterSelection> sel{{2, "right", {{0, 2}}}, {1, "left", {{0, 0}}}, {5, "mid", {{0, 1}}}};
    const auto a = assign_sessions(e, sel, ds);
    const auto labels = a.labels(ds);
    CHECK(labels == std::vector<ClusterId>{1, 2, 1, 5});
    a.validate(ds);
    const auto back = assignment_from_json(assignment_to_json(a));
    CHECK(back.labels(ds) == labels);
  }
  SUBCASE("empty cluster is reported by id") {
    RowMatrix skew(4, 2);
    for (std::size_t i = 0; i < 4; ++i) {
      skew(i, 0) = 0.9;
      skew(i, 1) = 0.1;
    }
    const auto e2 = one_run(skew, 2, ds.fingerprint());
    const std::vector<ClusterSelection> sel{{0, "a", {{0, 0}}}, {3, "b", {{0, 1}}}};
    try {
      assign_sessions(e2, sel, ds);
      FAIL("expected EmptyClusterError");
    } catch (const EmptyClusterError& err) {
      CHECK(err.clusters() == std::vector<ClusterId>{3});
    }
  }
  SUBCASE("overlapping selections are rejected") {
    const std::vector<ClusterSelection> sel{{0, "a", {{0, 0}, {0, 1}}}, {1, "b", {{0, 1}}}};
    CHECK_THROWS_AS(assign_sessions(e, sel, ds), InvalidArgument);
  }
  SUBCASE("foreign ensemble is rejected") {
    const auto other = one_run(theta, 2, "0000000000000000");
    const std::vector<ClusterSelection> sel{{0, "a", {{0, 0}}}};
    CHECK_THROWS_AS(assign_sessions(other, sel, ds), InvalidArgument);
  }
}

TEST_CASE("two-persona assignment follows the ground truth") {
  const auto corpus = generate_synthetic(make_persona_config(std::vector<std::size_t>{200, 200}, 5, 0.0,
                                                             LengthModel{}, 31));
  EnsembleParams p;
  p.topic_counts = {2};
  p.seeds_per_k = 1;
  p.iterations = 300;
  const auto e = fit_ensemble(corpus.dataset, p);
  const std::vector<ClusterSelection> sel{{0, "a", {{0, 0}}}, {1, "b", {{0, 1}}}};
  const auto labels = assign_sessions(e, sel, corpus.dataset).labels(corpus.dataset);
  std::size_t same = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) same += labels[i] == corpus.persona[i];
  const double agree = static_cast<double>(std::max(same, labels.size() - same)) / static_cast<double>(labels.size());
  CHECK(agree >= 0.95);
}
