#include <cmath>
#include <numbers>

#include "doctest.h"
#include "dense_mvn.hpp"
#include "mmvae/errors.hpp"
#include "mmvae/mlmm.hpp"
#include "mmvae/random.hpp"

using namespace mmvae;

namespace {

struct Instance {
  LmmData data;
  MixedModelParams params;
};

Instance random_instance(Rng& rng, int patients, int max_m, int p, int q, int d) {
  std::uniform_int_distribution<int> mdist(1, max_m);
  Instance inst;
  inst.params.B = standard_normal_matrix(p, d, rng);
  inst.params.log_phi = 0.5 * standard_normal_matrix(q * d, 1, rng);
  inst.params.log_sigma = 0.5 * standard_normal_matrix(d, 1, rng);
  for (int i = 0; i < patients; ++i) {
    const int m = std::max(mdist(rng), p > 0 ? 1 : 1);
    LmmPatient pt;
    pt.X = standard_normal_matrix(m, p, rng);
    pt.T = standard_normal_matrix(m, q, rng);
    pt.Z = standard_normal_matrix(m, d, rng);
    inst.data.push_back(pt);
  }
  return inst;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

}  // namespace

TEST_CASE("marginal covariance special cases") {
  SUBCASE("no random effects gives Sigma kron I") {
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(3, 2);
    Eigen::MatrixXd phi = Eigen::MatrixXd::Identity(4, 4);
    Eigen::MatrixXd sigma(2, 2);
    sigma << 2.0, 0.0, 0.0, 3.0;
    auto mc = marginal_covariance(T, phi, sigma);
    Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(6, 6);
    expected.diagonal() << 2, 2, 2, 3, 3, 3;
    CHECK((mc.cov - expected).norm() == doctest::Approx(0.0));
  }
  SUBCASE("random intercept gives compound symmetry") {
    Eigen::MatrixXd T = Eigen::MatrixXd::Ones(4, 1);
    Eigen::MatrixXd phi = Eigen::MatrixXd::Constant(1, 1, 0.7);
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Constant(1, 1, 1.3);
    auto mc = marginal_covariance(T, phi, sigma);
    Eigen::MatrixXd expected = 1.3 * Eigen::MatrixXd::Identity(4, 4) + Eigen::MatrixXd::Constant(4, 4, 0.7);
    CHECK((mc.cov - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("precision inverts covariance, symmetric") {
    Rng rng(3);
    auto inst = random_instance(rng, 1, 3, 1, 2, 2);
    Eigen::MatrixXd T = standard_normal_matrix(3, 2, rng);
    auto mc = marginal_covariance(T, inst.params.components().phi, inst.params.components().sigma);
    CHECK((mc.cov * mc.precision - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((mc.cov - mc.cov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("non positive definite input raises conditioning error") {
    Eigen::MatrixXd T = Eigen::MatrixXd::Ones(2, 1);
    Eigen::MatrixXd phi = Eigen::MatrixXd::Constant(1, 1, 1.0);
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Constant(1, 1, -5.0);
    CHECK_THROWS_AS(marginal_covariance(T, phi, sigma), ConditioningError);
  }
}

TEST_CASE("ML log-likelihood of a standard normal point") {
  LmmData data{{Eigen::MatrixXd::Zero(1, 1), Eigen::MatrixXd::Zero(1, 1), Eigen::MatrixXd::Zero(1, 1)}};
  VarianceComponents vc{Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Identity(1, 1)};
  CHECK(loglik_ml(Eigen::MatrixXd::Zero(1, 1), vc, data) == doctest::Approx(-0.5 * std::log(2 * std::numbers::pi)));
}

TEST_CASE("dense oracle agreement on random instances") {
  Rng rng(20240611);
  for (int rep = 0; rep < 50; ++rep) {
    std::uniform_int_distribution<int> dd(1, 3), pp(1, 4), qq(1, 3);
    const int d = dd(rng), p = pp(rng), q = qq(rng);
    auto inst = random_instance(rng, 3, 4, p, q, d);
    // Make sure the fixed-effect normal matrix is well posed.
    inst.data.push_back({standard_normal_matrix(4, p, rng), standard_normal_matrix(4, q, rng), standard_normal_matrix(4, d, rng)});
    const auto vc = inst.params.components();
    CAPTURE(rep);
    CHECK(rel_err(loglik_ml(inst.params.B, vc, inst.data), oracle::ml(inst.params.B, vc, inst.data)) < 1e-8);
    CHECK(rel_err(loglik_reml(vc, inst.data), oracle::reml(vc, inst.data)) < 1e-8);
    const Eigen::MatrixXd Bh = blue(vc, inst.data);
    CHECK((Bh - oracle::gls(inst.data, vc)).cwiseAbs().maxCoeff() < 1e-8);
    const auto U = blup(Bh, vc, inst.data);
    const auto Uo = oracle::conditional_mean(Bh, vc, inst.data);
    for (std::size_t i = 0; i < U.size(); ++i) CHECK((U[i] - Uo[i]).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("REML equals ML without fixed effects") {
  Rng rng(5);
  auto inst = random_instance(rng, 4, 4, 0, 2, 2);
  const auto vc = inst.params.components();
  CHECK(loglik_reml(vc, inst.data) == doctest::Approx(loglik_ml(Eigen::MatrixXd::Zero(0, 2), vc, inst.data)).epsilon(1e-12));
}

TEST_CASE("BLUE special cases") {
  SUBCASE("saturated design returns responses") {
    Rng rng(9);
    LmmPatient pt{Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Zero(3, 1), standard_normal_matrix(3, 2, rng)};
    VarianceComponents vc{Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2)};
    CHECK((blue(vc, {pt}) - pt.Z).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("identity precision is OLS") {
    Rng rng(10);
    LmmData data;
    Eigen::MatrixXd Xall(0, 2), Zall(0, 2);
    for (int i = 0; i < 5; ++i) {
      LmmPatient pt{standard_normal_matrix(3, 2, rng), Eigen::MatrixXd::Zero(3, 1), standard_normal_matrix(3, 2, rng)};
      Xall.conservativeResize(Xall.rows() + 3, Eigen::NoChange);
      Xall.bottomRows(3) = pt.X;
      Zall.conservativeResize(Zall.rows() + 3, Eigen::NoChange);
      Zall.bottomRows(3) = pt.Z;
      data.push_back(pt);
    }
    VarianceComponents vc{Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2)};
    const Eigen::MatrixXd ols = (Xall.transpose() * Xall).ldlt().solve(Xall.transpose() * Zall);
    CHECK((blue(vc, data) - ols).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("rank deficient design raises conditioning error") {
    LmmPatient pt{Eigen::MatrixXd::Ones(3, 2), Eigen::MatrixXd::Zero(3, 1), Eigen::MatrixXd::Ones(3, 1)};
    VarianceComponents vc{Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Identity(1, 1)};
    CHECK_THROWS_AS(blue(vc, {pt}), ConditioningError);
    CHECK_THROWS_AS(loglik_reml(vc, {pt}), ConditioningError);
  }
}

TEST_CASE("BLUP shrinks to zero") {
  Rng rng(11);
  auto inst = random_instance(rng, 3, 4, 1, 2, 2);
  auto vc = inst.params.components();
  vc.phi *= 1e-12;
  const auto U = blup(inst.params.B, vc, inst.data);
  for (const auto& u : U) CHECK(u.cwiseAbs().maxCoeff() < 1e-9);
  for (auto& pt : inst.data) pt.Z = pt.X * inst.params.B;
  for (const auto& u : blup(inst.params.B, inst.params.components(), inst.data)) CHECK(u.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("BLUE and BLUP are invariant to patient order") {
  Rng rng(12);
  auto inst = random_instance(rng, 5, 4, 2, 2, 2);
  const auto vc = inst.params.components();
  auto rev = inst.data;
  std::reverse(rev.begin(), rev.end());
  CHECK((blue(vc, inst.data) - blue(vc, rev)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("criterion gradients match finite differences") {
  Rng rng(13);
  for (auto crit : {Criterion::ML, Criterion::REML}) {
    for (int rep = 0; rep < 5; ++rep) {
      auto inst = random_instance(rng, 6, 4, 2, 2, 2);
      const auto cv = evaluate_criterion(inst.data, inst.params.log_phi, inst.params.log_sigma, crit, true);
      Eigen::VectorXd x = inst.params.packed_log_variances();
      const Eigen::Index nphi = inst.params.log_phi.size();
      for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double h = 1e-5;
        Eigen::VectorXd xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        const double fp = evaluate_criterion(inst.data, xp.head(nphi), xp.tail(x.size() - nphi), crit, false).value;
        const double fm = evaluate_criterion(inst.data, xm.head(nphi), xm.tail(x.size() - nphi), crit, false).value;
        const double fd = (fp - fm) / (2 * h);
        CAPTURE(k);
        CHECK(std::abs(fd - cv.gradient[k]) / std::max(1e-3, std::abs(fd)) < 1e-4);
      }
      // Criterion value matches the standalone likelihood functions.
      if (crit == Criterion::ML)
        CHECK(cv.value == doctest::Approx(loglik_ml_profiled(inst.params.components(), inst.data)).epsilon(1e-12));
      else
        CHECK(cv.value == doctest::Approx(loglik_reml(inst.params.components(), inst.data)).epsilon(1e-12));
    }
  }
}

TEST_CASE("REML on a balanced one-way layout reproduces ANOVA estimators") {
  Rng rng(14);
  const int groups = 12, n = 5;
  LmmData data;
  Eigen::VectorXd means(groups);
  double grand = 0.0;
  std::vector<Eigen::VectorXd> ys;
  for (int g = 0; g < groups; ++g) {
    Eigen::VectorXd y = 2.0 + 1.5 * standard_normal(rng) + Eigen::VectorXd::NullaryExpr(n, [&] { return standard_normal(rng); }).array();
    ys.push_back(y);
    means[g] = y.mean();
    grand += y.sum();
    data.push_back({Eigen::MatrixXd::Ones(n, 1), Eigen::MatrixXd::Ones(n, 1), y});
  }
  grand /= groups * n;
  double ssw = 0.0, ssb = 0.0;
  for (int g = 0; g < groups; ++g) {
    ssw += (ys[g].array() - means[g]).square().sum();
    ssb += n * (means[g] - grand) * (means[g] - grand);
  }
  const double msw = ssw / (groups * (n - 1));
  const double msb = ssb / (groups - 1);
  REQUIRE(msb > msw);
  FitOptions opt;
  opt.criterion = Criterion::REML;
  const auto res = fit(data, MixedModelParams::unit(1, 1, 1), opt);
  CHECK(res.converged);
  CHECK(std::exp(res.params.log_sigma[0]) == doctest::Approx(msw).epsilon(1e-5));
  CHECK(std::exp(res.params.log_phi[0]) == doctest::Approx((msb - msw) / n).epsilon(1e-5));
  CHECK(res.params.B(0, 0) == doctest::Approx(grand).epsilon(1e-8));
}

TEST_CASE("fit recovers simulated variance components") {
  Rng rng(15);
  const int d = 2, q = 2, p = 2, m = 6;
  Eigen::VectorXd phi(4), sigma(2);
  phi << 1.0, 0.3, 0.6, 0.2;  // index j*q + r
  sigma << 0.5, 0.8;
  Eigen::MatrixXd B(p, d);
  B << 1.0, -0.5, 0.3, 0.8;
  LmmData data;
  for (int i = 0; i < 200; ++i) {
    LmmPatient pt;
    pt.X = standard_normal_matrix(m, p, rng);
    pt.T.resize(m, q);
    for (int t = 0; t < m; ++t) pt.T.row(t) << 1.0, t * 0.5 - 1.0;
    Eigen::MatrixXd U(q, d);
    for (int j = 0; j < d; ++j)
      for (int r = 0; r < q; ++r) U(r, j) = std::sqrt(phi[j * q + r]) * standard_normal(rng);
    Eigen::MatrixXd E(m, d);
    for (int j = 0; j < d; ++j)
      for (int t = 0; t < m; ++t) E(t, j) = std::sqrt(sigma[j]) * standard_normal(rng);
    pt.Z = pt.X * B + pt.T * U + E;
    data.push_back(pt);
  }
  const auto init = MixedModelParams::unit(p, q, d);
  const double ll0 = evaluate_criterion(data, init.log_phi, init.log_sigma, Criterion::ML, false).value;
  const auto res = fit(data, init);
  CAPTURE(res.message); CAPTURE(res.iterations);
  CHECK(res.converged);
  CHECK(res.loglik >= ll0);
  CHECK(res.gradient_norm < 1e-6);
  for (int k = 0; k < 4; ++k) CHECK(std::abs(std::exp(res.params.log_phi[k]) / phi[k] - 1.0) < 0.15);
  for (int j = 0; j < 2; ++j) CHECK(std::abs(std::exp(res.params.log_sigma[j]) / sigma[j] - 1.0) < 0.15);
  CHECK(res.loglik == doctest::Approx(loglik_ml(res.params.B, res.params.components(), data)).epsilon(1e-12));

  // Mean residual of predictions is near zero.
  double total = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    total += (data[i].Z - predict(res.params, res.blups[i], data[i].X, data[i].T)).sum();
    count += m * d;
  }
  CHECK(std::abs(total / count) < 0.05);
}

TEST_CASE("fit drives absent random effects to the boundary") {
  // Balanced one-way data with no group effect. The ML estimate of the group variance is
  // max(0, SSB/a - MSW)/n; use the first realization where the truncation is active.
  const int groups = 150, n = 5;
  for (std::uint64_t seed = 16;; ++seed) {
    Rng rng(seed);
    LmmData data;
    double ssw = 0.0, ssb = 0.0, grand = 0.0;
    std::vector<double> means;
    for (int i = 0; i < groups; ++i) {
      Eigen::MatrixXd z = Eigen::MatrixXd::NullaryExpr(n, 1, [&] { return standard_normal(rng); });
      means.push_back(z.mean());
      grand += z.sum();
      ssw += (z.array() - z.mean()).square().sum();
      data.push_back({Eigen::MatrixXd::Ones(n, 1), Eigen::MatrixXd::Ones(n, 1), z});
    }
    grand /= groups * n;
    for (double mu : means) ssb += n * (mu - grand) * (mu - grand);
    if (ssb / groups - ssw / (groups * (n - 1)) > 0.0) continue;
    const auto res = fit(data, MixedModelParams::unit(1, 1, 1));
    CHECK(std::exp(res.params.log_phi[0]) < 1e-3);
    CHECK(std::exp(res.params.log_sigma[0]) == doctest::Approx((ssw + ssb) / (groups * n)).epsilon(1e-4));
    break;
  }
}

TEST_CASE("predict is an exact linear combination") {
  MixedModelParams mp = MixedModelParams::unit(1, 2, 1);
  mp.B(0, 0) = 2.0;
  Eigen::MatrixXd U(2, 1);
  U << 0.5, -1.0;
  Eigen::MatrixXd X(2, 1), T(2, 2);
  X << 1.0, 3.0;
  T << 1.0, 0.0, 1.0, 2.0;
  Eigen::MatrixXd expected(2, 1);
  expected << 2.5, 4.5;
  CHECK((predict(mp, U, X, T) - expected).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(predict(mp, U, Eigen::MatrixXd::Ones(2, 3), T), ShapeError);
}

TEST_CASE("frozen model agrees with direct BLUE/BLUP and its adjoint is exact") {
  Rng rng(17);
  auto inst = random_instance(rng, 4, 4, 2, 2, 2);
  const auto vc = inst.params.components();
  std::vector<Eigen::MatrixXd> X, T, Z;
  for (auto& pt : inst.data) {
    X.push_back(pt.X);
    T.push_back(pt.T);
    Z.push_back(pt.Z);
  }
  FrozenMixedModel fm(X, T, vc);
  const auto pr = fm.predict(Z);
  CHECK((pr.B - blue(vc, inst.data)).cwiseAbs().maxCoeff() < 1e-10);
  const auto U = blup(pr.B, vc, inst.data);
  for (std::size_t i = 0; i < U.size(); ++i) CHECK((pr.U[i] - U[i]).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(fm.loglik_ml(Z, pr.B) == doctest::Approx(loglik_ml(pr.B, vc, inst.data)).epsilon(1e-12));

  // Linear functional L = sum <G_i, Zhat_i>; its derivative in Z is the adjoint applied to G.
  std::vector<Eigen::MatrixXd> G;
  for (auto& z : Z) G.push_back(standard_normal_matrix(z.rows(), z.cols(), rng));
  const auto adj = fm.predict_adjoint(G);
  auto functional = [&](const std::vector<Eigen::MatrixXd>& zz) {
    const auto p2 = fm.predict(zz);
    double s = 0.0;
    for (std::size_t i = 0; i < zz.size(); ++i) s += (G[i].array() * p2.Zhat[i].array()).sum();
    return s;
  };
  for (std::size_t i = 0; i < Z.size(); ++i)
    for (Eigen::Index e = 0; e < Z[i].size(); ++e) {
      auto zp = Z, zm = Z;
      zp[i].data()[e] += 1e-6;
      zm[i].data()[e] -= 1e-6;
      const double fd = (functional(zp) - functional(zm)) / 2e-6;
      CHECK(std::abs(fd - adj[i].data()[e]) < 1e-6 * std::max(1.0, std::abs(fd)));
    }
  // ML gradient in Z at B = BLUE (envelope theorem).
  const auto g = fm.loglik_ml_grad(Z, pr.B);
  auto prof = [&](const std::vector<Eigen::MatrixXd>& zz) { return fm.loglik_ml(zz, fm.blue(zz)); };
  for (std::size_t i = 0; i < Z.size(); ++i)
    for (Eigen::Index e = 0; e < Z[i].size(); ++e) {
      auto zp = Z, zm = Z;
      zp[i].data()[e] += 1e-6;
      zm[i].data()[e] -= 1e-6;
      const double fd = (prof(zp) - prof(zm)) / 2e-6;
      CHECK(std::abs(fd - g[i].data()[e]) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
}
