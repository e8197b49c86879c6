#include <algorithm>
#include <cmath>
#include <random>

#include <boost/math/distributions/chi_squared.hpp>

#include "doctest.h"
#include "fixtures.hpp"
#include "mmvae/errors.hpp"
#include "mmvae/inference.hpp"
#include "mmvae/synthgen.hpp"

using namespace mmvae;

namespace {

// Latents drawn from the mixed model itself; columns of `zero_block` get zero coefficients.
std::vector<Eigen::MatrixXd> simulate_latents(const TrainingProblem& pb, int d, const std::string& zero_block, Rng& rng) {
  const auto& d0 = pb.designs.front();
  Eigen::MatrixXd B = 0.5 * standard_normal_matrix(d0.X.cols(), d, rng);
  for (Eigen::Index c = 0; c < d0.X.cols(); ++c)
    if (d0.fixed_blocks[static_cast<std::size_t>(c)] == zero_block) B.row(c).setZero();
  std::vector<Eigen::MatrixXd> Z;
  for (const auto& des : pb.designs) {
    const Eigen::MatrixXd U = 0.4 * standard_normal_matrix(des.T.cols(), d, rng);
    Z.push_back(des.X * B + des.T * U + 0.3 * standard_normal_matrix(des.X.rows(), d, rng));
  }
  return Z;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.latent_dim = 1;
  c.hidden = {4};
  c.epochs = 1;
  c.vae_updates_per_epoch = 3;
  c.learning_rate = 0.01;
  return c;
}

}  // namespace

TEST_CASE("patient-level knockoffs repeat across visits, visit-level ones do not") {
  const auto data = fixtures::small_dataset(3);
  Rng rng(5);
  KnockoffSpec ks;
  ks.k = 2;
  ks.level = KnockoffLevel::Patient;
  const auto w = gen_knockoffs(ks, data, rng);
  REQUIRE(w.size() == data.patients.size());
  for (const auto& kc : w) {
    CHECK(kc.fixed.rows() == 6);
    CHECK(kc.fixed.cols() == 2);
    for (Eigen::Index r = 1; r < kc.fixed.rows(); ++r) CHECK(kc.fixed.row(r) == kc.fixed.row(0));
  }
  ks.level = KnockoffLevel::Visit;
  const auto v = gen_knockoffs(ks, data, rng);
  CHECK(v[0].fixed(0, 0) != v[0].fixed(1, 0));
  ks.random_effect = true;
  const auto r = gen_knockoffs(ks, data, rng);
  CHECK(r[0].random.cols() == 2);
  CHECK(r[0].fixed.size() == 0);
}

TEST_CASE("visit-level knockoff moments match a standard normal") {
  Dataset data = fixtures::small_dataset(1);
  data.patients.resize(1);
  auto& p = data.patients[0];
  p.visits.resize(10000, p.visits.front());
  KnockoffSpec ks;
  ks.k = 3;
  ks.level = KnockoffLevel::Visit;
  Rng rng(11);
  const Eigen::MatrixXd W = gen_knockoffs(ks, data, rng)[0].fixed;
  const double n = static_cast<double>(W.rows());
  const Eigen::RowVectorXd mean = W.colwise().mean();
  const Eigen::MatrixXd C = (W.rowwise() - mean).transpose() * (W.rowwise() - mean) / (n - 1.0);
  const double se_mean = 1.0 / std::sqrt(n);
  const double se_var = std::sqrt(2.0 / n);
  const double se_cov = 1.0 / std::sqrt(n);
  for (int a = 0; a < 3; ++a) {
    CHECK(std::abs(mean[a]) < 3 * se_mean);
    CHECK(std::abs(C(a, a) - 1.0) < 3 * se_var);
    for (int b = a + 1; b < 3; ++b) CHECK(std::abs(C(a, b)) < 3 * se_cov);
  }
}

TEST_CASE("knockoffs are deterministic given the seed") {
  const auto data = fixtures::small_dataset(2);
  KnockoffSpec ks;
  ks.k = 2;
  Rng a(3), b(3);
  const auto wa = gen_knockoffs(ks, data, a);
  const auto wb = gen_knockoffs(ks, data, b);
  for (std::size_t i = 0; i < wa.size(); ++i) CHECK(wa[i].fixed == wb[i].fixed);
  ks.k = 0;
  CHECK_THROWS_AS(gen_knockoffs(ks, data, a), ValidationError);
}

TEST_CASE("likelihood-ratio statistic arithmetic") {
  CHECK(lr_statistic(-100.0, -102.5) == doctest::Approx(5.0));
  CHECK(lr_statistic(-7.0, -7.0) == 0.0);
  CHECK(lr_statistic(-7.0, -7.0 + 4e-9) == 0.0);
  CHECK_THROWS_AS(lr_statistic(-10.0, -9.0), OptimizationError);
}

TEST_CASE("block test under a true zero block is chi-squared on average") {
  const auto data = fixtures::small_dataset(30);
  ModelSpec spec;
  spec.covariates = {"sex"};
  const auto pb = make_problem(data, spec, Normalizer::Literal);
  const int d = 2;
  Rng rng(21);
  FitOptions fo;
  double sum = 0.0;
  const int reps = 200;
  int rd = 0;
  for (int r = 0; r < reps; ++r) {
    const auto Z = simulate_latents(pb, d, "switch", rng);
    const auto t = block_lr_test(pb, Z, "switch", fo);
    CHECK(t.lambda >= 0.0);
    CHECK(t.full.loglik >= t.reduced.loglik - 1e-9);
    sum += t.lambda;
    rd = t.rd;
  }
  CHECK(rd == 4 * d);
  // Mean of chi2_rd is rd; the Monte Carlo SE of the mean is sqrt(2 rd / reps).
  CHECK(std::abs(sum / reps - rd) < 4.0 * std::sqrt(2.0 * rd / reps) + 0.1 * rd);
}

TEST_CASE("block test detects a nonzero block and handles random blocks") {
  const auto data = fixtures::small_dataset(20);
  ModelSpec spec;
  const auto pb = make_problem(data, spec, Normalizer::Literal);
  Rng rng(4);
  auto Z = simulate_latents(pb, 1, "", rng);
  FitOptions fo;
  const auto t = block_lr_test(pb, Z, "switch", fo);
  CHECK(t.lambda > 20.0);
  const auto tr = block_lr_test(pb, Z, "random_post_switch", fo);
  CHECK(tr.lambda >= 0.0);
  CHECK(tr.rd == 1);
  CHECK(tr.reduced.params.log_phi.size() == 2);
  CHECK_THROWS_AS(block_lr_test(pb, Z, "knockoff", fo), ValidationError);
}

TEST_CASE("empirical CDF steps and quantiles") {
  const auto F = empirical_cdf({3.0, 1.0, 2.0});
  CHECK(F(2.0) == doctest::Approx(2.0 / 3.0));
  CHECK(F(0.5) == 0.0);
  CHECK(F(9.0) == 1.0);
  CHECK(F(1.0) == doctest::Approx(1.0 / 3.0));
  CHECK(F.quantile(0.5) == 2.0);
  CHECK(F.quantile(1.0) == 3.0);
  CHECK(F.quantile(0.2) == 1.0);
  CHECK_THROWS_AS(empirical_cdf({}), ValidationError);
}

TEST_CASE("empirical CDF of chi-squared draws is close to the exact CDF") {
  std::mt19937_64 gen(8);
  std::chi_squared_distribution<double> chi(3.0);
  std::vector<double> draws(100000);
  for (auto& x : draws) x = chi(gen);
  const auto F = empirical_cdf(draws);
  const auto& s = F.sorted();
  double ks = 0.0;
  const double n = static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double c = boost::math::cdf(boost::math::chi_squared_distribution<double>(3.0), s[i]);
    ks = std::max({ks, std::abs((static_cast<double>(i) + 1.0) / n - c), std::abs(static_cast<double>(i) / n - c)});
  }
  CHECK(ks < 0.01);
}

TEST_CASE("bootstrap p-value formula") {
  std::vector<double> null(1000);
  for (std::size_t i = 0; i < null.size(); ++i) null[i] = static_cast<double>(i);
  CHECK(p_value(5000.0, null) == doctest::Approx(1.0 / 1001.0));
  CHECK(p_value(-INFINITY, null) == 1.0);
  // Ties count as exceedances: enumerate against a direct count.
  const std::vector<double> tied{1.0, 2.0, 2.0, 3.0};
  for (double x : {0.0, 1.0, 2.0, 2.5, 3.0, 4.0}) {
    int count = 0;
    for (double v : tied) count += v >= x;
    CHECK(p_value(x, tied) == doctest::Approx((1.0 + count) / 5.0));
  }
  double prev = 1.0;
  for (double x = -1.0; x < 1001.0; x += 3.7) {
    const double p = p_value(x, null);
    CHECK(p <= prev);
    CHECK(p > 0.0);
    prev = p;
  }
}

TEST_CASE("chi-squared helpers") {
  CHECK(chi_squared_quantile(0.95, 3) == doctest::Approx(7.814728).epsilon(1e-6));
  CHECK(chi_squared_cdf(7.814728, 3) == doctest::Approx(0.95).epsilon(1e-6));
  CHECK(chi_squared_cdf(-1.0, 3) == 0.0);
}

TEST_CASE("bootstrap null is reproducible and runs a single replicate") {
  const auto data = fixtures::small_dataset(10);
  ModelSpec spec;
  BootstrapOptions bo;
  bo.replicates = 1;
  bo.seed = 9;
  const auto one = bootstrap_null(data, quick_config(), spec, bo);
  REQUIRE(one.lambdas.size() == 1);
  CHECK(std::isfinite(one.lambdas[0]));
  CHECK(one.rd == 1);
  bo.replicates = 4;
  bo.knockoffs.k = 2;
  const auto a = bootstrap_null(data, quick_config(), spec, bo);
  bo.parallel = false;
  const auto b = bootstrap_null(data, quick_config(), spec, bo);
  CHECK(a.lambdas == b.lambdas);
  CHECK(a.seeds == b.seeds);
  CHECK(a.rd == 2);
  CHECK(a.lambdas[0] != a.lambdas[1]);
  CHECK(a.summary().q95 >= a.summary().q50);
}

TEST_CASE("lr_test reports p-value and thresholds against the null") {
  const auto data = fixtures::small_dataset(10);
  ModelSpec spec;
  const auto pb = make_problem(data, spec, Normalizer::Literal);
  const auto model = fit_joint(pb, quick_config());
  BootstrapNull null;
  null.lambdas = {0.5, 1.0, 2.0, 100.0};
  null.rd = 4;
  const auto r = lr_test(model, pb, "switch", null, 0.25);
  CHECK(r.rd == 4);
  CHECK(r.threshold == 2.0);
  CHECK(r.p_value == doctest::Approx(p_value(r.lambda_obs, null.lambdas)));
  CHECK(r.chi2_threshold == doctest::Approx(chi_squared_quantile(0.75, 4)));
  CHECK_THROWS_AS(lr_test(model, pb, "switch", null, 0.0), ValidationError);
}

TEST_CASE("regenerated null data keep the visit, instrument and mask pattern") {
  GeneratorConfig g;
  g.patients = 25;
  g.instruments = compact_instruments(2, 5, 4, 0.7);
  g.missing_item_rate = 0.1;
  g.covariates = false;
  const auto reg = generate_registry(g);
  TrainConfig c = quick_config();
  c.latent_dim = 2;
  const auto pb = make_problem(reg.data, ModelSpec{}, Normalizer::Literal);
  const auto model = fit_joint(pb, c);
  Rng r1(1), r2(2);
  const auto a = generate_null_from_model(model, pb, r1);
  const auto b = generate_null_from_model(model, pb, r2);
  bool any_diff = false;
  int missing = 0;
  for (std::size_t i = 0; i < a.patients.size(); ++i) {
    const auto& pa = a.patients[i];
    const auto& pi = reg.data.patients[i];
    CHECK(pa.switches == pi.switches);
    REQUIRE(pa.visits.size() == pi.visits.size());
    for (std::size_t v = 0; v < pa.visits.size(); ++v) {
      CHECK(pa.visits[v].time == pi.visits[v].time);
      REQUIRE(pa.visits[v].observations.size() == pi.visits[v].observations.size());
      for (std::size_t o = 0; o < pa.visits[v].observations.size(); ++o) {
        const auto& la = pa.visits[v].observations[o].responses.levels;
        const auto& lb = b.patients[i].visits[v].observations[o].responses.levels;
        const auto& li = pi.visits[v].observations[o].responses.levels;
        CHECK(pa.visits[v].observations[o].instrument == pi.visits[v].observations[o].instrument);
        for (std::size_t k = 0; k < la.size(); ++k) {
          CHECK((la[k] < 0) == (li[k] < 0));
          CHECK((lb[k] < 0) == (li[k] < 0));
          missing += li[k] < 0;
          any_diff |= la[k] != lb[k];
        }
      }
    }
  }
  CHECK(missing > 0);
  CHECK(any_diff);
  a.validate();
}
