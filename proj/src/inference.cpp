#include "mmvae/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>

#include "mmvae/errors.hpp"
#include "mmvae/parallel.hpp"

namespace mmvae {

namespace {

std::vector<Eigen::Index> keep_columns(const std::vector<std::string>& labels, const std::string& block,
                                       bool prefix) {
  std::vector<Eigen::Index> keep;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    const bool match = prefix ? labels[c].rfind(block, 0) == 0 : labels[c] == block;
    if (!match) keep.push_back(static_cast<Eigen::Index>(c));
  }
  return keep;
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& M, const std::vector<Eigen::Index>& cols) {
  Eigen::MatrixXd out(M.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = M.col(cols[c]);
  return out;
}

double warm_extra_log_variance(const FitOptions& o) { return std::max(o.min_log_variance, std::log(1e-4)); }

}  // namespace

std::string to_string(KnockoffLevel level) { return level == KnockoffLevel::Patient ? "patient" : "visit"; }

KnockoffLevel knockoff_level_from_string(const std::string& s) {
  if (s == "patient") return KnockoffLevel::Patient;
  if (s == "visit") return KnockoffLevel::Visit;
  throw ValidationError("knockoff level must be 'patient' or 'visit', got '" + s + "'");
}

void KnockoffSpec::validate() const {
  if (k < 1) throw ValidationError("knockoff count k must be at least 1");
}

std::vector<KnockoffColumns> gen_knockoffs(const KnockoffSpec& spec, const Dataset& data, Rng& rng) {
  spec.validate();
  std::vector<KnockoffColumns> out;
  out.reserve(data.patients.size());
  for (const auto& p : data.patients) {
    const auto m = static_cast<Eigen::Index>(p.visits.size());
    Eigen::MatrixXd W;
    if (spec.level == KnockoffLevel::Patient) {
      const Eigen::RowVectorXd row = standard_normal_matrix(1, spec.k, rng);
      W = row.replicate(m, 1);
    } else {
      // Row-major draw order so visit r of the patient always takes the same variates.
      W.resize(m, spec.k);
      for (Eigen::Index r = 0; r < m; ++r)
        for (int c = 0; c < spec.k; ++c) W(r, c) = standard_normal(rng);
    }
    KnockoffColumns kc;
    (spec.random_effect ? kc.random : kc.fixed) = W;
    out.push_back(std::move(kc));
  }
  return out;
}

ModelSpec with_knockoffs(const ModelSpec& spec, const KnockoffSpec& ks) {
  ModelSpec s = spec;
  if (ks.random_effect) {
    s.random_knockoffs = ks.k;
  } else {
    s.fixed_knockoffs = ks.k;
  }
  return s;
}

std::string knockoff_block(const KnockoffSpec& ks) { return ks.random_effect ? "random_knockoff" : "knockoff"; }

double lr_statistic(double loglik_full, double loglik_reduced) {
  const double lambda = 2.0 * (loglik_full - loglik_reduced);
  if (!std::isfinite(lambda)) throw OptimizationError("likelihood-ratio statistic is not finite");
  if (lambda < -1e-8)
    throw OptimizationError("full model fits worse than the nested reduced model (Lambda = " +
                            std::to_string(lambda) + ")");
  return std::max(0.0, lambda);
}

BlockTest block_lr_test(const TrainingProblem& problem, const std::vector<Eigen::MatrixXd>& latents,
                        const std::string& block, const FitOptions& options, const MixedModelParams* warm_full) {
  if (latents.size() != problem.designs.size()) throw ShapeError("one latent trajectory per patient is required");
  const auto& d0 = problem.designs.front();
  const bool random = problem.spec.is_random_block(block);
  std::vector<Eigen::Index> kf(static_cast<std::size_t>(d0.X.cols()));
  std::iota(kf.begin(), kf.end(), Eigen::Index{0});
  std::vector<Eigen::Index> keep_random(static_cast<std::size_t>(d0.T.cols()));
  std::iota(keep_random.begin(), keep_random.end(), Eigen::Index{0});
  if (random) {
    keep_random = keep_columns(d0.random_names, block, true);
  } else {
    kf = keep_columns(d0.fixed_blocks, block, false);
  }
  const auto removed = random ? d0.T.cols() - static_cast<Eigen::Index>(keep_random.size())
                              : d0.X.cols() - static_cast<Eigen::Index>(kf.size());
  if (removed == 0) throw ValidationError("model has no columns in block '" + block + "'");

  const LmmData full = lmm_data(problem, latents);
  LmmData reduced = full;
  for (auto& p : reduced) {
    p.X = select_columns(p.X, kf);
    p.T = select_columns(p.T, keep_random);
  }
  const Eigen::Index d = latents.front().cols();
  const Eigen::Index q = d0.T.cols();
  const Eigen::Index qr = static_cast<Eigen::Index>(keep_random.size());

  BlockTest out;
  out.block = block;
  out.rd = static_cast<int>(removed * d);

  MixedModelParams init_red = MixedModelParams::unit(static_cast<Eigen::Index>(kf.size()), qr, d);
  if (warm_full) {
    init_red.log_sigma = warm_full->log_sigma;
    for (Eigen::Index j = 0; j < d; ++j)
      for (Eigen::Index r = 0; r < qr; ++r)
        init_red.log_phi[j * qr + r] = warm_full->log_phi[j * q + keep_random[static_cast<std::size_t>(r)]];
  }
  out.reduced = fit(reduced, init_red, options);

  // Starting the full fit at the reduced optimum guarantees it cannot end below it.
  MixedModelParams from_red = MixedModelParams::unit(d0.X.cols(), q, d);
  from_red.log_sigma = out.reduced.params.log_sigma;
  from_red.log_phi.setConstant(warm_extra_log_variance(options));
  for (Eigen::Index j = 0; j < d; ++j)
    for (Eigen::Index r = 0; r < qr; ++r)
      from_red.log_phi[j * q + keep_random[static_cast<std::size_t>(r)]] = out.reduced.params.log_phi[j * qr + r];
  out.full = fit(full, from_red, options);
  if (warm_full) {
    auto alt = fit(full, *warm_full, options);
    if (alt.loglik > out.full.loglik) out.full = std::move(alt);
  }
  out.lambda = lr_statistic(out.full.loglik, out.reduced.loglik);
  return out;
}

Ecdf::Ecdf(std::vector<double> sample) : sorted_(std::move(sample)) {
  if (sorted_.empty()) throw ValidationError("empirical CDF needs a nonempty sample");
  std::sort(sorted_.begin(), sorted_.end());
}

double Ecdf::operator()(double x) const {
  const auto it = std::upper_bound(sorted_.begin(), sorted_.end(), x);
  return static_cast<double>(it - sorted_.begin()) / static_cast<double>(sorted_.size());
}

double Ecdf::quantile(double p) const {
  if (!(p > 0.0) || p > 1.0) throw ValidationError("quantile level must lie in (0, 1]");
  const double n = static_cast<double>(sorted_.size());
  auto idx = static_cast<std::size_t>(std::ceil(p * n - 1e-12));
  idx = std::clamp<std::size_t>(idx, 1, sorted_.size());
  return sorted_[idx - 1];
}

Ecdf empirical_cdf(const std::vector<double>& sample) { return Ecdf(sample); }

double p_value(double observed, const std::vector<double>& null_sample) {
  if (null_sample.empty()) throw ValidationError("p-value needs a nonempty null sample");
  std::size_t count = 0;
  for (double v : null_sample)
    if (v >= observed) ++count;
  return (1.0 + static_cast<double>(count)) / (static_cast<double>(null_sample.size()) + 1.0);
}

double chi_squared_quantile(double p, double dof) {
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(dof), p);
}

double chi_squared_cdf(double x, double dof) {
  if (x <= 0) return 0.0;
  return boost::math::cdf(boost::math::chi_squared_distribution<double>(dof), x);
}

NullSummary BootstrapNull::summary() const {
  NullSummary s;
  if (lambdas.empty()) return s;
  const double n = static_cast<double>(lambdas.size());
  s.mean = std::accumulate(lambdas.begin(), lambdas.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : lambdas) ss += (v - s.mean) * (v - s.mean);
  s.sd = lambdas.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  const Ecdf e(lambdas);
  s.q50 = e.quantile(0.5);
  s.q90 = e.quantile(0.9);
  s.q95 = e.quantile(0.95);
  s.q99 = e.quantile(0.99);
  return s;
}

int default_knockoff_count(const ModelSpec& resolved_spec, const std::string& block) {
  if (resolved_spec.is_random_block(block)) return 1;
  const int c = resolved_spec.block_columns(block);
  if (c < 1) throw ValidationError("block '" + block + "' has no columns in this model");
  return c;
}

BootstrapNull bootstrap_null(const Dataset& data, const TrainConfig& config, const ModelSpec& spec,
                             const BootstrapOptions& options) {
  if (options.replicates < 1) throw ValidationError("bootstrap needs at least one replicate");
  options.knockoffs.validate();
  config.validate();
  const ModelSpec spec_k = with_knockoffs(spec.resolved(data), options.knockoffs);
  const std::string block = knockoff_block(options.knockoffs);
  const Standardization standardization = compute_standardization(data);
  FitOptions fo;
  fo.criterion = Criterion::ML;
  fo.lbfgs = config.lbfgs;

  struct Replicate {
    bool ok = false;
    double lambda = 0.0;
    int rd = 0;
    std::uint64_t seed = 0;
    std::string message;
  };
  auto run = [&](std::size_t b) {
    Replicate r;
    r.seed = derive_seed(options.seed, b);
    try {
      Rng krng(derive_seed(r.seed, 1));
      const auto knockoffs = gen_knockoffs(options.knockoffs, data, krng);
      const auto problem = make_problem(data, spec_k, standardization, config.normalizer, &knockoffs);
      TrainConfig cb = config;
      cb.seed = derive_seed(r.seed, 2);
      const auto model = fit_joint(problem, cb);
      const auto test = block_lr_test(problem, model.latents, block, fo, &model.mixed);
      r.lambda = test.lambda;
      r.rd = test.rd;
      r.ok = true;
    } catch (const std::exception& e) {
      r.message = e.what();
    }
    return r;
  };
  std::vector<Replicate> reps;
  const auto n = static_cast<std::size_t>(options.replicates);
  if (options.parallel) {
    reps = parallel_map(n, run);
  } else {
    for (std::size_t b = 0; b < n; ++b) reps.push_back(run(b));
  }

  BootstrapNull out;
  for (std::size_t b = 0; b < reps.size(); ++b) {
    if (reps[b].ok) {
      out.lambdas.push_back(reps[b].lambda);
      out.seeds.push_back(reps[b].seed);
      out.rd = reps[b].rd;
    } else {
      out.failed_replicates.push_back(static_cast<int>(b));
      out.failure_messages.push_back(reps[b].message);
    }
  }
  const double frac = static_cast<double>(out.failed_replicates.size()) / static_cast<double>(n);
  if (out.lambdas.empty() || frac > options.max_failure_fraction)
    throw OptimizationError(std::to_string(out.failed_replicates.size()) + " of " + std::to_string(n) +
                            " bootstrap replicates failed" +
                            (out.failure_messages.empty() ? std::string{} : ": " + out.failure_messages.front()));
  return out;
}

LrTestResult lr_test(const TrainedModel& model, const TrainingProblem& problem, const std::string& block,
                     const BootstrapNull& null, double alpha) {
  if (!(alpha > 0.0) || alpha >= 1.0) throw ValidationError("alpha must lie in (0, 1)");
  FitOptions fo;
  fo.criterion = Criterion::ML;
  fo.lbfgs = model.config.lbfgs;
  const auto t = block_lr_test(problem, model.latents, block, fo, &model.mixed);
  LrTestResult r;
  r.block = block;
  r.lambda_obs = t.lambda;
  r.rd = t.rd;
  r.alpha = alpha;
  r.p_value = p_value(t.lambda, null.lambdas);
  r.threshold = null.ecdf().quantile(1.0 - alpha);
  r.chi2_threshold = chi_squared_quantile(1.0 - alpha, t.rd);
  r.null = null;
  return r;
}

}  // namespace mmvae
