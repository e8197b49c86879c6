#pragma once

// Knockoff negative controls, likelihood-ratio statistics for design blocks, and the
// knockoff bootstrap null with its empirical CDF and p-values.

#include <cstdint>
#include <string>
#include <vector>

#include "mmvae/design.hpp"
#include "mmvae/mlmm.hpp"
#include "mmvae/random.hpp"
#include "mmvae/trainer.hpp"

namespace mmvae {

enum class KnockoffLevel { Patient, Visit };
std::string to_string(KnockoffLevel level);
KnockoffLevel knockoff_level_from_string(const std::string& s);

struct KnockoffSpec {
  int k = 1;
  KnockoffLevel level = KnockoffLevel::Patient;  // constant within a patient, like the switch and covariate blocks
  bool random_effect = false;  // knockoffs enter T instead of X

  void validate() const;
  bool operator==(const KnockoffSpec&) const = default;
};

/// Standard-normal knockoff columns, one matrix per patient with one row per visit.
std::vector<KnockoffColumns> gen_knockoffs(const KnockoffSpec& spec, const Dataset& data, Rng& rng);

/// The model spec extended by the knockoff block described by `ks`.
ModelSpec with_knockoffs(const ModelSpec& spec, const KnockoffSpec& ks);
/// Name of the design block holding the knockoffs.
std::string knockoff_block(const KnockoffSpec& ks);

/// 2 (full - reduced); values in [-1e-8, 0) clamp to 0, lower values throw OptimizationError.
double lr_statistic(double loglik_full, double loglik_reduced);

struct BlockTest {
  std::string block;
  double lambda = 0.0;
  int rd = 0;  // removed parameters times latent dimension
  FitResult full;
  FitResult reduced;
};

/// ML fits of the full design and of the design without `block`, both on the same latents.
BlockTest block_lr_test(const TrainingProblem& problem, const std::vector<Eigen::MatrixXd>& latents,
                        const std::string& block, const FitOptions& options,
                        const MixedModelParams* warm_full = nullptr);

/// Right-continuous step function over a sorted sample.
class Ecdf {
 public:
  explicit Ecdf(std::vector<double> sample);
  double operator()(double x) const;
  /// Smallest sample value x with F(x) >= p, for p in (0, 1].
  double quantile(double p) const;
  const std::vector<double>& sorted() const { return sorted_; }

 private:
  std::vector<double> sorted_;
};

Ecdf empirical_cdf(const std::vector<double>& sample);

/// (1 + #{null >= observed}) / (|null| + 1).
double p_value(double observed, const std::vector<double>& null_sample);

double chi_squared_quantile(double p, double dof);
double chi_squared_cdf(double x, double dof);

struct NullSummary {
  double mean = 0.0;
  double sd = 0.0;
  double q50 = 0.0;
  double q90 = 0.0;
  double q95 = 0.0;
  double q99 = 0.0;
};

struct BootstrapNull {
  std::vector<double> lambdas;          // successful replicates, replicate order
  std::vector<std::uint64_t> seeds;     // seed of every successful replicate
  std::vector<int> failed_replicates;
  std::vector<std::string> failure_messages;
  int rd = 0;

  Ecdf ecdf() const { return Ecdf(lambdas); }
  NullSummary summary() const;
};

struct BootstrapOptions {
  int replicates = 1000;
  std::uint64_t seed = 1;
  KnockoffSpec knockoffs;
  double max_failure_fraction = 0.05;
  bool parallel = true;
};

/// Each replicate re-initializes the VAEs, draws fresh knockoffs, retrains and tests the knockoff block.
BootstrapNull bootstrap_null(const Dataset& data, const TrainConfig& config, const ModelSpec& spec,
                             const BootstrapOptions& options);

struct LrTestResult {
  std::string block;
  double lambda_obs = 0.0;
  int rd = 0;
  double p_value = 1.0;
  double alpha = 0.05;
  double threshold = 0.0;      // empirical (1 - alpha) quantile of the null
  double chi2_threshold = 0.0;  // reference chi-squared quantile with rd degrees of freedom
  BootstrapNull null;
};

/// Likelihood-ratio test of `block` in a trained model against a knockoff null.
LrTestResult lr_test(const TrainedModel& model, const TrainingProblem& problem, const std::string& block,
                     const BootstrapNull& null, double alpha);

/// Default knockoff count: the tested block's column count (1 for random blocks).
int default_knockoff_count(const ModelSpec& resolved_spec, const std::string& block);

}  // namespace mmvae
