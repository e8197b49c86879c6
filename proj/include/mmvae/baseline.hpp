#pragma once

// Data-level comparison pipeline: one univariate mixed model per instrument on official
// sum scores, a patient bootstrap for the cross-instrument covariance of the switch
// coefficients, and fixed-effect GLS pooling with a parametric null calibration.

#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmvae/dataset.hpp"
#include "mmvae/design.hpp"
#include "mmvae/mlmm.hpp"

namespace mmvae {

struct SumScore {
  std::size_t patient = 0;
  std::size_t visit = 0;
  double total = 0.0;
};

/// Official-item totals at every visit where `instrument` was administered; missing items count 0.
std::vector<SumScore> sum_scores(const Dataset& data, int instrument);

struct BaselineOptions {
  ModelSpec spec;  // the intercept is always added
  int min_patients = 30;
  int min_visits = 4;
  int min_pre_switch_visits = 2;
  int min_post_switch_visits = 2;
  FitOptions fit;
  void validate() const;
};

enum class FitStatus { Fitted, NotConverged, Skipped, Failed };
std::string to_string(FitStatus s);

struct InstrumentFit {
  std::string instrument;
  int index = 0;
  int eligible_patients = 0;
  FitStatus status = FitStatus::Skipped;
  std::string reason;
  std::vector<std::size_t> patients;  // dataset indices of the eligible patients
  ModelSpec spec;
  Standardization standardization;
  std::vector<std::string> fixed_names;
  std::vector<std::string> effect_names;  // switch-block columns
  Eigen::VectorXd effect;
  Eigen::MatrixXd effect_covariance;  // model-based, from the GLS normal equations
  FitResult fit;

  bool usable() const { return status == FitStatus::Fitted || status == FitStatus::NotConverged; }
};

InstrumentFit fit_instrument_lmm(const Dataset& data, int instrument, const BaselineOptions& options);
std::vector<InstrumentFit> fit_all_instruments(const Dataset& data, const BaselineOptions& options);

/// Sum-score prediction X B + T u at t_switch + horizon for an eligible patient.
double baseline_prediction(const InstrumentFit& fit, const Dataset& data, std::size_t patient, double horizon);

struct BootstrapCovariance {
  std::vector<int> instruments;   // dataset indices, in stacking order
  Eigen::MatrixXd estimates;      // replicates x (instruments * effects)
  Eigen::MatrixXd covariance;
  int failed_replicates = 0;
  std::vector<std::string> failure_messages;
};

struct MetaBootstrapOptions {
  int replicates = 200;
  std::uint64_t seed = 1;
  double max_failure_fraction = 0.10;
};

/// Patient resampling with replacement; every usable instrument is refit per replicate.
BootstrapCovariance bootstrap_cov(const Dataset& data, const std::vector<InstrumentFit>& fits,
                                  const BaselineOptions& options, const MetaBootstrapOptions& boot);

struct MetaResult {
  Eigen::VectorXd pooled;             // one entry per effect coordinate
  Eigen::MatrixXd pooled_covariance;  // (A' C^-1 A)^-1
  Eigen::MatrixXd covariance;         // cross-instrument covariance used
  double statistic = 0.0;             // theta' C^-1 theta
  double ridge = 0.0;                 // added to the diagonal, 0 when not needed
  double p_value = 1.0;               // set by calibration
  std::vector<double> null_statistics;
};

/// `effects` holds one equally sized vector per instrument.
MetaResult meta_gls(const std::vector<Eigen::VectorXd>& effects, const Eigen::MatrixXd& covariance);

/// Null replicates: sum scores regenerated from each instrument's no-switch fit, then refit.
std::vector<double> meta_null_statistics(const Dataset& data, const std::vector<InstrumentFit>& fits,
                                         const Eigen::MatrixXd& covariance, const BaselineOptions& options,
                                         int replicates, std::uint64_t seed);

void calibrate(MetaResult& result, std::vector<double> null_statistics);

/// Tab-separated per-instrument table.
void write_instrument_table(const std::vector<InstrumentFit>& fits, std::ostream& os);
void write_meta_result(const MetaResult& result, const std::vector<std::string>& effect_names, std::ostream& os);

}  // namespace mmvae
