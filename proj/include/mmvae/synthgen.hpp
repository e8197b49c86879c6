#pragma once

// Synthetic multi-instrument registry with known latent ground truth.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmvae/dataset.hpp"
#include "mmvae/random.hpp"
#include "mmvae/trainer.hpp"

namespace mmvae {

struct InstrumentTemplate {
  InstrumentSchema schema;
  double age_min = 0.0;  // eligibility window in years of age
  double age_max = 1e9;
  double probability = 0.5;  // chance of administration at an eligible visit
  double difficulty = 0.0;   // latent location where the instrument is most informative
  double discrimination = 2.0;
};

struct GeneratorConfig {
  int patients = 522;
  std::uint64_t seed = 1;
  std::vector<InstrumentTemplate> instruments;  // empty -> five registry-like instruments
  int true_latent_dim = 2;
  std::vector<std::string> treatments{"B", "C"};
  std::vector<double> treatment_strength{1.0, 0.6};  // multiplies the switch slope per treatment
  std::vector<double> switch_slope{0.3, 0.1};        // latent slope change after the switch, per dimension
  std::vector<double> age_slope{0.05, -0.02};        // latent change per year of age
  double random_intercept_sd = 0.8;
  double random_pre_slope_sd = 0.1;
  double random_post_slope_sd = 0.1;
  double residual_sd = 0.3;
  double covariate_effect_sd = 0.15;
  double baseline_age_median = 3.5;
  double baseline_age_log_sd = 1.0;
  double followup_min = 3.0;
  double followup_max = 8.5;
  double gap_offset = 0.2;  // inter-visit gap = offset + Gamma(shape, scale)
  double gap_shape = 2.0;
  double gap_scale = 0.08;
  double missing_item_rate = 0.03;
  bool covariates = true;  // emit the registry-like covariate set

  void validate() const;
};

/// Five instruments with the item structure of the registry's motor scales.
std::vector<InstrumentTemplate> registry_instruments();
/// Small instruments for desk-scale runs (all ages eligible).
std::vector<InstrumentTemplate> compact_instruments(int count, int items, int levels, double probability);

struct PatientTruth {
  std::string id;
  Eigen::MatrixXd latent;          // visits x true dimension, noise-free mean trajectory plus residual
  Eigen::MatrixXd latent_mean;     // without residual noise
  Eigen::MatrixXd random_effects;  // 3 x true dimension (intercept, pre slope, post slope)
  std::vector<Eigen::VectorXd> expected_sum_scores;  // per visit, per instrument (all instruments)
};

struct ItemParameters {
  Eigen::MatrixXd loadings;  // items x true dimension, non-negative
  std::vector<Eigen::VectorXd> cutpoints;
};

struct GroundTruth {
  GeneratorConfig config;
  std::vector<ItemParameters> items;  // per instrument
  Eigen::MatrixXd covariate_effects;  // covariates x true dimension
  std::vector<PatientTruth> patients;
};

struct Registry {
  Dataset data;
  GroundTruth truth;
};

/// Draws a cohort that passes the default cohort filters with zero exclusions.
Registry generate_registry(const GeneratorConfig& config);

/// Regenerates item responses from a trained model without the switch terms. Visit times,
/// instruments, missing-item masks, covariates and switch records are preserved.
Dataset generate_null_from_model(const TrainedModel& model, const TrainingProblem& problem, Rng& rng);

}  // namespace mmvae
