#pragma once

// End-to-end steps shared by the command-line tool and the Python module. Every step takes
// the run configuration and draws all randomness from its seeds.

#include <iosfwd>
#include <string>
#include <vector>

#include "mmvae/baseline.hpp"
#include "mmvae/config.hpp"
#include "mmvae/effects.hpp"
#include "mmvae/inference.hpp"
#include "mmvae/trainer.hpp"

namespace mmvae {

TrainingProblem training_problem(const Dataset& data, const RunConfig& config);
TrainedModel train_model(const Dataset& data, const RunConfig& config);

/// Knockoff bootstrap null for the configured block, then the likelihood-ratio test of `model`.
LrTestResult run_lr_test(const TrainedModel& model, const Dataset& data, const RunConfig& config);

struct EffectRun {
  EffectReport report;
  std::vector<std::vector<PatientEffect>> per_seed;
};
/// The given model is seed 0; further seeds retrain with derived seeds before averaging.
EffectRun run_effects(const TrainedModel& model, const Dataset& data, const RunConfig& config);

struct MetaRun {
  std::vector<InstrumentFit> fits;
  BootstrapCovariance covariance;
  MetaResult result;
  std::vector<std::string> effect_names;
  bool pooled = false;  // false when fewer than two instruments could be fit
  std::string note;
};
MetaRun run_meta(const Dataset& data, const RunConfig& config);

// Delimited tables.
void write_loss_trace(const TrainedModel& model, std::ostream& os);
void write_lr_test(const LrTestResult& result, std::ostream& os);
void write_null_lambdas(const BootstrapNull& null, std::ostream& os);
std::vector<double> read_null_lambdas(std::istream& is);
/// ECDF of the null statistics next to the chi-squared reference, with the observed value.
void write_lambda_ecdf(const std::vector<double>& null_lambdas, int rd, double lambda_obs, std::ostream& os);
/// Decoded factual and counterfactual expected sum scores on a post-switch grid, plus observed totals.
void write_trajectories(const TrainedModel& model, const TrainingProblem& problem, double max_horizon, double step,
                        std::ostream& os);
void write_patient_effects(const EffectRun& run, const Dataset& data, std::ostream& os);

}  // namespace mmvae
