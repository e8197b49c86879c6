#pragma once

// Item-level treatment-switch effects decoded from factual and counterfactual latent
// predictions, their aggregation over patients and seeds, and artificial-switch injection.

#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmvae/dataset.hpp"
#include "mmvae/random.hpp"
#include "mmvae/trainer.hpp"

namespace mmvae {

struct LatentPrediction {
  double time = 0.0;  // years since the first visit
  Eigen::VectorXd factual;
  Eigen::VectorXd counterfactual;
};

/// Mixed-model latent predictions at t_switch + horizon, using the factual fit's B and BLUPs.
LatentPrediction latent_prediction(const TrainedModel& model, const TrainingProblem& problem, std::size_t patient,
                                   double horizon);

struct InstrumentEffect {
  Eigen::VectorXd item_difference;  // factual minus counterfactual expected level, every item
  double sum_difference = 0.0;      // over official items
  double factual_sum = 0.0;
  double counterfactual_sum = 0.0;
};

struct PatientEffect {
  std::size_t patient = 0;
  std::vector<InstrumentEffect> instruments;  // one per dataset instrument
};

PatientEffect switch_effect(const TrainedModel& model, const TrainingProblem& problem, std::size_t patient,
                            double horizon);

struct EffectOptions {
  double horizon = 1.0;
  bool observed_only = false;  // restrict to patients followed up to t_switch + horizon
};

/// Effects for every switched patient (or the observed subset).
std::vector<PatientEffect> switch_effects(const TrainedModel& model, const TrainingProblem& problem,
                                          const EffectOptions& options);

struct InstrumentEffectSummary {
  std::string instrument;
  int max_score = 0;
  double mean = 0.0;     // mean over seeds of the patient-mean sum difference
  double sd = 0.0;       // across seeds
  double percent = 0.0;  // 100 * mean / max_score
  Eigen::VectorXd item_mean;
  std::vector<double> seed_means;
  bool sign_stable = true;  // every seed mean has the sign of the overall mean
  std::size_t patients = 0;
};

struct EffectReport {
  double horizon = 1.0;
  std::size_t seeds = 0;
  std::vector<InstrumentEffectSummary> instruments;
};

EffectReport aggregate_effects(const std::vector<std::vector<PatientEffect>>& per_seed,
                               const std::vector<InstrumentSchema>& instruments, double horizon);

/// Tab-separated: instrument, max score, mean, sd, percent, patients, seeds, sign_stable.
void write_effect_table(const EffectReport& report, std::ostream& os);
/// Tab-separated per-item means: instrument, item, mean difference.
void write_item_effect_table(const EffectReport& report, std::ostream& os);

struct InjectionOptions {
  double rate = 1.0;    // points per period
  double period = 0.5;  // years
};

struct InjectionReport {
  int points_added = 0;
  int points_reallocated = 0;
  int points_dropped = 0;
  int observations_changed = 0;
};

/// Adds cumulative sum-score points to post-switch observations on randomly chosen official items
/// below their top level; points on items already at the top are moved to another eligible item.
Dataset inject_artificial_switch(const Dataset& data, const InjectionOptions& options, Rng& rng,
                                 InjectionReport* report = nullptr);

}  // namespace mmvae
