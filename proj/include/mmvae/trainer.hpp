#pragma once

// Joint training of the per-instrument VAEs and the latent mixed model.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmvae/dataset.hpp"
#include "mmvae/design.hpp"
#include "mmvae/mlmm.hpp"
#include "mmvae/nn.hpp"
#include "mmvae/random.hpp"
#include "mmvae/vae.hpp"

namespace mmvae {

enum class Normalizer { Literal, PerVisit };
std::string to_string(Normalizer n);
Normalizer normalizer_from_string(const std::string& s);

struct TrainConfig {
  int latent_dim = 3;
  double beta = 0.5;   // KL weight
  double gamma = 5.0;  // squared prediction-gap weight
  double eta = 5.0;    // mixed-model likelihood weight
  int epochs = 20;
  int vae_updates_per_epoch = 100;
  int mc_samples = 1;
  std::uint64_t seed = 1;
  std::vector<int> hidden{250, 100};  // encoder widths; the decoder mirrors them
  double learning_rate = 1e-3;
  Normalizer normalizer = Normalizer::Literal;
  Criterion refit_criterion = Criterion::ML;
  LbfgsOptions lbfgs;
  void validate() const;
  bool operator==(const TrainConfig& o) const;
};

/// Observations of one instrument across the cohort, in patient/visit order.
struct InstrumentBatch {
  int instrument = 0;
  Eigen::MatrixXd inputs;  // encoded width x observations
  std::vector<ItemResponses> responses;
  std::vector<int> patient;
  std::vector<int> visit;
};

/// Everything the trainer needs that does not change during training.
struct TrainingProblem {
  Dataset data;
  ModelSpec spec;
  Standardization standardization;
  std::vector<KnockoffColumns> knockoffs;  // empty, or one per patient
  std::vector<DesignPair> designs;
  std::vector<InstrumentBatch> batches;
  std::vector<std::vector<int>> availability;  // instruments observed per patient visit
  double norm1 = 0.0;
  double norm2 = 0.0;
  Eigen::Index fixed_columns() const { return designs.front().X.cols(); }
  Eigen::Index random_columns() const { return designs.front().T.cols(); }
};

TrainingProblem make_problem(const Dataset& data, const ModelSpec& spec, const Standardization& standardization,
                             Normalizer normalizer, const std::vector<KnockoffColumns>* knockoffs = nullptr);
TrainingProblem make_problem(const Dataset& data, const ModelSpec& spec, Normalizer normalizer,
                             const std::vector<KnockoffColumns>* knockoffs = nullptr);

struct LossComponents {
  double recon = 0.0;       // summed reconstruction log-likelihood
  double kl = 0.0;          // summed KL divergence
  double gamma_term = 0.0;  // sum of squared gaps between prediction and latent
  double eta_term = 0.0;    // mixed-model ML log-likelihood
  double total = 0.0;       // normalized, weighted objective
};

struct EpochTrace {
  int epoch = 0;
  LossComponents loss;
  double mixed_loglik = 0.0;
  int fit_iterations = 0;
  bool fit_converged = false;
  bool fit_failed = false;
  bool saturated = false;  // relative decrease below 1% versus the previous epoch
};

struct TrainedModel {
  TrainConfig config;
  ModelSpec spec;
  Standardization standardization;
  std::vector<VaeParams> vaes;          // one per dataset instrument
  std::vector<nn::AdamState> optimizers;
  MixedModelParams mixed;
  std::vector<Eigen::MatrixXd> blups;   // per patient, q x d
  std::vector<Eigen::MatrixXd> latents; // per patient, m x d, the draw used by the last refit
  std::vector<EpochTrace> trace;
  std::vector<std::string> warnings;
  std::string rng_state;
  int epochs_done = 0;
  bool operator==(const TrainedModel& o) const;
};

TrainedModel init_model(const TrainingProblem& problem, const TrainConfig& config);

/// Mean of the instrument draws available at one visit.
Eigen::VectorXd average_latents(const std::vector<Eigen::VectorXd>& draws);
/// Joint latent trajectories from per-batch draws (d x observations each).
std::vector<Eigen::MatrixXd> average_latents(const TrainingProblem& problem, const std::vector<Eigen::MatrixXd>& draws,
                                             int latent_dim);

struct LossEvaluation {
  LossComponents components;
  std::vector<Eigen::VectorXd> gradients;  // per dataset instrument, VaeParams::flatten layout
  int clamped = 0;
};

/// Standard-normal noise for every batch, one set per Monte Carlo sample.
using LossNoise = std::vector<std::vector<Eigen::MatrixXd>>;
LossNoise draw_noise(const TrainingProblem& problem, int latent_dim, int samples, Rng& rng);

/// Objective with the mixed-model variance components frozen; deterministic given the noise.
LossEvaluation mmvae_loss(const TrainedModel& model, const TrainingProblem& problem, const FrozenMixedModel& frozen,
                          const LossNoise& noise, bool with_gradient);
LossEvaluation mmvae_loss(const TrainedModel& model, const TrainingProblem& problem, Rng& rng, bool with_gradient = false);

FrozenMixedModel freeze(const TrainedModel& model, const TrainingProblem& problem);

struct LatentDraw {
  std::vector<Eigen::MatrixXd> per_batch;  // d x observations
  std::vector<Eigen::MatrixXd> joint;      // per patient, m x d
};
/// One reparameterized draw per observation (or posterior means), averaged per visit.
LatentDraw sample_latents(const TrainedModel& model, const TrainingProblem& problem, Rng* rng);

LmmData lmm_data(const TrainingProblem& problem, const std::vector<Eigen::MatrixXd>& latents);

void train_epoch(TrainedModel& model, const TrainingProblem& problem);
TrainedModel fit_joint(const TrainingProblem& problem, const TrainConfig& config);
TrainedModel fit_joint(const Dataset& data, const TrainConfig& config, const ModelSpec& spec,
                       const std::vector<KnockoffColumns>* knockoffs = nullptr);

}  // namespace mmvae
