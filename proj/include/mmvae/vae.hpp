#pragma once

// Per-instrument variational autoencoder: thermometer-coded ordinal items in,
// diagonal Gaussian posterior, proportional-odds ordinal decoder out.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmvae/nn.hpp"
#include "mmvae/random.hpp"

namespace mmvae {

struct ItemSpec {
  int levels = 2;                    // ordinal categories 0..levels-1
  bool cannot_perform_flag = false;  // adds one indicator input and one Bernoulli decoder head
  bool official = true;              // counts toward the instrument sum score

  bool operator==(const ItemSpec&) const = default;
};

struct InstrumentSchema {
  std::string id;
  std::vector<ItemSpec> items;

  int item_count() const { return static_cast<int>(items.size()); }
  int flag_count() const;
  /// Sum over items of (levels - 1 + flag).
  int encoded_width() const;
  /// Sum over official items of (levels - 1).
  int max_sum_score() const;
  int cutpoint_count() const;
  /// Throws ValidationError unless every item has 2..6 levels.
  void validate() const;

  bool operator==(const InstrumentSchema&) const = default;
};

/// Raw item responses of one instrument administration. Level -1 marks a missing item.
struct ItemResponses {
  std::vector<int> levels;
  std::vector<char> cannot_perform;

  int missing_count() const;
};

struct EncodedObservation {
  std::string instrument;
  Eigen::VectorXd bits;            // zero-filled where items are missing
  std::vector<char> item_missing;
};

Eigen::VectorXd thermometer_encode(int level, int level_count);
int thermometer_decode(const Eigen::Ref<const Eigen::VectorXd>& bits);

EncodedObservation encode_items(const InstrumentSchema& schema, const ItemResponses& responses);
/// Inverse of encode_items (missing items come back as -1).
ItemResponses decode_items(const InstrumentSchema& schema, const EncodedObservation& obs);

struct VaeParams {
  nn::MlpParams encoder;        // n_l -> hidden... -> 2d (mean head, then pre-softplus scale head)
  nn::MlpParams decoder;        // d -> hidden... -> items + flags (locations, then flag logits)
  Eigen::VectorXd cutpoint_raw; // per item: base cutpoint followed by pre-softplus increments

  int latent_dim() const { return static_cast<int>(encoder.out_dim() / 2); }
  Eigen::Index parameter_count() const;
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);
  bool operator==(const VaeParams& other) const;
};

VaeParams init_vae(const InstrumentSchema& schema, int latent_dim, const std::vector<int>& hidden, Rng& rng);

struct VariationalPosterior {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;
};

inline constexpr double kScaleFloor = 1e-4;
inline constexpr double kLogProbFloor = -27.631021115928547;  // log(1e-12)

double softplus(double x);
double sigmoid(double x);
double log_sigmoid(double x);

VariationalPosterior encode(const InstrumentSchema& schema, const VaeParams& params, const EncodedObservation& obs);
Eigen::VectorXd reparameterize(const VariationalPosterior& post, const Eigen::VectorXd& noise);
double kl_std_normal(const VariationalPosterior& post);

struct ItemDistribution {
  double location = 0.0;
  Eigen::VectorXd cutpoints;  // strictly increasing, levels - 1 entries
  bool has_flag = false;
  double flag_logit = 0.0;

  Eigen::VectorXd probabilities() const;
  double log_probability(int level) const;
  /// E[level], treating a cannot-perform outcome as level 0.
  double expected_level() const;
};

struct OrdinalDecoderOutput {
  std::vector<ItemDistribution> items;
  double expected_sum_score(const InstrumentSchema& schema) const;
};

Eigen::VectorXd cutpoints_from_raw(const Eigen::Ref<const Eigen::VectorXd>& raw);
OrdinalDecoderOutput decode_ordinal(const InstrumentSchema& schema, const VaeParams& params, const Eigen::VectorXd& z);
/// Same as decode_ordinal but from precomputed decoder network outputs.
OrdinalDecoderOutput ordinal_from_outputs(const InstrumentSchema& schema, const Eigen::Ref<const Eigen::VectorXd>& outputs,
                                          const Eigen::VectorXd& cutpoint_raw);

struct ReconDiagnostics {
  int clamped = 0;  // item terms whose probability fell below 1e-12
};

double recon_loglik(const InstrumentSchema& schema, const OrdinalDecoderOutput& out, const EncodedObservation& obs,
                    ReconDiagnostics* diagnostics = nullptr);

/// Batched reconstruction log-likelihood with gradients w.r.t. decoder outputs and raw cutpoints.
struct ReconBatch {
  double loglik = 0.0;
  Eigen::MatrixXd grad_outputs;      // same shape as decoder outputs
  Eigen::VectorXd grad_cutpoint_raw;
  int clamped = 0;
};

ReconBatch recon_loglik_batch(const InstrumentSchema& schema, const Eigen::MatrixXd& decoder_outputs,
                              const Eigen::VectorXd& cutpoint_raw, const std::vector<ItemResponses>& responses);

/// Draws item levels (and cannot-perform flags) from the decoder distribution.
ItemResponses sample_items(const InstrumentSchema& schema, const OrdinalDecoderOutput& out, Rng& rng);

}  // namespace mmvae
