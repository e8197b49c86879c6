#pragma once

// Fixed- and random-effect design matrices for the latent mixed model, including
// the piecewise time-since-switch terms and their counterfactual (no-switch) variant.

#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmvae/dataset.hpp"

namespace mmvae {

struct ModelSpec {
  std::vector<std::string> covariates;  // static or visit covariate names
  std::vector<std::string> treatments;  // switch targets with their own post-switch slope
  bool include_switch = true;
  bool include_age = true;
  bool age_interactions = true;  // every fixed effect except age itself gets a x age term
  bool intercept = false;        // latent responses are centred, so off by default
  bool random_intercept = true;
  bool random_pre_switch = true;   // min(0, dt)
  bool random_post_switch = true;  // max(0, dt)
  int fixed_knockoffs = 0;
  int random_knockoffs = 0;

  /// Copy of this spec with one named block removed.
  ModelSpec without_block(const std::string& block) const;
  /// Number of fixed-effect columns belonging to `block`.
  int block_columns(const std::string& block) const;
  bool is_random_block(const std::string& block) const;
  /// Fills `treatments` with the sorted switch targets present in `data` when empty.
  ModelSpec resolved(const Dataset& data) const;

  bool operator==(const ModelSpec&) const = default;
};

struct Standardization {
  std::map<std::string, std::pair<double, double>> stats;  // name -> (mean, sd); "age" included

  double apply(const std::string& name, double value) const;
  bool operator==(const Standardization&) const = default;
};

/// z-score statistics over every visit row of the cohort.
Standardization compute_standardization(const Dataset& data);

struct DesignPair {
  Eigen::MatrixXd X;  // m x p
  Eigen::MatrixXd T;  // m x q
  Eigen::VectorXd times;
  Eigen::VectorXd delta_t;  // time minus switch time (+-inf free: zero rows when no switch)
  double t_switch = 0.0;
  std::vector<std::string> fixed_names;
  std::vector<std::string> fixed_blocks;
  std::vector<std::string> random_names;
};

/// Knockoff columns supplied per patient (rows = visits).
struct KnockoffColumns {
  Eigen::MatrixXd fixed;
  Eigen::MatrixXd random;
};

DesignPair build_design(const PatientRecord& patient, const Dataset& data, const ModelSpec& spec,
                        const Standardization& standardization, const KnockoffColumns* knockoffs = nullptr);

struct CounterfactualDesign {
  DesignPair factual;
  DesignPair counterfactual;
  int horizon_row = -1;  // row evaluated at t_switch + horizon
};

/// Designs over the observed visits plus t_switch + horizon. The counterfactual zeroes every
/// post-switch column and extends the pre-switch slope linearly past the switch.
CounterfactualDesign counterfactual_design(const PatientRecord& patient, const Dataset& data, const ModelSpec& spec,
                                           const Standardization& standardization, double horizon,
                                           const KnockoffColumns* knockoffs = nullptr);

/// Counterfactual rows at the observed visits only (no horizon row).
DesignPair counterfactual_at_visits(const PatientRecord& patient, const Dataset& data, const ModelSpec& spec,
                                    const Standardization& standardization, const KnockoffColumns* knockoffs = nullptr);

}  // namespace mmvae
