#pragma once

// Multivariate linear mixed model  Z_i = X_i B + T_i U_i + E_i  with
// vec(U_i) ~ N(0, Phi) and vec(E_i) ~ N(0, Sigma (x) I_m).
// vec() stacks columns, so latent dimension j occupies rows j*m .. j*m+m-1.

#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "mmvae/lbfgs.hpp"

namespace mmvae {

struct LmmPatient {
  Eigen::MatrixXd X;  // m x p
  Eigen::MatrixXd T;  // m x q
  Eigen::MatrixXd Z;  // m x d
};
using LmmData = std::vector<LmmPatient>;

/// Dense variance components; the estimation code keeps both diagonal.
struct VarianceComponents {
  Eigen::MatrixXd phi;    // qd x qd
  Eigen::MatrixXd sigma;  // d x d
};

struct MixedModelParams {
  Eigen::MatrixXd B;          // p x d
  Eigen::VectorXd log_phi;    // qd, index j*q + r
  Eigen::VectorXd log_sigma;  // d

  static MixedModelParams unit(Eigen::Index p, Eigen::Index q, Eigen::Index d);
  Eigen::Index latent_dim() const { return log_sigma.size(); }
  VarianceComponents components() const;
  Eigen::VectorXd packed_log_variances() const;
  bool operator==(const MixedModelParams& o) const {
    return B.rows() == o.B.rows() && B.cols() == o.B.cols() && B == o.B && log_phi == o.log_phi &&
           log_sigma == o.log_sigma;
  }
};

enum class Criterion { ML, REML };
std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& s);

struct MarginalCovariance {
  Eigen::MatrixXd cov;        // (I_d (x) T) Phi (I_d (x) T)' + Sigma (x) I_m
  Eigen::MatrixXd precision;  // V = cov^-1
  double log_det_precision = 0.0;
};

/// Throws ConditioningError when the covariance is not positive definite.
MarginalCovariance marginal_covariance(const Eigen::MatrixXd& T, const Eigen::MatrixXd& phi, const Eigen::MatrixXd& sigma);

double loglik_ml(const Eigen::MatrixXd& B, const VarianceComponents& vc, const LmmData& data);
/// ML log-likelihood with B replaced by its GLS estimate.
double loglik_ml_profiled(const VarianceComponents& vc, const LmmData& data);
double loglik_reml(const VarianceComponents& vc, const LmmData& data);
Eigen::MatrixXd blue(const VarianceComponents& vc, const LmmData& data);
std::vector<Eigen::MatrixXd> blup(const Eigen::MatrixXd& B, const VarianceComponents& vc, const LmmData& data);

/// Profiled criterion and its gradient w.r.t. (log_phi, log_sigma).
struct CriterionValue {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd B;
};
CriterionValue evaluate_criterion(const LmmData& data, const Eigen::VectorXd& log_phi, const Eigen::VectorXd& log_sigma,
                                  Criterion criterion, bool with_gradient = true);

struct FitOptions {
  Criterion criterion = Criterion::ML;
  LbfgsOptions lbfgs;
  double min_log_variance = -25.0;  // log-variance floor; the search never leaves [min, max]
  double max_log_variance = 12.0;
};

struct FitResult {
  MixedModelParams params;
  std::vector<Eigen::MatrixXd> blups;  // q x d per patient
  double loglik = 0.0;                 // criterion value at params
  Criterion criterion = Criterion::ML;
  int iterations = 0;
  double gradient_norm = 0.0;
  bool converged = false;
  std::string message;
};

/// Maximizes ML or REML over the log-diagonals of Phi and Sigma with B profiled out.
/// Non-convergence is reported in the result; conditioning failures throw.
FitResult fit(const LmmData& data, const MixedModelParams& init, const FitOptions& options = {});

Eigen::MatrixXd predict(const MixedModelParams& params, const Eigen::MatrixXd& U, const Eigen::MatrixXd& X,
                        const Eigen::MatrixXd& T);

/// Mixed model with frozen variance components over fixed designs. Factorizations are cached so
/// BLUE/BLUP and their adjoints are cheap linear maps of the responses.
class FrozenMixedModel {
 public:
  FrozenMixedModel(const std::vector<Eigen::MatrixXd>& X, const std::vector<Eigen::MatrixXd>& T,
                   const VarianceComponents& vc);

  std::size_t patients() const { return factors_.size(); }
  Eigen::Index latent_dim() const { return d_; }

  Eigen::MatrixXd blue(const std::vector<Eigen::MatrixXd>& Z) const;
  Eigen::MatrixXd blup(std::size_t i, const Eigen::MatrixXd& Zi, const Eigen::MatrixXd& B) const;

  struct Prediction {
    Eigen::MatrixXd B;
    std::vector<Eigen::MatrixXd> U;
    std::vector<Eigen::MatrixXd> Zhat;
  };
  Prediction predict(const std::vector<Eigen::MatrixXd>& Z) const;

  /// Given dL/dZhat for every patient, returns dL/dZ through BLUE and BLUP.
  std::vector<Eigen::MatrixXd> predict_adjoint(const std::vector<Eigen::MatrixXd>& grad_zhat) const;

  double loglik_ml(const std::vector<Eigen::MatrixXd>& Z, const Eigen::MatrixXd& B) const;
  /// d L_ML / d Z_i at fixed B (= -V_i r_i reshaped). At B = BLUE this is also the total derivative.
  std::vector<Eigen::MatrixXd> loglik_ml_grad(const std::vector<Eigen::MatrixXd>& Z, const Eigen::MatrixXd& B) const;

 private:
  struct Factor {
    Eigen::Index m = 0;
    Eigen::MatrixXd X, T;
    Eigen::MatrixXd V;        // precision
    Eigen::MatrixXd VX;       // V (I_d (x) X)
    Eigen::MatrixXd PhiTtV;   // Phi (I_d (x) T)' V
    double log_det_V = 0.0;
  };
  Eigen::Index p_ = 0, q_ = 0, d_ = 0;
  Eigen::MatrixXd phi_, sigma_;
  std::vector<Factor> factors_;
  Eigen::LLT<Eigen::MatrixXd> normal_;  // sum_i X~' V X~
};

}  // namespace mmvae
