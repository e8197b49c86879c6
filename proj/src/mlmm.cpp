#include "mmvae/mlmm.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/KroneckerProduct>

#include "mmvae/errors.hpp"

namespace mmvae {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

Eigen::VectorXd vec(const Eigen::MatrixXd& m) { return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size()); }

Eigen::MatrixXd unvec(const Eigen::VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
}

Eigen::MatrixXd kron_identity_left(Eigen::Index d, const Eigen::MatrixXd& A) {
  return Eigen::kroneckerProduct(Eigen::MatrixXd::Identity(d, d), A).eval();
}

double smallest_eigenvalue(const Eigen::MatrixXd& A) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A, Eigen::EigenvaluesOnly);
  return es.eigenvalues().size() ? es.eigenvalues()[0] : 0.0;
}

void check_shapes(const LmmData& data, Eigen::Index& p, Eigen::Index& q, Eigen::Index& d) {
  if (data.empty()) throw ValidationError("mixed model needs at least one patient");
  p = data.front().X.cols();
  q = data.front().T.cols();
  d = data.front().Z.cols();
  for (const auto& pt : data) {
    const auto m = pt.Z.rows();
    if (m < 1) throw ValidationError("patient without visits");
    if (pt.X.rows() != m || pt.T.rows() != m) throw ShapeError("design rows do not match response rows");
    if (pt.X.cols() != p || pt.T.cols() != q || pt.Z.cols() != d) throw ShapeError("inconsistent design widths");
    if (!pt.Z.allFinite()) throw ValidationError("non-finite latent response");
  }
}

VarianceComponents diagonal_components(const Eigen::VectorXd& log_phi, const Eigen::VectorXd& log_sigma) {
  VarianceComponents vc;
  vc.phi = log_phi.array().exp().matrix().asDiagonal();
  vc.sigma = log_sigma.array().exp().matrix().asDiagonal();
  return vc;
}

struct PatientTerms {
  Eigen::MatrixXd V;
  Eigen::MatrixXd Xt;  // I_d (x) X
  Eigen::MatrixXd VX;
  double log_det_V = 0.0;
};

PatientTerms patient_terms(const LmmPatient& pt, const VarianceComponents& vc, Eigen::Index d) {
  const auto mc = marginal_covariance(pt.T, vc.phi, vc.sigma);
  PatientTerms t;
  t.V = mc.precision;
  t.log_det_V = mc.log_det_precision;
  t.Xt = kron_identity_left(d, pt.X);
  t.VX = t.V * t.Xt;
  return t;
}

Eigen::LLT<Eigen::MatrixXd> factor_normal_matrix(const Eigen::MatrixXd& A) {
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success || (A.rows() > 0 && llt.rcond() < 1e-14))
    throw ConditioningError("fixed-effect normal matrix is singular (rank-deficient design)", smallest_eigenvalue(A));
  return llt;
}

}  // namespace

MixedModelParams MixedModelParams::unit(Eigen::Index p, Eigen::Index q, Eigen::Index d) {
  MixedModelParams m;
  m.B = Eigen::MatrixXd::Zero(p, d);
  m.log_phi = Eigen::VectorXd::Zero(q * d);
  m.log_sigma = Eigen::VectorXd::Zero(d);
  return m;
}

VarianceComponents MixedModelParams::components() const { return diagonal_components(log_phi, log_sigma); }

Eigen::VectorXd MixedModelParams::packed_log_variances() const {
  Eigen::VectorXd x(log_phi.size() + log_sigma.size());
  x << log_phi, log_sigma;
  return x;
}

std::string to_string(Criterion c) { return c == Criterion::ML ? "ML" : "REML"; }

Criterion criterion_from_string(const std::string& s) {
  if (s == "ML" || s == "ml") return Criterion::ML;
  if (s == "REML" || s == "reml") return Criterion::REML;
  throw ValidationError("unknown criterion '" + s + "' (expected ML or REML)");
}

MarginalCovariance marginal_covariance(const Eigen::MatrixXd& T, const Eigen::MatrixXd& phi, const Eigen::MatrixXd& sigma) {
  const Eigen::Index m = T.rows();
  const Eigen::Index q = T.cols();
  const Eigen::Index d = sigma.rows();
  if (sigma.cols() != d || phi.rows() != q * d || phi.cols() != q * d)
    throw ShapeError("variance component shapes do not match the random-effect design");
  MarginalCovariance out;
  const Eigen::MatrixXd Tt = kron_identity_left(d, T);
  out.cov = Tt * phi * Tt.transpose() + Eigen::kroneckerProduct(sigma, Eigen::MatrixXd::Identity(m, m)).eval();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(out.cov);
  if (llt.info() != Eigen::Success)
    throw ConditioningError("marginal covariance is not positive definite", smallest_eigenvalue(out.cov));
  out.precision = llt.solve(Eigen::MatrixXd::Identity(m * d, m * d));
  out.precision = 0.5 * (out.precision + out.precision.transpose());
  const Eigen::MatrixXd L = llt.matrixL();
  out.log_det_precision = -2.0 * L.diagonal().array().log().sum();
  return out;
}

double loglik_ml(const Eigen::MatrixXd& B, const VarianceComponents& vc, const LmmData& data) {
  Eigen::Index p, q, d;
  check_shapes(data, p, q, d);
  if (B.rows() != p || B.cols() != d) throw ShapeError("B must be p x d");
  double ll = 0.0;
  for (const auto& pt : data) {
    const auto mc = marginal_covariance(pt.T, vc.phi, vc.sigma);
    const Eigen::VectorXd r = vec(pt.Z - pt.X * B);
    ll += 0.5 * (mc.log_det_precision - r.dot(mc.precision * r) - static_cast<double>(pt.Z.size()) * kLog2Pi);
  }
  return ll;
}

Eigen::MatrixXd blue(const VarianceComponents& vc, const LmmData& data) {
  Eigen::Index p, q, d;
  check_shapes(data, p, q, d);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p * d, p * d);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p * d);
  for (const auto& pt : data) {
    const auto t = patient_terms(pt, vc, d);
    A += t.Xt.transpose() * t.VX;
    rhs += t.VX.transpose() * vec(pt.Z);
  }
  if (p == 0) return Eigen::MatrixXd::Zero(0, d);
  const auto llt = factor_normal_matrix(A);
  return unvec(llt.solve(rhs), p, d);
}

double loglik_ml_profiled(const VarianceComponents& vc, const LmmData& data) {
  return loglik_ml(blue(vc, data), vc, data);
}

double loglik_reml(const VarianceComponents& vc, const LmmData& data) {
  Eigen::Index p, q, d;
  check_shapes(data, p, q, d);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p * d, p * d);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p * d);
  std::vector<PatientTerms> terms;
  terms.reserve(data.size());
  double n = 0.0;
  for (const auto& pt : data) {
    terms.push_back(patient_terms(pt, vc, d));
    A += terms.back().Xt.transpose() * terms.back().VX;
    rhs += terms.back().VX.transpose() * vec(pt.Z);
    n += static_cast<double>(pt.Z.rows());
  }
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p * d);
  double log_det_A = 0.0;
  if (p > 0) {
    const auto llt = factor_normal_matrix(A);
    b = llt.solve(rhs);
    const Eigen::MatrixXd L = llt.matrixL();
    log_det_A = 2.0 * L.diagonal().array().log().sum();
  }
  double ll = -log_det_A - (n - static_cast<double>(p)) * static_cast<double>(d) * kLog2Pi;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Eigen::VectorXd r = vec(data[i].Z) - terms[i].Xt * b;
    ll += terms[i].log_det_V - r.dot(terms[i].V * r);
  }
  return 0.5 * ll;
}

std::vector<Eigen::MatrixXd> blup(const Eigen::MatrixXd& B, const VarianceComponents& vc, const LmmData& data) {
  Eigen::Index p, q, d;
  check_shapes(data, p, q, d);
  if (B.rows() != p || B.cols() != d) throw ShapeError("B must be p x d");
  std::vector<Eigen::MatrixXd> out;
  out.reserve(data.size());
  for (const auto& pt : data) {
    const auto mc = marginal_covariance(pt.T, vc.phi, vc.sigma);
    const Eigen::MatrixXd Tt = kron_identity_left(d, pt.T);
    const Eigen::VectorXd r = vec(pt.Z - pt.X * B);
    out.push_back(unvec(vc.phi * (Tt.transpose() * (mc.precision * r)), q, d));
  }
  return out;
}

namespace {

// Per-patient cross products; with diagonal Phi and Sigma every latent dimension is an
// independent univariate model, and V = (I - T P T') / s with P = H (sI + H T'T H)^-1 H.
struct PatientStats {
  Eigen::MatrixXd TT, TX, XX, TZ, XZ;
  Eigen::VectorXd ZZ;
  double m = 0.0;
};

std::vector<PatientStats> patient_stats(const LmmData& data) {
  std::vector<PatientStats> out;
  out.reserve(data.size());
  for (const auto& pt : data) {
    PatientStats st;
    st.TT = pt.T.transpose() * pt.T;
    st.TX = pt.T.transpose() * pt.X;
    st.XX = pt.X.transpose() * pt.X;
    st.TZ = pt.T.transpose() * pt.Z;
    st.XZ = pt.X.transpose() * pt.Z;
    st.ZZ = pt.Z.colwise().squaredNorm().transpose();
    st.m = static_cast<double>(pt.Z.rows());
    out.push_back(std::move(st));
  }
  return out;
}

CriterionValue criterion_from_stats(const std::vector<PatientStats>& stats, Eigen::Index p, Eigen::Index q,
                                    Eigen::Index d, const Eigen::VectorXd& log_phi, const Eigen::VectorXd& log_sigma,
                                    Criterion criterion, bool with_gradient) {
  const bool reml = criterion == Criterion::REML;
  CriterionValue out;
  out.B = Eigen::MatrixXd::Zero(p, d);
  out.gradient = Eigen::VectorXd::Zero(q * d + d);
  double n = 0.0;
  for (const auto& st : stats) n += st.m;
  double ll = (reml ? -(n - static_cast<double>(p)) : -n) * static_cast<double>(d) * kLog2Pi;
  const std::size_t np = stats.size();
  std::vector<Eigen::MatrixXd> P(np);
  std::vector<double> log_det_c(np);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double s = std::exp(log_sigma[j]);
    const Eigen::VectorXd h = log_phi.segment(j * q, q).array().exp().sqrt().matrix();
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
    for (std::size_t i = 0; i < np; ++i) {
      const auto& st = stats[i];
      Eigen::MatrixXd K = h.asDiagonal() * st.TT * h.asDiagonal();
      K.diagonal().array() += s;
      Eigen::LLT<Eigen::MatrixXd> llt(K);
      if (llt.info() != Eigen::Success) throw ConditioningError("marginal covariance is not positive definite", smallest_eigenvalue(K));
      const Eigen::MatrixXd L = llt.matrixL();
      log_det_c[i] = (st.m - static_cast<double>(q)) * std::log(s) + 2.0 * L.diagonal().array().log().sum();
      P[i] = h.asDiagonal() * llt.solve(Eigen::MatrixXd(h.asDiagonal()));
      if (p > 0) {
        A += (st.XX - st.TX.transpose() * P[i] * st.TX) / s;
        rhs += (st.XZ.col(j) - st.TX.transpose() * (P[i] * st.TZ.col(j))) / s;
      }
    }
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    Eigen::LLT<Eigen::MatrixXd> allt;
    if (p > 0) {
      allt = factor_normal_matrix(A);
      b = allt.solve(rhs);
      out.B.col(j) = b;
      if (reml) {
        const Eigen::MatrixXd L = allt.matrixL();
        ll -= 2.0 * L.diagonal().array().log().sum();
      }
    }
    for (std::size_t i = 0; i < np; ++i) {
      const auto& st = stats[i];
      const Eigen::VectorXd Ttr = st.TZ.col(j) - st.TX * b;
      const double rr = st.ZZ[j] - 2.0 * b.dot(st.XZ.col(j)) + b.dot(st.XX * b);
      const Eigen::VectorXd w = P[i] * Ttr;
      const double rVr = (rr - Ttr.dot(w)) / s;
      ll += -log_det_c[i] - rVr;
      if (!with_gradient) continue;
      const Eigen::VectorXd TVr = (Ttr - st.TT * w) / s;
      const Eigen::MatrixXd TVT = (st.TT - st.TT * P[i] * st.TT) / s;
      for (Eigen::Index r = 0; r < q; ++r) out.gradient[j * q + r] += 0.5 * (TVr[r] * TVr[r] - TVT(r, r));
      const double trV = (st.m - (P[i] * st.TT).trace()) / s;
      const double VrVr = (rr - 2.0 * Ttr.dot(w) + w.dot(st.TT * w)) / (s * s);
      out.gradient[q * d + j] += 0.5 * (VrVr - trV);
      if (reml && p > 0) {
        const Eigen::MatrixXd XVT = (st.TX.transpose() - st.TX.transpose() * P[i] * st.TT) / s;  // p x q
        const Eigen::MatrixXd AinvXVT = allt.solve(XVT);
        for (Eigen::Index r = 0; r < q; ++r) out.gradient[j * q + r] += 0.5 * XVT.col(r).dot(AinvXVT.col(r));
        const Eigen::MatrixXd W = P[i] * st.TX;  // q x p
        const Eigen::MatrixXd XTW = st.TX.transpose() * W;
        const Eigen::MatrixXd XVVX = (st.XX - XTW - XTW.transpose() + W.transpose() * st.TT * W) / (s * s);
        out.gradient[q * d + j] += 0.5 * allt.solve(XVVX).trace();
      }
    }
  }
  out.value = 0.5 * ll;
  if (with_gradient) {
    for (Eigen::Index k = 0; k < q * d; ++k) out.gradient[k] *= std::exp(log_phi[k]);
    for (Eigen::Index j = 0; j < d; ++j) out.gradient[q * d + j] *= std::exp(log_sigma[j]);
  }
  return out;
}

}  // namespace

CriterionValue evaluate_criterion(const LmmData& data, const Eigen::VectorXd& log_phi, const Eigen::VectorXd& log_sigma,
                                  Criterion criterion, bool with_gradient) {
  Eigen::Index p, q, d;
  check_shapes(data, p, q, d);
  if (log_phi.size() != q * d || log_sigma.size() != d) throw ShapeError("log-variance vector lengths do not match q*d and d");
  if (!log_phi.allFinite() || !log_sigma.allFinite()) throw ValidationError("log-variances must be finite");
  return criterion_from_stats(patient_stats(data), p, q, d, log_phi, log_sigma, criterion, with_gradient);
}

FitResult fit(const LmmData& data, const MixedModelParams& init, const FitOptions& options) {
  Eigen::Index p, q, d;
  check_shapes(data, p, q, d);
  if (init.log_phi.size() != q * d || init.log_sigma.size() != d)
    throw ShapeError("initial variance parameters do not match the design");
  if (!init.log_phi.allFinite() || !init.log_sigma.allFinite()) throw ValidationError("initial variances must be positive");
  Eigen::VectorXd x0 = init.packed_log_variances().cwiseMax(options.min_log_variance).cwiseMin(options.max_log_variance);
  const Eigen::Index nphi = q * d;
  const auto stats = patient_stats(data);
  auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) -> double {
    if ((x.array() < options.min_log_variance).any() || (x.array() > options.max_log_variance).any()) {
      g.setZero(x.size());
      return std::numeric_limits<double>::infinity();
    }
    try {
      const auto cv = criterion_from_stats(stats, p, q, d, x.head(nphi), x.tail(d), options.criterion, true);
      g = -cv.gradient;
      return -cv.value;
    } catch (const ConditioningError&) {
      g.setZero(x.size());
      return std::numeric_limits<double>::infinity();
    }
  };
  const auto res = lbfgs_minimize(objective, x0, Eigen::VectorXd::Constant(x0.size(), options.min_log_variance),
                                  Eigen::VectorXd::Constant(x0.size(), options.max_log_variance), options.lbfgs);
  FitResult out;
  out.criterion = options.criterion;
  out.params.log_phi = res.x.head(nphi);
  out.params.log_sigma = res.x.tail(d);
  // Recompute at the optimum so the reported value is exactly re-checkable; this also
  // surfaces conditioning problems of the final point as an exception.
  const auto cv = evaluate_criterion(data, out.params.log_phi, out.params.log_sigma, options.criterion, true);
  out.params.B = cv.B;
  out.loglik = cv.value;
  out.iterations = res.iterations;
  out.gradient_norm = res.gradient_norm;  // projected onto the variance box
  out.converged = res.converged;
  out.message = res.message;
  out.blups = blup(out.params.B, out.params.components(), data);
  return out;
}

Eigen::MatrixXd predict(const MixedModelParams& params, const Eigen::MatrixXd& U, const Eigen::MatrixXd& X,
                        const Eigen::MatrixXd& T) {
  if (X.cols() != params.B.rows() || T.cols() != U.rows() || U.cols() != params.B.cols() || X.rows() != T.rows())
    throw ShapeError("prediction design does not match fitted parameters");
  return X * params.B + T * U;
}

FrozenMixedModel::FrozenMixedModel(const std::vector<Eigen::MatrixXd>& X, const std::vector<Eigen::MatrixXd>& T,
                                   const VarianceComponents& vc)
    : phi_(vc.phi), sigma_(vc.sigma) {
  if (X.empty() || X.size() != T.size()) throw ShapeError("frozen model needs matching, non-empty design lists");
  p_ = X.front().cols();
  q_ = T.front().cols();
  d_ = vc.sigma.rows();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p_ * d_, p_ * d_);
  factors_.reserve(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    if (X[i].cols() != p_ || T[i].cols() != q_ || X[i].rows() != T[i].rows()) throw ShapeError("inconsistent designs");
    Factor f;
    f.m = X[i].rows();
    f.X = X[i];
    f.T = T[i];
    const auto mc = marginal_covariance(T[i], phi_, sigma_);
    f.V = mc.precision;
    f.log_det_V = mc.log_det_precision;
    f.VX = f.V * kron_identity_left(d_, X[i]);
    f.PhiTtV = phi_ * kron_identity_left(d_, T[i]).transpose() * f.V;
    A += kron_identity_left(d_, X[i]).transpose() * f.VX;
    factors_.push_back(std::move(f));
  }
  if (p_ > 0) normal_ = factor_normal_matrix(A);
}

Eigen::MatrixXd FrozenMixedModel::blue(const std::vector<Eigen::MatrixXd>& Z) const {
  if (Z.size() != factors_.size()) throw ShapeError("response count does not match frozen designs");
  if (p_ == 0) return Eigen::MatrixXd::Zero(0, d_);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p_ * d_);
  for (std::size_t i = 0; i < Z.size(); ++i) {
    if (Z[i].rows() != factors_[i].m || Z[i].cols() != d_) throw ShapeError("response shape mismatch");
    rhs += factors_[i].VX.transpose() * vec(Z[i]);
  }
  return unvec(normal_.solve(rhs), p_, d_);
}

Eigen::MatrixXd FrozenMixedModel::blup(std::size_t i, const Eigen::MatrixXd& Zi, const Eigen::MatrixXd& B) const {
  const auto& f = factors_.at(i);
  const Eigen::VectorXd r = vec(Zi - f.X * B);
  return unvec(f.PhiTtV * r, q_, d_);
}

FrozenMixedModel::Prediction FrozenMixedModel::predict(const std::vector<Eigen::MatrixXd>& Z) const {
  Prediction pr;
  pr.B = blue(Z);
  pr.U.reserve(Z.size());
  pr.Zhat.reserve(Z.size());
  for (std::size_t i = 0; i < Z.size(); ++i) {
    pr.U.push_back(blup(i, Z[i], pr.B));
    pr.Zhat.push_back(factors_[i].X * pr.B + factors_[i].T * pr.U.back());
  }
  return pr;
}

std::vector<Eigen::MatrixXd> FrozenMixedModel::predict_adjoint(const std::vector<Eigen::MatrixXd>& grad_zhat) const {
  if (grad_zhat.size() != factors_.size()) throw ShapeError("adjoint input count mismatch");
  std::vector<Eigen::MatrixXd> out(factors_.size());
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p_ * d_);
  for (std::size_t i = 0; i < factors_.size(); ++i) {
    const auto& f = factors_[i];
    // Zhat = X B + T U,  u = PhiTtV (z - X~ b)
    const Eigen::MatrixXd& G = grad_zhat[i];
    const Eigen::VectorXd gu = vec(f.T.transpose() * G);           // dL/du
    const Eigen::VectorXd gz = f.PhiTtV.transpose() * gu;           // direct path into z
    out[i] = unvec(gz, f.m, d_);
    if (p_ > 0) {
      // dL/db = X~' g - X~' PhiTtV' gu
      const Eigen::MatrixXd back = G - unvec(gz, f.m, d_);
      c += vec(f.X.transpose() * back);
    }
  }
  if (p_ > 0) {
    const Eigen::VectorXd w = normal_.solve(c);
    for (std::size_t i = 0; i < factors_.size(); ++i) out[i] += unvec(factors_[i].VX * w, factors_[i].m, d_);
  }
  return out;
}

double FrozenMixedModel::loglik_ml(const std::vector<Eigen::MatrixXd>& Z, const Eigen::MatrixXd& B) const {
  double ll = 0.0;
  for (std::size_t i = 0; i < factors_.size(); ++i) {
    const auto& f = factors_[i];
    const Eigen::VectorXd r = vec(Z[i] - f.X * B);
    ll += 0.5 * (f.log_det_V - r.dot(f.V * r) - static_cast<double>(f.m * d_) * kLog2Pi);
  }
  return ll;
}

std::vector<Eigen::MatrixXd> FrozenMixedModel::loglik_ml_grad(const std::vector<Eigen::MatrixXd>& Z,
                                                              const Eigen::MatrixXd& B) const {
  std::vector<Eigen::MatrixXd> out(factors_.size());
  for (std::size_t i = 0; i < factors_.size(); ++i) {
    const auto& f = factors_[i];
    const Eigen::VectorXd r = vec(Z[i] - f.X * B);
    out[i] = unvec(-(f.V * r), f.m, d_);
  }
  return out;
}

}  // namespace mmvae
