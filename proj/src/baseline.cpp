#include "mmvae/baseline.hpp"

#include <cmath>
#include <ostream>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "mmvae/errors.hpp"
#include "mmvae/inference.hpp"
#include "mmvae/parallel.hpp"
#include "mmvae/random.hpp"

namespace mmvae {

namespace {

double official_total(const InstrumentSchema& schema, const ItemResponses& r) {
  double total = 0.0;
  for (std::size_t k = 0; k < schema.items.size(); ++k)
    if (schema.items[k].official && r.levels[k] > 0 && !r.cannot_perform[k]) total += r.levels[k];
  return total;
}

// Visits where the instrument was administered, with only that instrument's observation kept.
// Returns false when the patient does not meet the visit requirements on this instrument.
bool restrict_patient(const PatientRecord& p, int instrument, const BaselineOptions& o, PatientRecord& out) {
  if (!p.has_switch()) return false;
  out = p;
  out.visits.clear();
  int pre = 0, post = 0;
  for (const auto& v : p.visits)
    for (const auto& ob : v.observations)
      if (ob.instrument == instrument) {
        Visit kept = v;
        kept.observations = {ob};
        out.visits.push_back(std::move(kept));
        (v.time < p.switch_time() ? pre : post)++;
        break;
      }
  return static_cast<int>(out.visits.size()) >= o.min_visits && pre >= o.min_pre_switch_visits &&
         post >= o.min_post_switch_visits;
}

struct Prepared {
  Dataset sub;
  std::vector<std::size_t> patients;
  LmmData lmm;
  std::vector<std::string> fixed_names;
  std::vector<std::string> fixed_blocks;
};

Prepared prepare(const Dataset& data, const std::vector<std::size_t>& rows, int instrument, const BaselineOptions& o,
                 const ModelSpec& spec, Standardization* standardization, bool recompute_standardization) {
  Prepared pr;
  pr.sub.instruments = data.instruments;
  pr.sub.static_covariates = data.static_covariates;
  pr.sub.visit_covariates = data.visit_covariates;
  for (std::size_t i : rows) {
    PatientRecord r;
    if (!restrict_patient(data.patients[i], instrument, o, r)) continue;
    pr.sub.patients.push_back(std::move(r));
    pr.patients.push_back(i);
  }
  if (pr.patients.empty()) return pr;
  if (recompute_standardization) *standardization = compute_standardization(pr.sub);
  const auto& schema = data.instruments[static_cast<std::size_t>(instrument)];
  for (const auto& p : pr.sub.patients) {
    const auto des = build_design(p, pr.sub, spec, *standardization);
    LmmPatient lp{des.X, des.T, Eigen::MatrixXd(des.X.rows(), 1)};
    for (std::size_t v = 0; v < p.visits.size(); ++v)
      lp.Z(static_cast<Eigen::Index>(v), 0) = official_total(schema, p.visits[v].observations.front().responses);
    pr.lmm.push_back(std::move(lp));
    if (pr.fixed_names.empty()) {
      pr.fixed_names = des.fixed_names;
      pr.fixed_blocks = des.fixed_blocks;
    }
  }
  return pr;
}

MixedModelParams initial_params(const LmmData& lmm) {
  const Eigen::Index p = lmm.front().X.cols(), q = lmm.front().T.cols();
  double s = 0.0, ss = 0.0, n = 0.0;
  for (const auto& pt : lmm) {
    s += pt.Z.sum();
    ss += pt.Z.squaredNorm();
    n += static_cast<double>(pt.Z.rows());
  }
  const double var = std::max(ss / n - (s / n) * (s / n), 1e-4);
  auto init = MixedModelParams::unit(p, q, 1);
  init.log_sigma.setConstant(std::log(var / 2));
  init.log_phi.setConstant(std::log(var / 2));
  return init;
}

std::vector<Eigen::Index> block_indices(const std::vector<std::string>& blocks, const std::string& block) {
  std::vector<Eigen::Index> idx;
  for (std::size_t c = 0; c < blocks.size(); ++c)
    if (blocks[c] == block) idx.push_back(static_cast<Eigen::Index>(c));
  return idx;
}

Eigen::MatrixXd coefficient_covariance(const LmmData& lmm, const MixedModelParams& params) {
  const auto vc = params.components();
  const Eigen::Index p = lmm.front().X.cols();
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(p, p);
  for (const auto& pt : lmm) {
    const auto mc = marginal_covariance(pt.T, vc.phi, vc.sigma);
    S += pt.X.transpose() * mc.precision * pt.X;
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0))
    throw ConditioningError("sum-score design is rank deficient", ldlt.vectorD().minCoeff());
  return ldlt.solve(Eigen::MatrixXd::Identity(p, p));
}

// Fits a prepared problem into `out`, filling status, effect and covariance.
void fit_prepared(const Prepared& pr, const BaselineOptions& o, const MixedModelParams* init, InstrumentFit& out) {
  out.eligible_patients = static_cast<int>(pr.patients.size());
  out.patients = pr.patients;
  out.fixed_names = pr.fixed_names;
  if (out.eligible_patients < o.min_patients) {
    out.status = FitStatus::Skipped;
    out.reason = std::to_string(out.eligible_patients) + " eligible patients, below the floor of " +
                 std::to_string(o.min_patients);
    return;
  }
  try {
    out.fit = fit(pr.lmm, init ? *init : initial_params(pr.lmm), o.fit);
    const auto idx = block_indices(pr.fixed_blocks, "switch");
    const auto cov = coefficient_covariance(pr.lmm, out.fit.params);
    out.effect_names.clear();
    out.effect.resize(static_cast<Eigen::Index>(idx.size()));
    out.effect_covariance.resize(out.effect.size(), out.effect.size());
    for (std::size_t a = 0; a < idx.size(); ++a) {
      out.effect_names.push_back(pr.fixed_names[static_cast<std::size_t>(idx[a])]);
      out.effect[static_cast<Eigen::Index>(a)] = out.fit.params.B(idx[a], 0);
      for (std::size_t b = 0; b < idx.size(); ++b)
        out.effect_covariance(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = cov(idx[a], idx[b]);
    }
    out.status = out.fit.converged ? FitStatus::Fitted : FitStatus::NotConverged;
    out.reason = out.fit.converged ? "" : out.fit.message;
  } catch (const Error& e) {
    out.status = FitStatus::Failed;
    out.reason = e.what();
  }
}

std::vector<std::size_t> all_rows(const Dataset& data) {
  std::vector<std::size_t> rows(data.patients.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return rows;
}

// Refit of an existing instrument fit on other patient rows or responses, reusing its spec and scaling.
InstrumentFit refit(const InstrumentFit& base, const Prepared& pr, const BaselineOptions& o) {
  InstrumentFit out;
  out.instrument = base.instrument;
  out.index = base.index;
  out.spec = base.spec;
  out.standardization = base.standardization;
  fit_prepared(pr, o, &base.fit.params, out);
  return out;
}

std::vector<const InstrumentFit*> usable_fits(const std::vector<InstrumentFit>& fits) {
  std::vector<const InstrumentFit*> used;
  for (const auto& f : fits)
    if (f.usable()) used.push_back(&f);
  if (used.size() < 2) throw ValidationError("meta-analysis needs at least two fitted instruments");
  for (const auto* f : used)
    if (f->effect.size() != used.front()->effect.size() || f->effect.size() == 0)
      throw ShapeError("instrument fits have different switch-effect layouts");
  return used;
}

Eigen::LLT<Eigen::MatrixXd> factor_with_ridge(const Eigen::MatrixXd& C, double& ridge) {
  ridge = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(C);
  if (llt.info() == Eigen::Success) return llt;
  ridge = 1e-8;
  llt.compute(C + ridge * Eigen::MatrixXd::Identity(C.rows(), C.cols()));
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C, Eigen::EigenvaluesOnly);
    throw ConditioningError("meta-analysis covariance is singular", es.eigenvalues().minCoeff());
  }
  return llt;
}

}  // namespace

std::string to_string(FitStatus s) {
  switch (s) {
    case FitStatus::Fitted: return "fitted";
    case FitStatus::NotConverged: return "not_converged";
    case FitStatus::Skipped: return "skipped";
    case FitStatus::Failed: return "failed";
  }
  return "unknown";
}

void BaselineOptions::validate() const {
  if (min_patients < 1) throw ValidationError("eligibility floor must be at least 1");
  if (min_visits < 1 || min_pre_switch_visits < 0 || min_post_switch_visits < 0)
    throw ValidationError("visit requirements must be non-negative");
}

std::vector<SumScore> sum_scores(const Dataset& data, int instrument) {
  if (instrument < 0 || static_cast<std::size_t>(instrument) >= data.instruments.size())
    throw ValidationError("instrument index out of range");
  const auto& schema = data.instruments[static_cast<std::size_t>(instrument)];
  std::vector<SumScore> out;
  for (std::size_t i = 0; i < data.patients.size(); ++i)
    for (std::size_t v = 0; v < data.patients[i].visits.size(); ++v)
      for (const auto& ob : data.patients[i].visits[v].observations)
        if (ob.instrument == instrument) out.push_back({i, v, official_total(schema, ob.responses)});
  return out;
}

InstrumentFit fit_instrument_lmm(const Dataset& data, int instrument, const BaselineOptions& options) {
  options.validate();
  if (instrument < 0 || static_cast<std::size_t>(instrument) >= data.instruments.size())
    throw ValidationError("instrument index out of range");
  InstrumentFit out;
  out.index = instrument;
  out.instrument = data.instruments[static_cast<std::size_t>(instrument)].id;
  out.spec = options.spec.resolved(data);
  out.spec.intercept = true;
  const auto pr = prepare(data, all_rows(data), instrument, options, out.spec, &out.standardization, true);
  fit_prepared(pr, options, nullptr, out);
  return out;
}

std::vector<InstrumentFit> fit_all_instruments(const Dataset& data, const BaselineOptions& options) {
  return parallel_map(data.instruments.size(),
                      [&](std::size_t l) { return fit_instrument_lmm(data, static_cast<int>(l), options); });
}

double baseline_prediction(const InstrumentFit& fit, const Dataset& data, std::size_t patient, double horizon) {
  if (!fit.usable()) throw ValidationError("instrument " + fit.instrument + " has no usable fit");
  const auto it = std::find(fit.patients.begin(), fit.patients.end(), patient);
  if (it == fit.patients.end())
    throw ValidationError("patient index " + std::to_string(patient) + " is not eligible for " + fit.instrument);
  const auto k = static_cast<std::size_t>(it - fit.patients.begin());
  BaselineOptions o;
  o.min_visits = o.min_pre_switch_visits = o.min_post_switch_visits = 0;
  PatientRecord r;
  restrict_patient(data.patients[patient], fit.index, o, r);
  Dataset sub;
  sub.instruments = data.instruments;
  sub.static_covariates = data.static_covariates;
  sub.visit_covariates = data.visit_covariates;
  const auto cd = counterfactual_design(r, sub, fit.spec, fit.standardization, horizon);
  const auto h = cd.horizon_row;
  return (cd.factual.X.row(h) * fit.fit.params.B + cd.factual.T.row(h) * fit.fit.blups[k])(0, 0);
}

BootstrapCovariance bootstrap_cov(const Dataset& data, const std::vector<InstrumentFit>& fits,
                                  const BaselineOptions& options, const MetaBootstrapOptions& boot) {
  if (boot.replicates < 2) throw ValidationError("bootstrap covariance needs at least two replicates");
  const auto used = usable_fits(fits);
  const Eigen::Index r = used.front()->effect.size();
  const Eigen::Index width = r * static_cast<Eigen::Index>(used.size());
  struct Rep {
    Eigen::VectorXd theta;
    std::string failure;
  };
  const std::size_t n = data.patients.size();
  auto reps = parallel_map(static_cast<std::size_t>(boot.replicates), [&](std::size_t b) {
    Rng rng(derive_seed(boot.seed, b));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> rows(n);
    for (auto& x : rows) x = pick(rng);
    Rep rep;
    rep.theta.resize(width);
    for (std::size_t l = 0; l < used.size(); ++l) {
      Standardization st = used[l]->standardization;
      const auto pr = prepare(data, rows, used[l]->index, options, used[l]->spec, &st, false);
      const auto f = refit(*used[l], pr, options);
      if (!f.usable() || f.effect.size() != r) {
        rep.failure = "replicate " + std::to_string(b) + ", " + f.instrument + ": " + f.reason;
        return rep;
      }
      rep.theta.segment(static_cast<Eigen::Index>(l) * r, r) = f.effect;
    }
    return rep;
  });
  BootstrapCovariance out;
  for (const auto* f : used) out.instruments.push_back(f->index);
  std::vector<Eigen::VectorXd> ok;
  for (const auto& rep : reps) {
    if (rep.failure.empty()) {
      ok.push_back(rep.theta);
    } else {
      ++out.failed_replicates;
      out.failure_messages.push_back(rep.failure);
    }
  }
  if (out.failed_replicates > boot.max_failure_fraction * boot.replicates || ok.size() < 2)
    throw OptimizationError(std::to_string(out.failed_replicates) + " of " + std::to_string(boot.replicates) +
                            " bootstrap replicates failed");
  out.estimates.resize(static_cast<Eigen::Index>(ok.size()), width);
  for (std::size_t b = 0; b < ok.size(); ++b) out.estimates.row(static_cast<Eigen::Index>(b)) = ok[b].transpose();
  const Eigen::MatrixXd centred = out.estimates.rowwise() - out.estimates.colwise().mean();
  out.covariance = centred.transpose() * centred / static_cast<double>(ok.size() - 1);
  return out;
}

MetaResult meta_gls(const std::vector<Eigen::VectorXd>& effects, const Eigen::MatrixXd& covariance) {
  if (effects.empty() || effects.front().size() == 0) throw ValidationError("meta-analysis needs effect estimates");
  const Eigen::Index r = effects.front().size();
  const Eigen::Index L = static_cast<Eigen::Index>(effects.size());
  for (const auto& e : effects)
    if (e.size() != r) throw ShapeError("effect vectors differ in length");
  if (covariance.rows() != r * L || covariance.cols() != r * L) throw ShapeError("covariance does not match effects");
  if (!covariance.isApprox(covariance.transpose(), 1e-10)) throw ValidationError("covariance must be symmetric");
  Eigen::VectorXd theta(r * L);
  Eigen::MatrixXd A(r * L, r);
  for (Eigen::Index l = 0; l < L; ++l) {
    theta.segment(l * r, r) = effects[static_cast<std::size_t>(l)];
    A.middleRows(l * r, r).setIdentity();
  }
  MetaResult out;
  out.covariance = covariance;
  const auto llt = factor_with_ridge(covariance, out.ridge);
  const Eigen::MatrixXd CiA = llt.solve(A);
  const Eigen::MatrixXd info = A.transpose() * CiA;
  out.pooled_covariance = info.inverse();
  out.pooled = out.pooled_covariance * (CiA.transpose() * theta);
  out.statistic = theta.dot(llt.solve(theta));
  return out;
}

std::vector<double> meta_null_statistics(const Dataset& data, const std::vector<InstrumentFit>& fits,
                                         const Eigen::MatrixXd& covariance, const BaselineOptions& options,
                                         int replicates, std::uint64_t seed) {
  if (replicates < 1) throw ValidationError("null calibration needs at least one replicate");
  const auto used = usable_fits(fits);
  double ridge = 0.0;
  const auto llt = factor_with_ridge(covariance, ridge);
  const Eigen::Index r = used.front()->effect.size();

  // No-switch fits supply the generating model; the full designs are refit on the draws.
  struct Generator {
    Prepared full;
    Prepared reduced;
    FitResult fit;
  };
  std::vector<Generator> gens;
  for (const auto* f : used) {
    Generator g;
    Standardization st = f->standardization;
    const auto rows = all_rows(data);
    g.full = prepare(data, rows, f->index, options, f->spec, &st, false);
    g.reduced = prepare(data, rows, f->index, options, f->spec.without_block("switch"), &st, false);
    g.fit = fit(g.reduced.lmm, initial_params(g.reduced.lmm), options.fit);
    gens.push_back(std::move(g));
  }
  auto stats = parallel_map(static_cast<std::size_t>(replicates), [&](std::size_t b) -> double {
    Rng rng(derive_seed(seed, b));
    Eigen::VectorXd theta(r * static_cast<Eigen::Index>(used.size()));
    for (std::size_t l = 0; l < used.size(); ++l) {
      const auto& g = gens[l];
      Prepared sim = g.full;
      const Eigen::ArrayXd phi_sd = (0.5 * g.fit.params.log_phi.array()).exp();
      const double sigma_sd = std::exp(0.5 * g.fit.params.log_sigma[0]);
      for (std::size_t i = 0; i < sim.lmm.size(); ++i) {
        const auto& red = g.reduced.lmm[i];
        const Eigen::VectorXd u = phi_sd.matrix().cwiseProduct(standard_normal_matrix(red.T.cols(), 1, rng));
        sim.lmm[i].Z = red.X * g.fit.params.B + red.T * u + sigma_sd * standard_normal_matrix(red.X.rows(), 1, rng);
      }
      const auto f = refit(*used[l], sim, options);
      if (!f.usable()) return std::numeric_limits<double>::quiet_NaN();
      theta.segment(static_cast<Eigen::Index>(l) * r, r) = f.effect;
    }
    return theta.dot(llt.solve(theta));
  });
  std::vector<double> out;
  for (double s : stats)
    if (std::isfinite(s)) out.push_back(s);
  if (out.empty()) throw OptimizationError("every null replicate failed");
  return out;
}

void calibrate(MetaResult& result, std::vector<double> null_statistics) {
  result.p_value = p_value(result.statistic, null_statistics);
  result.null_statistics = std::move(null_statistics);
}

void write_instrument_table(const std::vector<InstrumentFit>& fits, std::ostream& os) {
  os << "instrument\teligible_patients\tstatus\teffect\tstatistic\tvalue\tstd_error\tloglik\treason\n";
  for (const auto& f : fits) {
    if (!f.usable() || f.effect.size() == 0) {
      os << f.instrument << '\t' << f.eligible_patients << '\t' << to_string(f.status) << "\t\t\t\t\t\t" << f.reason
         << '\n';
      continue;
    }
    for (Eigen::Index a = 0; a < f.effect.size(); ++a)
      os << f.instrument << '\t' << f.eligible_patients << '\t' << to_string(f.status) << '\t'
         << f.effect_names[static_cast<std::size_t>(a)] << "\tcoefficient\t" << format_number(f.effect[a]) << '\t'
         << format_number(std::sqrt(f.effect_covariance(a, a))) << '\t' << format_number(f.fit.loglik) << '\t'
         << f.reason << '\n';
  }
}

void write_meta_result(const MetaResult& result, const std::vector<std::string>& effect_names, std::ostream& os) {
  os << "quantity\tvalue\tstd_error\n";
  for (Eigen::Index a = 0; a < result.pooled.size(); ++a) {
    const auto name = static_cast<std::size_t>(a) < effect_names.size() ? effect_names[static_cast<std::size_t>(a)]
                                                                         : "effect_" + std::to_string(a);
    os << "pooled:" << name << '\t' << format_number(result.pooled[a]) << '\t'
       << format_number(std::sqrt(result.pooled_covariance(a, a))) << '\n';
  }
  os << "statistic\t" << format_number(result.statistic) << "\t\n";
  os << "p_value\t" << format_number(result.p_value) << "\t\n";
  os << "null_replicates\t" << result.null_statistics.size() << "\t\n";
  os << "ridge\t" << format_number(result.ridge) << "\t\n";
}

}  // namespace mmvae
