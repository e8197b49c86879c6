#include "mmvae/design.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mmvae/errors.hpp"

namespace mmvae {

namespace {

enum class Scenario { Factual, Counterfactual };

struct CovariateLookup {
  bool is_static = true;
  std::size_t index = 0;
};

CovariateLookup find_covariate(const Dataset& data, const PatientRecord& p, const std::string& name) {
  for (std::size_t c = 0; c < data.static_covariates.size(); ++c)
    if (data.static_covariates[c] == name) return {true, c};
  for (std::size_t c = 0; c < data.visit_covariates.size(); ++c)
    if (data.visit_covariates[c] == name) return {false, c};
  throw IngestionError("patient " + p.id + ": missing covariate '" + name + "'");
}

// Index of the last visit at or before `t` (first visit when t precedes all visits).
std::size_t locf_visit(const PatientRecord& p, double t) {
  std::size_t idx = 0;
  for (std::size_t v = 0; v < p.visits.size(); ++v)
    if (p.visits[v].time <= t) idx = v;
  return idx;
}

DesignPair build_rows(const PatientRecord& p, const Dataset& data, const ModelSpec& spec, const Standardization& sd,
                      const std::vector<double>& times, Scenario scenario, const KnockoffColumns* knockoffs) {
  if (p.visits.empty()) throw ValidationError("patient " + p.id + " has no visits");
  const auto m = static_cast<Eigen::Index>(times.size());
  DesignPair d;
  d.t_switch = p.switch_time();
  d.times.resize(m);
  d.delta_t.resize(m);
  const bool switched = p.has_switch();
  for (Eigen::Index r = 0; r < m; ++r) {
    d.times[r] = times[static_cast<std::size_t>(r)];
    d.delta_t[r] = switched ? d.times[r] - d.t_switch : 0.0;
  }
  Eigen::VectorXd age_std(m);
  for (Eigen::Index r = 0; r < m; ++r) age_std[r] = sd.apply("age", p.age_at_baseline + d.times[r]);

  std::vector<Eigen::VectorXd> cols;
  auto add = [&](Eigen::VectorXd c, std::string name, std::string block) {
    cols.push_back(std::move(c));
    d.fixed_names.push_back(std::move(name));
    d.fixed_blocks.push_back(std::move(block));
  };
  if (spec.intercept) add(Eigen::VectorXd::Ones(m), "intercept", "intercept");
  if (spec.include_switch) {
    std::vector<Eigen::VectorXd> post;
    for (const auto& trt : spec.treatments) {
      Eigen::VectorXd c = Eigen::VectorXd::Zero(m);
      if (scenario == Scenario::Factual && switched && p.switch_treatment() == trt)
        for (Eigen::Index r = 0; r < m; ++r) c[r] = std::max(0.0, d.delta_t[r]);
      post.push_back(c);
      add(c, "switch_" + trt, "switch");
    }
    if (spec.age_interactions)
      for (std::size_t k = 0; k < post.size(); ++k)
        add(post[k].cwiseProduct(age_std), "switch_" + spec.treatments[k] + ":age", "switch");
  }
  if (spec.include_age) add(age_std, "age", "age");
  std::vector<Eigen::VectorXd> covs;
  for (const auto& name : spec.covariates) {
    const auto look = find_covariate(data, p, name);
    Eigen::VectorXd c(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      double raw;
      if (look.is_static) {
        raw = p.static_covariates.at(look.index);
      } else {
        const auto v = locf_visit(p, d.times[r]);
        raw = p.visits[v].covariates.at(look.index);
      }
      if (!std::isfinite(raw)) throw IngestionError("patient " + p.id + ": missing covariate '" + name + "'");
      c[r] = sd.apply(name, raw);
    }
    covs.push_back(c);
    add(c, name, name);
  }
  if (spec.age_interactions)
    for (std::size_t k = 0; k < covs.size(); ++k)
      add(covs[k].cwiseProduct(age_std), spec.covariates[k] + ":age", spec.covariates[k]);
  if (spec.fixed_knockoffs > 0) {
    if (!knockoffs || knockoffs->fixed.cols() != spec.fixed_knockoffs || knockoffs->fixed.rows() < m)
      throw ShapeError("patient " + p.id + ": fixed knockoff columns missing or mis-shaped");
    for (int k = 0; k < spec.fixed_knockoffs; ++k)
      add(knockoffs->fixed.col(k).head(m), "knockoff_" + std::to_string(k), "knockoff");
  }
  d.X.resize(m, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) d.X.col(static_cast<Eigen::Index>(c)) = cols[c];

  std::vector<Eigen::VectorXd> rcols;
  if (spec.random_intercept) {
    rcols.push_back(Eigen::VectorXd::Ones(m));
    d.random_names.push_back("random_intercept");
  }
  if (spec.random_pre_switch) {
    Eigen::VectorXd c(m);
    for (Eigen::Index r = 0; r < m; ++r)
      c[r] = scenario == Scenario::Factual ? std::min(0.0, d.delta_t[r]) : d.delta_t[r];
    rcols.push_back(c);
    d.random_names.push_back("random_pre_switch");
  }
  if (spec.random_post_switch) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(m);
    if (scenario == Scenario::Factual)
      for (Eigen::Index r = 0; r < m; ++r) c[r] = std::max(0.0, d.delta_t[r]);
    rcols.push_back(c);
    d.random_names.push_back("random_post_switch");
  }
  if (spec.random_knockoffs > 0) {
    if (!knockoffs || knockoffs->random.cols() != spec.random_knockoffs || knockoffs->random.rows() < m)
      throw ShapeError("patient " + p.id + ": random knockoff columns missing or mis-shaped");
    for (int k = 0; k < spec.random_knockoffs; ++k) {
      rcols.push_back(knockoffs->random.col(k).head(m));
      d.random_names.push_back("random_knockoff_" + std::to_string(k));
    }
  }
  d.T.resize(m, static_cast<Eigen::Index>(rcols.size()));
  for (std::size_t c = 0; c < rcols.size(); ++c) d.T.col(static_cast<Eigen::Index>(c)) = rcols[c];
  return d;
}

std::vector<double> visit_times(const PatientRecord& p) {
  std::vector<double> t;
  for (const auto& v : p.visits) t.push_back(v.time);
  return t;
}

}  // namespace

ModelSpec ModelSpec::without_block(const std::string& block) const {
  ModelSpec s = *this;
  if (block == "switch") {
    s.include_switch = false;
  } else if (block == "age") {
    s.include_age = false;
  } else if (block == "intercept") {
    s.intercept = false;
  } else if (block == "knockoff") {
    s.fixed_knockoffs = 0;
  } else if (block == "random_intercept") {
    s.random_intercept = false;
  } else if (block == "random_pre_switch") {
    s.random_pre_switch = false;
  } else if (block == "random_post_switch") {
    s.random_post_switch = false;
  } else if (block == "random_knockoff") {
    s.random_knockoffs = 0;
  } else {
    auto it = std::find(s.covariates.begin(), s.covariates.end(), block);
    if (it == s.covariates.end()) throw ValidationError("unknown model block '" + block + "'");
    s.covariates.erase(it);
  }
  return s;
}

int ModelSpec::block_columns(const std::string& block) const {
  const int inter = age_interactions ? 2 : 1;
  if (block == "switch") return include_switch ? static_cast<int>(treatments.size()) * inter : 0;
  if (block == "age") return include_age ? 1 : 0;
  if (block == "intercept") return intercept ? 1 : 0;
  if (block == "knockoff") return fixed_knockoffs;
  if (block == "random_intercept") return random_intercept ? 1 : 0;
  if (block == "random_pre_switch") return random_pre_switch ? 1 : 0;
  if (block == "random_post_switch") return random_post_switch ? 1 : 0;
  if (block == "random_knockoff") return random_knockoffs;
  if (std::find(covariates.begin(), covariates.end(), block) != covariates.end()) return inter;
  throw ValidationError("unknown model block '" + block + "'");
}

bool ModelSpec::is_random_block(const std::string& block) const { return block.rfind("random_", 0) == 0; }

ModelSpec ModelSpec::resolved(const Dataset& data) const {
  ModelSpec s = *this;
  if (s.treatments.empty()) {
    std::set<std::string> t;
    for (const auto& p : data.patients)
      if (p.has_switch()) t.insert(p.switch_treatment());
    s.treatments.assign(t.begin(), t.end());
  }
  return s;
}

double Standardization::apply(const std::string& name, double value) const {
  const auto it = stats.find(name);
  if (it == stats.end()) throw ValidationError("no standardization statistics for '" + name + "'");
  return (value - it->second.first) / it->second.second;
}

Standardization compute_standardization(const Dataset& data) {
  Standardization s;
  auto finish = [](const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= std::max<std::size_t>(1, xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= std::max<std::size_t>(1, xs.size() > 1 ? xs.size() - 1 : 1);
    const double sd = std::sqrt(var);
    return std::make_pair(mean, sd > 1e-12 ? sd : 1.0);
  };
  std::vector<double> age;
  std::vector<std::vector<double>> stat(data.static_covariates.size());
  std::vector<std::vector<double>> vis(data.visit_covariates.size());
  for (const auto& p : data.patients)
    for (const auto& v : p.visits) {
      age.push_back(p.age_at_baseline + v.time);
      for (std::size_t c = 0; c < stat.size(); ++c) stat[c].push_back(p.static_covariates[c]);
      for (std::size_t c = 0; c < vis.size(); ++c) vis[c].push_back(v.covariates[c]);
    }
  s.stats["age"] = finish(age);
  for (std::size_t c = 0; c < stat.size(); ++c) s.stats[data.static_covariates[c]] = finish(stat[c]);
  for (std::size_t c = 0; c < vis.size(); ++c) s.stats[data.visit_covariates[c]] = finish(vis[c]);
  return s;
}

DesignPair build_design(const PatientRecord& patient, const Dataset& data, const ModelSpec& spec,
                        const Standardization& standardization, const KnockoffColumns* knockoffs) {
  return build_rows(patient, data, spec, standardization, visit_times(patient), Scenario::Factual, knockoffs);
}

CounterfactualDesign counterfactual_design(const PatientRecord& patient, const Dataset& data, const ModelSpec& spec,
                                           const Standardization& standardization, double horizon,
                                           const KnockoffColumns* knockoffs) {
  if (!patient.has_switch()) throw ValidationError("patient " + patient.id + " has no recorded switch");
  if (!(horizon > 0.0)) throw ValidationError("horizon must be positive");
  std::vector<double> times = visit_times(patient);
  times.push_back(patient.switch_time() + horizon);
  KnockoffColumns extended;
  const KnockoffColumns* kc = nullptr;
  if (knockoffs) {
    // The horizon row carries the last visit's knockoff values.
    extended = *knockoffs;
    auto grow = [](Eigen::MatrixXd& w) {
      if (w.rows() == 0) return;
      w.conservativeResize(w.rows() + 1, Eigen::NoChange);
      w.row(w.rows() - 1) = w.row(w.rows() - 2);
    };
    grow(extended.fixed);
    grow(extended.random);
    kc = &extended;
  }
  CounterfactualDesign cf;
  cf.factual = build_rows(patient, data, spec, standardization, times, Scenario::Factual, kc);
  cf.counterfactual = build_rows(patient, data, spec, standardization, times, Scenario::Counterfactual, kc);
  cf.horizon_row = static_cast<int>(times.size()) - 1;
  return cf;
}

DesignPair counterfactual_at_visits(const PatientRecord& patient, const Dataset& data, const ModelSpec& spec,
                                    const Standardization& standardization, const KnockoffColumns* knockoffs) {
  return build_rows(patient, data, spec, standardization, visit_times(patient), Scenario::Counterfactual, knockoffs);
}

}  // namespace mmvae
