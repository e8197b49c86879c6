#include "mmvae/synthgen.hpp"

#include <algorithm>
#include <cmath>

#include "mmvae/errors.hpp"

namespace mmvae {

namespace {

InstrumentSchema make_schema(const std::string& id, const std::vector<std::pair<int, int>>& official,
                             const std::vector<std::pair<int, int>>& extra, bool flags) {
  InstrumentSchema s;
  s.id = id;
  for (auto [count, levels] : official)
    for (int k = 0; k < count; ++k) s.items.push_back({levels, flags, true});
  for (auto [count, levels] : extra)
    for (int k = 0; k < count; ++k) s.items.push_back({levels, flags, false});
  return s;
}

const std::vector<std::string> kStatic{"smn2_le2", "onset_age", "presymptomatic", "sex", "family_history"};
const std::vector<std::string> kVisit{"ventilation", "scoliosis"};

double draw_gamma(Rng& rng, double shape, double scale) {
  std::gamma_distribution<double> g(shape, scale);
  return g(rng);
}

double sigmoid_(double x) { return 1.0 / (1.0 + std::exp(-x)); }

int sample_ordinal(double loc, const Eigen::VectorXd& kappa, Rng& rng) {
  const double u = uniform01(rng);
  // P(level <= c) = sigmoid(kappa_c - loc)
  for (Eigen::Index c = 0; c < kappa.size(); ++c)
    if (u < sigmoid_(kappa[c] - loc)) return static_cast<int>(c);
  return static_cast<int>(kappa.size());
}

double expected_level(double loc, const Eigen::VectorXd& kappa, double flag_prob) {
  double e = 0.0;
  for (Eigen::Index c = 0; c < kappa.size(); ++c) e += sigmoid_(loc - kappa[c]);
  return (1.0 - flag_prob) * e;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (patients < 1) throw ValidationError("generator needs at least one patient");
  if (true_latent_dim < 1) throw ValidationError("true latent dimension must be at least 1");
  if (static_cast<int>(switch_slope.size()) != true_latent_dim || static_cast<int>(age_slope.size()) != true_latent_dim)
    throw ValidationError("switch_slope and age_slope need one entry per true latent dimension");
  if (treatments.empty() || treatment_strength.size() != treatments.size())
    throw ValidationError("every treatment needs a strength");
  if (!(followup_min > 0) || followup_max < followup_min) throw ValidationError("invalid follow-up range");
  if (!(gap_offset >= 0) || !(gap_shape > 0) || !(gap_scale > 0)) throw ValidationError("invalid visit gap law");
  if (random_intercept_sd < 0 || random_pre_slope_sd < 0 || random_post_slope_sd < 0 || !(residual_sd > 0))
    throw ValidationError("variances must be positive");
  if (missing_item_rate < 0 || missing_item_rate >= 1) throw ValidationError("missing_item_rate must lie in [0, 1)");
  for (const auto& t : instruments) {
    t.schema.validate();
    if (t.age_max <= t.age_min) throw ValidationError("empty age window for instrument " + t.schema.id);
    if (t.probability <= 0 || t.probability > 1) throw ValidationError("instrument probability must lie in (0, 1]");
  }
}

std::vector<InstrumentTemplate> registry_instruments() {
  // Items, levels, official/extra split and inputs follow the registry's motor scales.
  std::vector<InstrumentTemplate> v;
  v.push_back({make_schema("RULM", {{17, 3}, {3, 2}}, {{1, 6}}, true), 3.0, 1e9, 0.7, 0.1, 2.0});
  v.push_back({make_schema("HFMSE", {{33, 3}}, {{1, 6}}, true), 2.0, 1e9, 0.65, 0.4, 2.0});
  v.back().schema.items.back().cannot_perform_flag = false;
  v.push_back({make_schema("CHOP-INTEND", {{16, 5}}, {}, false), 0.0, 4.0, 0.9, -0.9, 2.0});
  v.back().schema.items[0].cannot_perform_flag = true;
  v.back().schema.items[1].cannot_perform_flag = true;
  v.back().schema.items[2].cannot_perform_flag = true;
  v.back().schema.items[3].cannot_perform_flag = true;
  v.push_back({make_schema("HINE-2", {{2, 5}, {6, 4}}, {{3, 2}}, true), 0.0, 8.0, 0.9, -0.6, 2.0});
  v.push_back({make_schema("ALSFRS-R", {{12, 5}}, {{1, 5}}, true), 14.0, 1e9, 0.7, -0.4, 2.0});
  return v;
}

std::vector<InstrumentTemplate> compact_instruments(int count, int items, int levels, double probability) {
  std::vector<InstrumentTemplate> v;
  for (int l = 0; l < count; ++l) {
    InstrumentTemplate t;
    t.schema.id = "S" + std::to_string(l + 1);
    for (int k = 0; k < items; ++k) t.schema.items.push_back({levels, false, true});
    t.probability = probability;
    t.difficulty = -0.3 + 0.6 * l / std::max(1, count - 1);
    v.push_back(t);
  }
  return v;
}

Registry generate_registry(const GeneratorConfig& cfg_in) {
  GeneratorConfig cfg = cfg_in;
  if (cfg.instruments.empty()) cfg.instruments = registry_instruments();
  cfg.validate();
  const int dstar = cfg.true_latent_dim;
  Registry reg;
  auto& data = reg.data;
  for (const auto& t : cfg.instruments) data.instruments.push_back(t.schema);
  if (cfg.covariates) {
    data.static_covariates = kStatic;
    data.visit_covariates = kVisit;
  }
  reg.truth.config = cfg;

  // Item parameters and covariate effects come from their own seed stream.
  Rng item_rng(derive_seed(cfg.seed, 1000003));
  for (const auto& t : cfg.instruments) {
    ItemParameters ip;
    const int n = t.schema.item_count();
    ip.loadings.resize(n, dstar);
    for (int k = 0; k < n; ++k) {
      ip.loadings(k, 0) = std::abs(1.0 + 0.3 * standard_normal(item_rng));
      for (int j = 1; j < dstar; ++j) ip.loadings(k, j) = std::abs(0.3 + 0.3 * standard_normal(item_rng));
      ip.loadings.row(k) /= ip.loadings.row(k).norm();
      const int cuts = t.schema.items[static_cast<std::size_t>(k)].levels - 1;
      const double centre = t.discrimination * t.difficulty + 0.6 * standard_normal(item_rng);
      const double spacing = 0.8 + 0.6 * uniform01(item_rng);
      Eigen::VectorXd kappa(cuts);
      for (int c = 0; c < cuts; ++c) kappa[c] = centre + spacing * (c - 0.5 * (cuts - 1));
      ip.cutpoints.push_back(kappa);
    }
    reg.truth.items.push_back(ip);
  }
  const int n_cov = static_cast<int>(data.static_covariates.size() + data.visit_covariates.size());
  reg.truth.covariate_effects = cfg.covariate_effect_sd * standard_normal_matrix(n_cov, dstar, item_rng);

  const double mu_log_age = std::log(cfg.baseline_age_median);
  int produced = 0;
  for (std::uint64_t attempt = 0; produced < cfg.patients; ++attempt) {
    if (attempt > static_cast<std::uint64_t>(cfg.patients) * 200 + 1000)
      throw GenerationError("generator could not produce patients passing the cohort filters");
    Rng rng(derive_seed(cfg.seed, attempt));
    PatientRecord p;
    p.id = "P" + std::to_string(10000 + produced);
    p.age_at_baseline = std::clamp(std::exp(mu_log_age + cfg.baseline_age_log_sd * standard_normal(rng)), 0.05, 60.0);
    const double followup = cfg.followup_min + (cfg.followup_max - cfg.followup_min) * uniform01(rng);
    std::vector<double> times{0.0};
    while (true) {
      const double next = times.back() + cfg.gap_offset + draw_gamma(rng, cfg.gap_shape, cfg.gap_scale);
      if (next > followup) break;
      times.push_back(next);
    }
    const double ts = followup * (0.3 + 0.4 * uniform01(rng));
    const auto trt_idx = static_cast<std::size_t>(std::uniform_int_distribution<int>(
        0, static_cast<int>(cfg.treatments.size()) - 1)(rng));
    int pre = 0, post = 0;
    for (double t : times) (t < ts ? pre : post)++;
    if (times.size() < 4 || pre < 2 || post < 2 || ts - times.front() < 0.5 || times.back() - ts < 0.5) continue;
    p.initial_treatment = "A";
    p.switches.push_back({ts, cfg.treatments[trt_idx]});

    // Covariates.
    Eigen::VectorXd stat = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.static_covariates.size()));
    double vent_onset = INFINITY, scol_onset = INFINITY;
    if (cfg.covariates) {
      const double presym = uniform01(rng) < 0.15 ? 1.0 : 0.0;
      stat << (uniform01(rng) < 0.4 ? 1.0 : 0.0),
          presym > 0 ? 0.0 : std::min(p.age_at_baseline, 0.2 + draw_gamma(rng, 1.5, 0.6)), presym,
          (uniform01(rng) < 0.5 ? 1.0 : 0.0), (uniform01(rng) < 0.2 ? 1.0 : 0.0);
      if (uniform01(rng) < 0.25) vent_onset = followup * uniform01(rng) - 1.0;
      if (uniform01(rng) < 0.3) scol_onset = followup * uniform01(rng) - 1.0;
      p.static_covariates.assign(stat.data(), stat.data() + stat.size());
    }

    Eigen::MatrixXd re(3, dstar);
    for (int j = 0; j < dstar; ++j) {
      re(0, j) = cfg.random_intercept_sd * standard_normal(rng);
      re(1, j) = cfg.random_pre_slope_sd * standard_normal(rng);
      re(2, j) = cfg.random_post_slope_sd * standard_normal(rng);
    }
    PatientTruth truth;
    truth.id = p.id;
    truth.random_effects = re;
    const auto m = static_cast<Eigen::Index>(times.size());
    truth.latent.resize(m, dstar);
    truth.latent_mean.resize(m, dstar);
    for (Eigen::Index r = 0; r < m; ++r) {
      const double t = times[static_cast<std::size_t>(r)];
      Visit v;
      v.time = t;
      Eigen::VectorXd cov(n_cov);
      if (cfg.covariates) {
        v.covariates = {t >= vent_onset ? 1.0 : 0.0, t >= scol_onset ? 1.0 : 0.0};
        cov << stat, v.covariates[0], v.covariates[1];
      }
      const double dt = t - ts;
      for (int j = 0; j < dstar; ++j) {
        double z = cfg.age_slope[static_cast<std::size_t>(j)] * (p.age_at_baseline + t) + re(0, j) +
                   re(1, j) * std::min(0.0, dt) +
                   (cfg.switch_slope[static_cast<std::size_t>(j)] * cfg.treatment_strength[trt_idx] + re(2, j)) *
                       std::max(0.0, dt);
        if (n_cov > 0) z += cov.dot(reg.truth.covariate_effects.col(j));
        truth.latent_mean(r, j) = z;
        truth.latent(r, j) = z + cfg.residual_sd * standard_normal(rng);
      }
      const double age = p.age_at_baseline + t;
      std::vector<int> eligible;
      for (std::size_t l = 0; l < cfg.instruments.size(); ++l)
        if (age >= cfg.instruments[l].age_min && age < cfg.instruments[l].age_max) eligible.push_back(static_cast<int>(l));
      if (eligible.empty()) throw GenerationError("no instrument is eligible at age " + std::to_string(age));
      std::vector<int> chosen;
      for (int l : eligible)
        if (uniform01(rng) < cfg.instruments[static_cast<std::size_t>(l)].probability) chosen.push_back(l);
      if (chosen.empty())
        chosen.push_back(eligible[static_cast<std::size_t>(
            std::uniform_int_distribution<int>(0, static_cast<int>(eligible.size()) - 1)(rng))]);
      Eigen::VectorXd expected = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cfg.instruments.size()));
      for (std::size_t l = 0; l < cfg.instruments.size(); ++l) {
        const auto& tpl = cfg.instruments[l];
        const auto& ip = reg.truth.items[l];
        for (int k = 0; k < tpl.schema.item_count(); ++k) {
          const double loc = tpl.discrimination * ip.loadings.row(k).dot(truth.latent.row(r));
          const bool flag = tpl.schema.items[static_cast<std::size_t>(k)].cannot_perform_flag;
          const double fp = flag ? sigmoid_(ip.cutpoints[static_cast<std::size_t>(k)][0] - loc - 2.0) : 0.0;
          if (tpl.schema.items[static_cast<std::size_t>(k)].official)
            expected[static_cast<Eigen::Index>(l)] += expected_level(loc, ip.cutpoints[static_cast<std::size_t>(k)], fp);
        }
      }
      truth.expected_sum_scores.push_back(expected);
      for (int l : chosen) {
        const auto& tpl = cfg.instruments[static_cast<std::size_t>(l)];
        const auto& ip = reg.truth.items[static_cast<std::size_t>(l)];
        InstrumentObservation o;
        o.instrument = l;
        const int n = tpl.schema.item_count();
        o.responses.levels.assign(static_cast<std::size_t>(n), 0);
        o.responses.cannot_perform.assign(static_cast<std::size_t>(n), 0);
        for (int k = 0; k < n; ++k) {
          const double loc = tpl.discrimination * ip.loadings.row(k).dot(truth.latent.row(r));
          const auto& item = tpl.schema.items[static_cast<std::size_t>(k)];
          if (item.cannot_perform_flag && uniform01(rng) < sigmoid_(ip.cutpoints[static_cast<std::size_t>(k)][0] - loc - 2.0)) {
            o.responses.cannot_perform[static_cast<std::size_t>(k)] = 1;
            continue;
          }
          o.responses.levels[static_cast<std::size_t>(k)] = sample_ordinal(loc, ip.cutpoints[static_cast<std::size_t>(k)], rng);
        }
        // Missing items, capped so the observation survives the missing-fraction filter.
        const int cap = static_cast<int>(std::floor(0.25 * n));
        int missing = 0;
        for (int k = 0; k < n; ++k)
          if (uniform01(rng) < cfg.missing_item_rate && missing < cap) {
            o.responses.levels[static_cast<std::size_t>(k)] = -1;
            o.responses.cannot_perform[static_cast<std::size_t>(k)] = 0;
            ++missing;
          }
        v.observations.push_back(std::move(o));
      }
      p.visits.push_back(std::move(v));
    }
    data.patients.push_back(std::move(p));
    reg.truth.patients.push_back(std::move(truth));
    ++produced;
  }

  FilterReport rep;
  CohortRules rules;
  const auto filtered = apply_cohort_filters(data, rules, &rep);
  if (rep.total_exclusions() != 0) {
    // Only the rare-treatment rule can still fire (small cohorts); keep data and truth aligned.
    std::vector<PatientTruth> kept;
    for (const auto& p : filtered.patients)
      for (const auto& t : reg.truth.patients)
        if (t.id == p.id) kept.push_back(t);
    reg.truth.patients = std::move(kept);
    data = filtered;
  }
  data.validate();
  return reg;
}

Dataset generate_null_from_model(const TrainedModel& model, const TrainingProblem& problem, Rng& rng) {
  if (model.blups.size() != problem.data.patients.size())
    throw ValidationError("trained model has no mixed-model fit for this dataset");
  Dataset out = problem.data;
  const auto sigma_sd = model.mixed.log_sigma.array().exp().sqrt().matrix().eval();
  const int d = model.config.latent_dim;
  for (std::size_t i = 0; i < out.patients.size(); ++i) {
    auto& p = out.patients[i];
    const auto cf = counterfactual_at_visits(p, problem.data, problem.spec, problem.standardization,
                                             problem.knockoffs.empty() ? nullptr : &problem.knockoffs[i]);
    const Eigen::MatrixXd mean = cf.X * model.mixed.B + cf.T * model.blups[i];
    for (std::size_t v = 0; v < p.visits.size(); ++v) {
      Eigen::VectorXd z = mean.row(static_cast<Eigen::Index>(v)).transpose();
      for (int j = 0; j < d; ++j) z[j] += sigma_sd[j] * standard_normal(rng);
      for (auto& o : p.visits[v].observations) {
        const auto& schema = out.instruments[static_cast<std::size_t>(o.instrument)];
        const auto dec = decode_ordinal(schema, model.vaes[static_cast<std::size_t>(o.instrument)], z);
        const auto sample = sample_items(schema, dec, rng);
        for (std::size_t k = 0; k < sample.levels.size(); ++k) {
          if (o.responses.levels[k] < 0) continue;  // keep the missing mask
          o.responses.levels[k] = sample.levels[k];
          o.responses.cannot_perform[k] = sample.cannot_perform[k];
        }
      }
    }
  }
  return out;
}

}  // namespace mmvae
