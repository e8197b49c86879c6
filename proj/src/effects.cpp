#include "mmvae/effects.hpp"

#include <cmath>
#include <numeric>
#include <ostream>

#include "mmvae/design.hpp"
#include "mmvae/errors.hpp"
#include "mmvae/parallel.hpp"

namespace mmvae {

LatentPrediction latent_prediction(const TrainedModel& model, const TrainingProblem& problem, std::size_t patient,
                                   double horizon) {
  if (!problem.knockoffs.empty()) throw ValidationError("effects need a model without knockoff columns");
  if (patient >= problem.data.patients.size() || model.blups.size() != problem.data.patients.size())
    throw ValidationError("trained model has no random effects for patient index " + std::to_string(patient));
  const auto& p = problem.data.patients[patient];
  const auto cd = counterfactual_design(p, problem.data, problem.spec, problem.standardization, horizon);
  const auto h = cd.horizon_row;
  const auto& U = model.blups[patient];
  LatentPrediction out;
  out.time = p.switch_time() + horizon;
  out.factual = (cd.factual.X.row(h) * model.mixed.B + cd.factual.T.row(h) * U).transpose();
  out.counterfactual = (cd.counterfactual.X.row(h) * model.mixed.B + cd.counterfactual.T.row(h) * U).transpose();
  return out;
}

PatientEffect switch_effect(const TrainedModel& model, const TrainingProblem& problem, std::size_t patient,
                            double horizon) {
  const auto pred = latent_prediction(model, problem, patient, horizon);
  PatientEffect out;
  out.patient = patient;
  for (std::size_t l = 0; l < problem.data.instruments.size(); ++l) {
    const auto& schema = problem.data.instruments[l];
    const auto f = decode_ordinal(schema, model.vaes[l], pred.factual);
    const auto c = decode_ordinal(schema, model.vaes[l], pred.counterfactual);
    InstrumentEffect e;
    e.item_difference.resize(schema.item_count());
    for (int k = 0; k < schema.item_count(); ++k) {
      const auto ku = static_cast<std::size_t>(k);
      e.item_difference[k] = f.items[ku].expected_level() - c.items[ku].expected_level();
    }
    e.factual_sum = f.expected_sum_score(schema);
    e.counterfactual_sum = c.expected_sum_score(schema);
    e.sum_difference = e.factual_sum - e.counterfactual_sum;
    out.instruments.push_back(std::move(e));
  }
  return out;
}

std::vector<PatientEffect> switch_effects(const TrainedModel& model, const TrainingProblem& problem,
                                          const EffectOptions& options) {
  if (!(options.horizon > 0.0)) throw ValidationError("effect horizon must be positive");
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < problem.data.patients.size(); ++i) {
    const auto& p = problem.data.patients[i];
    if (!p.has_switch()) continue;
    if (options.observed_only && p.visits.back().time < p.switch_time() + options.horizon) continue;
    selected.push_back(i);
  }
  return parallel_map(selected.size(),
                      [&](std::size_t k) { return switch_effect(model, problem, selected[k], options.horizon); });
}

EffectReport aggregate_effects(const std::vector<std::vector<PatientEffect>>& per_seed,
                               const std::vector<InstrumentSchema>& instruments, double horizon) {
  if (per_seed.empty()) throw ValidationError("effect aggregation needs at least one seed");
  EffectReport rep;
  rep.horizon = horizon;
  rep.seeds = per_seed.size();
  for (std::size_t l = 0; l < instruments.size(); ++l) {
    InstrumentEffectSummary s;
    s.instrument = instruments[l].id;
    s.max_score = instruments[l].max_sum_score();
    s.item_mean = Eigen::VectorXd::Zero(instruments[l].item_count());
    for (const auto& seed : per_seed) {
      if (seed.empty()) throw ValidationError("effect aggregation needs at least one patient per seed");
      double sum = 0.0;
      Eigen::VectorXd items = Eigen::VectorXd::Zero(s.item_mean.size());
      for (const auto& pe : seed) {
        if (pe.instruments.size() != instruments.size()) throw ShapeError("patient effect lacks instruments");
        sum += pe.instruments[l].sum_difference;
        items += pe.instruments[l].item_difference;
      }
      const double n = static_cast<double>(seed.size());
      s.seed_means.push_back(sum / n);
      s.item_mean += items / n;
      s.patients = seed.size();
    }
    const double ns = static_cast<double>(per_seed.size());
    s.item_mean /= ns;
    s.mean = std::accumulate(s.seed_means.begin(), s.seed_means.end(), 0.0) / ns;
    double ss = 0.0;
    for (double v : s.seed_means) ss += (v - s.mean) * (v - s.mean);
    s.sd = per_seed.size() > 1 ? std::sqrt(ss / (ns - 1.0)) : 0.0;
    s.percent = s.max_score > 0 ? 100.0 * s.mean / s.max_score : 0.0;
    for (double v : s.seed_means)
      if ((v > 0) != (s.mean > 0) || v == 0.0) s.sign_stable = false;
    rep.instruments.push_back(std::move(s));
  }
  return rep;
}

void write_effect_table(const EffectReport& report, std::ostream& os) {
  os << "instrument\tmax_score\tmean_difference\tsd\tpercent_of_max\tpatients\tseeds\tsign_stable\n";
  for (const auto& s : report.instruments)
    os << s.instrument << '\t' << s.max_score << '\t' << format_number(s.mean) << '\t' << format_number(s.sd) << '\t'
       << format_number(s.percent) << '\t' << s.patients << '\t' << report.seeds << '\t' << (s.sign_stable ? 1 : 0)
       << '\n';
}

void write_item_effect_table(const EffectReport& report, std::ostream& os) {
  os << "instrument\titem\tmean_difference\n";
  for (const auto& s : report.instruments)
    for (Eigen::Index k = 0; k < s.item_mean.size(); ++k)
      os << s.instrument << '\t' << k << '\t' << format_number(s.item_mean[k]) << '\n';
}

Dataset inject_artificial_switch(const Dataset& data, const InjectionOptions& options, Rng& rng,
                                 InjectionReport* report) {
  if (!(options.rate > 0.0) || !(options.period > 0.0)) throw ValidationError("injection rate and period must be positive");
  Dataset out = data;
  InjectionReport rep;
  auto pick = [&](const std::vector<int>& candidates) {
    return candidates[static_cast<std::size_t>(
        std::uniform_int_distribution<int>(0, static_cast<int>(candidates.size()) - 1)(rng))];
  };
  for (auto& p : out.patients) {
    if (!p.has_switch()) continue;
    const double ts = p.switch_time();
    for (std::size_t l = 0; l < out.instruments.size(); ++l) {
      const auto& schema = out.instruments[l];
      std::vector<int> assigned;  // item carrying each accrued point, -1 while unplaced
      for (auto& v : p.visits) {
        if (v.time < ts) continue;
        const int due = static_cast<int>(std::floor(options.rate * (v.time - ts) / options.period + 1e-9));
        for (auto& o : v.observations) {
          if (o.instrument != static_cast<int>(l)) continue;
          auto& lv = o.responses.levels;
          const auto& cp = o.responses.cannot_perform;
          auto eligible = [&](int k) {
            const auto ku = static_cast<std::size_t>(k);
            return schema.items[ku].official && lv[ku] >= 0 && !cp[ku] && lv[ku] < schema.items[ku].levels - 1;
          };
          auto candidates = [&] {
            std::vector<int> c;
            for (int k = 0; k < schema.item_count(); ++k)
              if (eligible(k)) c.push_back(k);
            return c;
          };
          bool changed = false;
          if (static_cast<int>(assigned.size()) < due) assigned.resize(static_cast<std::size_t>(due), -1);
          for (int q = 0; q < due; ++q) {
            auto& item = assigned[static_cast<std::size_t>(q)];
            int target = -1;
            if (item >= 0 && eligible(item)) {
              target = item;
            } else {
              const auto c = candidates();
              if (!c.empty()) {
                target = pick(c);
                if (item < 0) {
                  item = target;
                } else {
                  ++rep.points_reallocated;
                }
              }
            }
            if (target < 0) {
              ++rep.points_dropped;
              continue;
            }
            ++lv[static_cast<std::size_t>(target)];
            ++rep.points_added;
            changed = true;
          }
          if (changed) ++rep.observations_changed;
        }
      }
    }
  }
  if (report) *report = rep;
  return out;
}

}  // namespace mmvae
