#pragma once

#include <string>

#include "mmvae/dataset.hpp"

namespace fixtures {

inline mmvae::InstrumentSchema schema(const std::string& id, int items, int levels, bool flag_first = false) {
  mmvae::InstrumentSchema s;
  s.id = id;
  for (int i = 0; i < items; ++i) s.items.push_back({levels, flag_first && i == 0, true});
  return s;
}

inline mmvae::InstrumentObservation obs(int instrument, std::vector<int> levels) {
  mmvae::InstrumentObservation o;
  o.instrument = instrument;
  o.responses.cannot_perform.assign(levels.size(), 0);
  o.responses.levels = std::move(levels);
  return o;
}

// Patient with visits at the given times, one observation of instrument 0 per visit.
inline mmvae::PatientRecord patient(const std::string& id, double age, const std::vector<double>& times,
                                    double switch_time, const std::string& to, int items = 3) {
  mmvae::PatientRecord p;
  p.id = id;
  p.age_at_baseline = age;
  p.initial_treatment = "A";
  if (std::isfinite(switch_time)) p.switches.push_back({switch_time, to});
  p.static_covariates = {1.0};
  for (double t : times) {
    mmvae::Visit v;
    v.time = t;
    v.covariates = {t * 0.1};
    v.observations.push_back(obs(0, std::vector<int>(items, 1)));
    p.visits.push_back(v);
  }
  return p;
}

inline mmvae::Dataset small_dataset(int patients_per_treatment = 10) {
  mmvae::Dataset d;
  d.instruments = {schema("I0", 3, 4)};
  d.static_covariates = {"sex"};
  d.visit_covariates = {"vent"};
  for (int i = 0; i < 2 * patients_per_treatment; ++i) {
    auto p = patient("P" + std::to_string(100 + i), 2.0 + 0.1 * i, {0.0, 0.5, 1.0, 1.5, 2.0, 2.5}, 1.2,
                     i % 2 ? "B" : "C");
    p.static_covariates = {static_cast<double>(i % 2)};
    d.patients.push_back(p);
  }
  return d;
}

}  // namespace fixtures
