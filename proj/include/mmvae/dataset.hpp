#pragma once

// Registry-style longitudinal dataset: patients, visits, per-visit instrument
// administrations, cohort filters, and the delimited-text / binary exchange formats.

#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "mmvae/vae.hpp"

namespace mmvae {

struct TreatmentSwitch {
  double time = 0.0;  // years since the first visit
  std::string treatment;

  bool operator==(const TreatmentSwitch&) const = default;
};

struct InstrumentObservation {
  int instrument = 0;  // index into Dataset::instruments
  ItemResponses responses;

  bool operator==(const InstrumentObservation& o) const {
    return instrument == o.instrument && responses.levels == o.responses.levels &&
           responses.cannot_perform == o.responses.cannot_perform;
  }
};

struct Visit {
  double time = 0.0;                // years since the first visit
  std::vector<double> covariates;   // time-varying covariates, Dataset::visit_covariates order
  std::vector<InstrumentObservation> observations;

  bool operator==(const Visit&) const = default;
};

struct PatientRecord {
  std::string id;
  double age_at_baseline = 0.0;
  std::string initial_treatment;
  std::vector<TreatmentSwitch> switches;   // ascending in time
  std::vector<double> static_covariates;   // Dataset::static_covariates order
  std::vector<Visit> visits;               // ascending in time

  bool has_switch() const { return !switches.empty(); }
  /// First switch time, +inf when the patient never switched.
  double switch_time() const {
    return switches.empty() ? std::numeric_limits<double>::infinity() : switches.front().time;
  }
  std::string switch_treatment() const { return switches.empty() ? std::string{} : switches.front().treatment; }

  bool operator==(const PatientRecord&) const = default;
};

struct Dataset {
  std::vector<InstrumentSchema> instruments;
  std::vector<std::string> static_covariates;
  std::vector<std::string> visit_covariates;
  std::vector<PatientRecord> patients;

  int instrument_index(const std::string& id) const;  // -1 when absent
  std::size_t visit_count() const;
  std::size_t observation_count() const;
  /// Throws IngestionError describing the first structural violation.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

struct CohortRules {
  double min_treatment_years = 0.5;
  bool truncate_after_second_switch = true;
  bool require_switch = true;
  int min_visits = 4;
  int min_pre_switch_visits = 2;
  int min_post_switch_visits = 2;
  int min_patients_per_treatment = 10;
  double max_missing_fraction = 0.25;
};

struct FilterReport {
  int observations_excessive_missing = 0;
  int visits_without_observations = 0;
  int visits_after_second_switch = 0;
  int patients_without_switch = 0;
  int patients_short_treatment = 0;
  int patients_few_visits = 0;
  int patients_rare_treatment = 0;
  int patients_in = 0;
  int patients_out = 0;

  int total_exclusions() const {
    return observations_excessive_missing + visits_without_observations + visits_after_second_switch +
           patients_without_switch + patients_short_treatment + patients_few_visits + patients_rare_treatment;
  }
};

/// Applies the cohort filters in a fixed order; idempotent. Throws IngestionError on an empty cohort.
Dataset apply_cohort_filters(const Dataset& data, const CohortRules& rules, FilterReport* report = nullptr);

std::string format_number(double x);

void write_dataset_text(const Dataset& data, std::ostream& os);
Dataset read_dataset_text(std::istream& is);
void save_dataset(const Dataset& data, const std::string& path);  // .bin -> binary, otherwise text
Dataset load_dataset(const std::string& path);

std::vector<std::uint8_t> dataset_to_binary(const Dataset& data);
Dataset dataset_from_binary(const std::vector<std::uint8_t>& bytes);

/// Reads a dataset file and applies the cohort filters.
Dataset ingest(const std::string& path, const CohortRules& rules, FilterReport* report = nullptr);

}  // namespace mmvae
