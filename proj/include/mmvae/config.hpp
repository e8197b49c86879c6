#pragma once

// Run configuration (a JSON key/value tree), model checkpoints and the ground-truth sidecar.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mmvae/baseline.hpp"
#include "mmvae/dataset.hpp"
#include "mmvae/effects.hpp"
#include "mmvae/inference.hpp"
#include "mmvae/synthgen.hpp"
#include "mmvae/trainer.hpp"

namespace mmvae {

struct RunConfig {
  std::uint64_t seed = 1;  // every component seed is derived from this one
  GeneratorConfig simulate;
  CohortRules cohort;
  ModelSpec spec;
  TrainConfig train;
  BootstrapOptions bootstrap;   // knockoffs.k = 0 selects the tested block's column count
  std::string test_block = "switch";
  double alpha = 0.05;
  EffectOptions effect;
  int effect_seeds = 1;         // independent trainings averaged in the effect report
  InjectionOptions inject;
  BaselineOptions baseline;
  MetaBootstrapOptions meta;
  int meta_null_replicates = 99;

  RunConfig();
  /// Copies derive_seed(seed, tag) into every component seed.
  void apply_seed();
  void validate() const;
};

/// Missing keys keep their defaults; unknown keys are rejected with their path.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
/// Canonical JSON (sorted keys); the config hash is taken over this text.
std::string run_config_to_json(const RunConfig& config);

inline constexpr int kCheckpointVersion = 1;

std::vector<std::uint8_t> checkpoint_to_bytes(const TrainedModel& model);  // CBOR
TrainedModel checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes);
std::string checkpoint_to_json(const TrainedModel& model);
TrainedModel checkpoint_from_json(const std::string& text);
/// Paths ending in .json are written as JSON text, anything else as CBOR.
void save_checkpoint(const TrainedModel& model, const std::string& path);
TrainedModel load_checkpoint(const std::string& path);

void write_truth_json(const GroundTruth& truth, std::ostream& os);

}  // namespace mmvae
