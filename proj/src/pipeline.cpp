#include "mmvae/pipeline.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "mmvae/errors.hpp"
#include "mmvae/random.hpp"

namespace mmvae {

TrainingProblem training_problem(const Dataset& data, const RunConfig& config) {
  return make_problem(data, config.spec, config.train.normalizer);
}

TrainedModel train_model(const Dataset& data, const RunConfig& config) {
  return fit_joint(training_problem(data, config), config.train);
}

LrTestResult run_lr_test(const TrainedModel& model, const Dataset& data, const RunConfig& config) {
  const auto problem = training_problem(data, config);
  BootstrapOptions boot = config.bootstrap;
  if (boot.knockoffs.k == 0) boot.knockoffs.k = default_knockoff_count(problem.spec, config.test_block);
  boot.knockoffs.random_effect = problem.spec.is_random_block(config.test_block);
  const auto null = bootstrap_null(data, config.train, config.spec, boot);
  return lr_test(model, problem, config.test_block, null, config.alpha);
}

EffectRun run_effects(const TrainedModel& model, const Dataset& data, const RunConfig& config) {
  const auto problem = training_problem(data, config);
  EffectRun run;
  run.per_seed.push_back(switch_effects(model, problem, config.effect));
  for (int s = 1; s < config.effect_seeds; ++s) {
    TrainConfig tc = config.train;
    tc.seed = derive_seed(config.train.seed, static_cast<std::uint64_t>(s));
    run.per_seed.push_back(switch_effects(fit_joint(problem, tc), problem, config.effect));
  }
  if (run.per_seed.front().empty()) throw ValidationError("no patient qualifies for the effect horizon");
  run.report = aggregate_effects(run.per_seed, data.instruments, config.effect.horizon);
  return run;
}

MetaRun run_meta(const Dataset& data, const RunConfig& config) {
  BaselineOptions opts = config.baseline;
  opts.spec = config.spec;
  MetaRun run;
  run.fits = fit_all_instruments(data, opts);
  std::vector<Eigen::VectorXd> effects;
  for (const auto& f : run.fits)
    if (f.usable()) {
      effects.push_back(f.effect);
      if (run.effect_names.empty()) run.effect_names = f.effect_names;
    }
  if (effects.size() < 2) {
    run.note = "fewer than two instruments could be fit; no pooled result";
    return run;
  }
  run.covariance = bootstrap_cov(data, run.fits, opts, config.meta);
  run.result = meta_gls(effects, run.covariance.covariance);
  calibrate(run.result, meta_null_statistics(data, run.fits, run.covariance.covariance, opts,
                                             config.meta_null_replicates, derive_seed(config.meta.seed, 1)));
  run.pooled = true;
  return run;
}

void write_loss_trace(const TrainedModel& model, std::ostream& os) {
  os << "epoch\ttotal\trecon\tkl\tgamma_term\teta_term\tmixed_loglik\tfit_iterations\tfit_converged\tsaturated\n";
  for (const auto& t : model.trace)
    os << t.epoch << '\t' << format_number(t.loss.total) << '\t' << format_number(t.loss.recon) << '\t'
       << format_number(t.loss.kl) << '\t' << format_number(t.loss.gamma_term) << '\t'
       << format_number(t.loss.eta_term) << '\t' << format_number(t.mixed_loglik) << '\t' << t.fit_iterations << '\t'
       << (t.fit_converged ? 1 : 0) << '\t' << (t.saturated ? 1 : 0) << '\n';
}

void write_lr_test(const LrTestResult& r, std::ostream& os) {
  const auto s = r.null.summary();
  os << "quantity\tvalue\n";
  os << "block\t" << r.block << '\n';
  os << "lambda_obs\t" << format_number(r.lambda_obs) << '\n';
  os << "rd\t" << r.rd << '\n';
  os << "p_value\t" << format_number(r.p_value) << '\n';
  os << "alpha\t" << format_number(r.alpha) << '\n';
  os << "threshold\t" << format_number(r.threshold) << '\n';
  os << "chi2_threshold\t" << format_number(r.chi2_threshold) << '\n';
  os << "replicates\t" << r.null.lambdas.size() << '\n';
  os << "failed_replicates\t" << r.null.failed_replicates.size() << '\n';
  os << "null_mean\t" << format_number(s.mean) << '\n';
  os << "null_sd\t" << format_number(s.sd) << '\n';
  os << "null_q95\t" << format_number(s.q95) << '\n';
}

void write_null_lambdas(const BootstrapNull& null, std::ostream& os) {
  os << "replicate\tseed\tlambda\n";
  for (std::size_t b = 0; b < null.lambdas.size(); ++b)
    os << b << '\t' << null.seeds[b] << '\t' << format_number(null.lambdas[b]) << '\n';
}

std::vector<double> read_null_lambdas(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("replicate\t", 0) != 0)
    throw IngestionError("null statistics file lacks its header");
  std::vector<double> out;
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string b, seed, lambda;
    if (!std::getline(ls, b, '\t') || !std::getline(ls, seed, '\t') || !std::getline(ls, lambda, '\t'))
      throw IngestionError("malformed null statistics row " + std::to_string(row));
    try {
      out.push_back(std::stod(lambda));
    } catch (const std::exception&) {
      throw IngestionError("malformed null statistic at row " + std::to_string(row));
    }
  }
  return out;
}

void write_lambda_ecdf(const std::vector<double>& null_lambdas, int rd, double lambda_obs, std::ostream& os) {
  const Ecdf ecdf(null_lambdas);
  os << "lambda\tecdf\tchi2_cdf\tobserved\n";
  for (double x : ecdf.sorted())
    os << format_number(x) << '\t' << format_number(ecdf(x)) << '\t' << format_number(chi_squared_cdf(x, rd))
       << "\t0\n";
  os << format_number(lambda_obs) << '\t' << format_number(ecdf(lambda_obs)) << '\t'
     << format_number(chi_squared_cdf(lambda_obs, rd)) << "\t1\n";
}

void write_trajectories(const TrainedModel& model, const TrainingProblem& problem, double max_horizon, double step,
                        std::ostream& os) {
  if (!(step > 0.0) || !(max_horizon >= step)) throw ValidationError("trajectory grid needs 0 < step <= max horizon");
  os << "patient\tinstrument\tmax_score\ttime\tkind\tsum_score\n";
  const auto& data = problem.data;
  for (std::size_t i = 0; i < data.patients.size(); ++i) {
    const auto& p = data.patients[i];
    if (!p.has_switch()) continue;
    for (const auto& v : p.visits)
      for (const auto& o : v.observations) {
        const auto& schema = data.instruments[static_cast<std::size_t>(o.instrument)];
        double total = 0.0;
        for (std::size_t k = 0; k < schema.items.size(); ++k)
          if (schema.items[k].official && o.responses.levels[k] > 0 && !o.responses.cannot_perform[k])
            total += o.responses.levels[k];
        os << p.id << '\t' << schema.id << '\t' << schema.max_sum_score() << '\t' << format_number(v.time)
           << "\tobserved\t" << format_number(total) << '\n';
      }
    const int steps = static_cast<int>(std::floor(max_horizon / step + 1e-9));
    for (int s = 1; s <= steps; ++s) {
      const auto e = switch_effect(model, problem, i, s * step);
      for (std::size_t l = 0; l < data.instruments.size(); ++l) {
        const auto& schema = data.instruments[l];
        const auto t = format_number(p.switch_time() + s * step);
        os << p.id << '\t' << schema.id << '\t' << schema.max_sum_score() << '\t' << t << "\tfactual\t"
           << format_number(e.instruments[l].factual_sum) << '\n';
        os << p.id << '\t' << schema.id << '\t' << schema.max_sum_score() << '\t' << t << "\tcounterfactual\t"
           << format_number(e.instruments[l].counterfactual_sum) << '\n';
      }
    }
  }
}

void write_patient_effects(const EffectRun& run, const Dataset& data, std::ostream& os) {
  os << "seed\tpatient\tinstrument\tfactual\tcounterfactual\tdifference\n";
  for (std::size_t s = 0; s < run.per_seed.size(); ++s)
    for (const auto& pe : run.per_seed[s])
      for (std::size_t l = 0; l < pe.instruments.size(); ++l) {
        const auto& e = pe.instruments[l];
        os << s << '\t' << data.patients[pe.patient].id << '\t' << data.instruments[l].id << '\t'
           << format_number(e.factual_sum) << '\t' << format_number(e.counterfactual_sum) << '\t'
           << format_number(e.sum_difference) << '\n';
      }
}

}  // namespace mmvae
