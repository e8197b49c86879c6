// Command-line front end: simulate, fit, test, effect, inject, meta, report.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <sstream>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmvae/config.hpp"
#include "mmvae/errors.hpp"
#include "mmvae/pipeline.hpp"
#include "mmvae/random.hpp"
#include "mmvae/synthgen.hpp"

#ifndef MMVAE_VERSION
#define MMVAE_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mmvae;

namespace {

std::string sha256(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  int threads = 0;
};

// Collects outputs and writes manifest.json when the command finishes.
class Run {
 public:
  Run(std::string command, const CommonArgs& args) : command_(std::move(command)), out_(args.out) {
    start_ = std::chrono::steady_clock::now();
    if (args.threads > 0) setenv("MMVAE_THREADS", std::to_string(args.threads).c_str(), 1);
    config = args.config_path.empty() ? RunConfig{} : load_run_config(args.config_path);
    if (args.seed_given) config.seed = args.seed;
    config.apply_seed();
    config.validate();
    fs::create_directories(out_);
  }

  RunConfig config;
  json details = json::object();

  void set_dataset_hash(const std::string& bytes) { dataset_hash_ = sha256(bytes); }

  Dataset load_data(const std::string& path) {
    set_dataset_hash(slurp(path));
    FilterReport rep;
    auto data = ingest(path, config.cohort, &rep);
    details["filters"] = {{"patients_in", rep.patients_in},
                          {"patients_out", rep.patients_out},
                          {"observations_excessive_missing", rep.observations_excessive_missing},
                          {"visits_without_observations", rep.visits_without_observations},
                          {"visits_after_second_switch", rep.visits_after_second_switch},
                          {"patients_without_switch", rep.patients_without_switch},
                          {"patients_short_treatment", rep.patients_short_treatment},
                          {"patients_few_visits", rep.patients_few_visits},
                          {"patients_rare_treatment", rep.patients_rare_treatment}};
    return data;
  }

  template <typename Writer>
  void output(const std::string& name, Writer&& write) {
    const fs::path path = fs::path(out_) / name;
    {
      std::ofstream os(path, std::ios::binary);
      if (!os) throw IngestionError("cannot write " + path.string());
      write(os);
      if (!os) throw IngestionError("failed writing " + path.string());
    }
    outputs_.push_back(name);
  }

  void record(const std::string& name) { outputs_.push_back(name); }

  void finish() {
    output("config.json", [&](std::ostream& os) { os << run_config_to_json(config); });
    json outs = json::array();
    std::sort(outputs_.begin(), outputs_.end());
    for (const auto& name : outputs_) outs.push_back({{"path", name}, {"sha256", sha256(slurp(fs::path(out_) / name))}});
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json m = {{"command", command_},
              {"config_hash", sha256(run_config_to_json(config))},
              {"dataset_hash", dataset_hash_},
              {"seed", config.seed},
              {"software_version", MMVAE_VERSION},
              {"wall_time_seconds", wall},
              {"details", details},
              {"outputs", outs}};
    std::ofstream os(fs::path(out_) / "manifest.json");
    os << m.dump(2) << '\n';
    if (!os) throw IngestionError("cannot write manifest in " + out_);
  }

 private:
  std::string command_;
  std::string out_;
  std::string dataset_hash_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("-c,--config", args.config_path, "JSON configuration file")->check(CLI::ExistingFile);
  sub->add_option("-s,--seed", args.seed, "master seed (overrides the configuration)")
      ->each([&](const std::string&) { args.seed_given = true; });
  sub->add_option("-o,--out", args.out, "output directory")->required();
  sub->add_option("-t,--threads", args.threads, "worker threads (default: MMVAE_THREADS or all cores)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-instrument latent mixed-model analysis of longitudinal registry data"};
  app.set_version_flag("--version", MMVAE_VERSION);
  app.require_subcommand(1);

  CommonArgs args;
  std::string data_path, model_path, test_dir, block;
  bool binary = false;
  int replicates = 0;
  double horizon = 0.0, rate = 0.0, period = 0.0, max_horizon = 5.0, step = 0.25;

  auto* simulate = app.add_subcommand("simulate", "draw a synthetic registry with ground truth");
  add_common(simulate, args);
  simulate->add_flag("--binary", binary, "also write the binary dataset cache");

  auto* fitc = app.add_subcommand("fit", "train the joint model");
  add_common(fitc, args);
  fitc->add_option("-d,--data", data_path, "dataset file")->required()->check(CLI::ExistingFile);
  fitc->add_option("--resume", model_path, "continue training from a checkpoint")->check(CLI::ExistingFile);

  auto* test = app.add_subcommand("test", "knockoff bootstrap likelihood-ratio test");
  add_common(test, args);
  test->add_option("-d,--data", data_path, "dataset file")->required()->check(CLI::ExistingFile);
  test->add_option("-m,--model", model_path, "checkpoint of the fitted model")->required()->check(CLI::ExistingFile);
  test->add_option("-b,--block", block, "block to test (default from the configuration)");
  test->add_option("-r,--replicates", replicates, "bootstrap replicates (default from the configuration)");

  auto* effect = app.add_subcommand("effect", "item-level treatment-switch effects");
  add_common(effect, args);
  effect->add_option("-d,--data", data_path, "dataset file")->required()->check(CLI::ExistingFile);
  effect->add_option("-m,--model", model_path, "checkpoint of the fitted model")->required()->check(CLI::ExistingFile);
  effect->add_option("--horizon", horizon, "years after the switch");

  auto* inject = app.add_subcommand("inject", "add an artificial post-switch improvement to a dataset");
  add_common(inject, args);
  inject->add_option("-d,--data", data_path, "dataset file")->required()->check(CLI::ExistingFile);
  inject->add_option("--rate", rate, "points per period");
  inject->add_option("--period", period, "period in years");

  auto* meta = app.add_subcommand("meta", "per-instrument sum-score models and GLS meta-analysis");
  add_common(meta, args);
  meta->add_option("-d,--data", data_path, "dataset file")->required()->check(CLI::ExistingFile);

  auto* report = app.add_subcommand("report", "plot-ready tables for loss traces, null ECDFs and trajectories");
  add_common(report, args);
  report->add_option("-m,--model", model_path, "checkpoint")->check(CLI::ExistingFile);
  report->add_option("-d,--data", data_path, "dataset file (enables the trajectory table)")->check(CLI::ExistingFile);
  report->add_option("--test-dir", test_dir, "output directory of a test run (enables the ECDF table)")
      ->check(CLI::ExistingDirectory);
  report->add_option("--max-horizon", max_horizon, "trajectory grid end, years after the switch");
  report->add_option("--step", step, "trajectory grid step in years");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (simulate->parsed()) {
      Run run("simulate", args);
      auto gen = run.config.simulate;
      const auto reg = generate_registry(gen);
      std::ostringstream text;
      write_dataset_text(reg.data, text);
      run.set_dataset_hash(text.str());
      run.output("dataset.txt", [&](std::ostream& os) { os << text.str(); });
      if (binary) {
        const auto bytes = dataset_to_binary(reg.data);
        run.output("dataset.bin", [&](std::ostream& os) {
          os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        });
      }
      run.output("truth.json", [&](std::ostream& os) { write_truth_json(reg.truth, os); });
      run.details["patients"] = reg.data.patients.size();
      run.finish();
    } else if (fitc->parsed()) {
      Run run("fit", args);
      const auto data = run.load_data(data_path);
      TrainedModel model;
      if (!model_path.empty()) {
        const auto problem = training_problem(data, run.config);
        model = load_checkpoint(model_path);
        model.config.epochs = run.config.train.epochs;
        while (model.epochs_done < run.config.train.epochs) train_epoch(model, problem);
      } else {
        model = train_model(data, run.config);
      }
      run.output("model.ckpt", [&](std::ostream& os) {
        const auto bytes = checkpoint_to_bytes(model);
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      });
      run.output("loss_trace.tsv", [&](std::ostream& os) { write_loss_trace(model, os); });
      run.details["warnings"] = model.warnings;
      run.finish();
    } else if (test->parsed()) {
      Run run("test", args);
      if (!block.empty()) run.config.test_block = block;
      if (replicates > 0) run.config.bootstrap.replicates = replicates;
      const auto data = run.load_data(data_path);
      const auto model = load_checkpoint(model_path);
      const auto result = run_lr_test(model, data, run.config);
      run.output("lr_test.tsv", [&](std::ostream& os) { write_lr_test(result, os); });
      run.output("null_lambdas.tsv", [&](std::ostream& os) { write_null_lambdas(result.null, os); });
      run.details["failure_messages"] = result.null.failure_messages;
      run.finish();
      std::cout << result.block << ": lambda_obs " << format_number(result.lambda_obs) << ", p "
                << format_number(result.p_value) << '\n';
    } else if (effect->parsed()) {
      Run run("effect", args);
      if (horizon > 0.0) run.config.effect.horizon = horizon;
      const auto data = run.load_data(data_path);
      const auto model = load_checkpoint(model_path);
      const auto er = run_effects(model, data, run.config);
      run.output("effects.tsv", [&](std::ostream& os) { write_effect_table(er.report, os); });
      run.output("item_effects.tsv", [&](std::ostream& os) { write_item_effect_table(er.report, os); });
      run.output("patient_effects.tsv", [&](std::ostream& os) { write_patient_effects(er, data, os); });
      run.finish();
    } else if (inject->parsed()) {
      Run run("inject", args);
      if (rate > 0.0) run.config.inject.rate = rate;
      if (period > 0.0) run.config.inject.period = period;
      const auto data = run.load_data(data_path);
      Rng rng(derive_seed(run.config.seed, 4));
      InjectionReport rep;
      const auto out = inject_artificial_switch(data, run.config.inject, rng, &rep);
      run.output("dataset.txt", [&](std::ostream& os) { write_dataset_text(out, os); });
      run.details["injection"] = {{"points_added", rep.points_added},
                                  {"points_reallocated", rep.points_reallocated},
                                  {"points_dropped", rep.points_dropped},
                                  {"observations_changed", rep.observations_changed}};
      run.finish();
    } else if (meta->parsed()) {
      Run run("meta", args);
      const auto data = run.load_data(data_path);
      const auto mr = run_meta(data, run.config);
      run.output("instruments.tsv", [&](std::ostream& os) { write_instrument_table(mr.fits, os); });
      if (mr.pooled) {
        run.output("meta.tsv", [&](std::ostream& os) { write_meta_result(mr.result, mr.effect_names, os); });
        run.details["bootstrap_failures"] = mr.covariance.failure_messages;
      } else {
        run.details["note"] = mr.note;
      }
      run.finish();
    } else if (report->parsed()) {
      Run run("report", args);
      if (model_path.empty() && test_dir.empty())
        throw ValidationError("report needs --model and/or --test-dir");
      if (!model_path.empty()) {
        const auto model = load_checkpoint(model_path);
        run.output("figure_loss_trace.tsv", [&](std::ostream& os) { write_loss_trace(model, os); });
        if (!data_path.empty()) {
          const auto data = run.load_data(data_path);
          const auto problem = training_problem(data, run.config);
          run.output("figure_trajectories.tsv",
                     [&](std::ostream& os) { write_trajectories(model, problem, max_horizon, step, os); });
        }
      }
      if (!test_dir.empty()) {
        std::ifstream nl(fs::path(test_dir) / "null_lambdas.tsv");
        if (!nl) throw IngestionError("no null_lambdas.tsv in " + test_dir);
        const auto lambdas = read_null_lambdas(nl);
        std::ifstream lt(fs::path(test_dir) / "lr_test.tsv");
        if (!lt) throw IngestionError("no lr_test.tsv in " + test_dir);
        double lambda_obs = 0.0;
        int rd = 0;
        std::string line;
        while (std::getline(lt, line)) {
          const auto tab = line.find('\t');
          if (tab == std::string::npos) continue;
          const auto key = line.substr(0, tab), value = line.substr(tab + 1);
          if (key == "lambda_obs") lambda_obs = std::stod(value);
          if (key == "rd") rd = std::stoi(value);
        }
        if (rd <= 0) throw IngestionError("lr_test.tsv lacks a positive rd");
        run.output("figure_lambda_ecdf.tsv", [&](std::ostream& os) { write_lambda_ecdf(lambdas, rd, lambda_obs, os); });
      }
      run.finish();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
