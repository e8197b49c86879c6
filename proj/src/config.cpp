#include "mmvae/config.hpp"

#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mmvae/errors.hpp"

namespace mmvae {

namespace {

using json = nlohmann::json;

// Field access on one JSON object that remembers which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ValidationError(path_ + " must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (const json* v = child(key)) {
      try {
        out = v->get<T>();
      } catch (const json::exception& e) {
        throw ValidationError(path_ + "." + key + ": " + e.what());
      }
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ValidationError("unknown configuration key " + path_ + "." + item.key());
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

double number(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd vec_from(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = number(j[i]);
  return v;
}

json mat_json(const Eigen::MatrixXd& m) {
  json data = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Eigen::MatrixXd mat_from(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ShapeError("matrix data length mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = number(data[static_cast<std::size_t>(r * cols + c)]);
  return m;
}

// ---- configuration sections ----

json lbfgs_json(const LbfgsOptions& o) {
  return {{"memory", o.memory},
          {"max_iterations", o.max_iterations},
          {"gradient_tolerance", o.gradient_tolerance},
          {"initial_step", o.initial_step},
          {"wolfe_c1", o.wolfe_c1},
          {"wolfe_c2", o.wolfe_c2},
          {"max_line_search", o.max_line_search},
          {"min_relative_decrease", o.min_relative_decrease},
          {"max_stalled_iterations", o.max_stalled_iterations}};
}

void read_lbfgs(const json& j, const std::string& path, LbfgsOptions& o) {
  Reader r(j, path);
  r.get("memory", o.memory);
  r.get("max_iterations", o.max_iterations);
  r.get("gradient_tolerance", o.gradient_tolerance);
  r.get("initial_step", o.initial_step);
  r.get("wolfe_c1", o.wolfe_c1);
  r.get("wolfe_c2", o.wolfe_c2);
  r.get("max_line_search", o.max_line_search);
  r.get("min_relative_decrease", o.min_relative_decrease);
  r.get("max_stalled_iterations", o.max_stalled_iterations);
  r.finish();
}

json train_json(const TrainConfig& c, bool with_seed) {
  json j = {{"latent_dim", c.latent_dim},
            {"beta", c.beta},
            {"gamma", c.gamma},
            {"eta", c.eta},
            {"epochs", c.epochs},
            {"vae_updates_per_epoch", c.vae_updates_per_epoch},
            {"mc_samples", c.mc_samples},
            {"hidden", c.hidden},
            {"learning_rate", c.learning_rate},
            {"normalizer", to_string(c.normalizer)},
            {"refit_criterion", to_string(c.refit_criterion)},
            {"lbfgs", lbfgs_json(c.lbfgs)}};
  if (with_seed) j["seed"] = c.seed;
  return j;
}

void read_train(const json& j, const std::string& path, TrainConfig& c, bool with_seed) {
  Reader r(j, path);
  r.get("latent_dim", c.latent_dim);
  r.get("beta", c.beta);
  r.get("gamma", c.gamma);
  r.get("eta", c.eta);
  r.get("epochs", c.epochs);
  r.get("vae_updates_per_epoch", c.vae_updates_per_epoch);
  r.get("mc_samples", c.mc_samples);
  r.get("hidden", c.hidden);
  r.get("learning_rate", c.learning_rate);
  std::string s;
  if (r.child("normalizer")) {
    r.get("normalizer", s);
    c.normalizer = normalizer_from_string(s);
  }
  if (r.child("refit_criterion")) {
    r.get("refit_criterion", s);
    c.refit_criterion = criterion_from_string(s);
  }
  if (const json* l = r.child("lbfgs")) read_lbfgs(*l, r.at("lbfgs"), c.lbfgs);
  if (with_seed) r.get("seed", c.seed);
  r.finish();
}

json spec_json(const ModelSpec& s) {
  return {{"covariates", s.covariates},
          {"treatments", s.treatments},
          {"include_switch", s.include_switch},
          {"include_age", s.include_age},
          {"age_interactions", s.age_interactions},
          {"intercept", s.intercept},
          {"random_intercept", s.random_intercept},
          {"random_pre_switch", s.random_pre_switch},
          {"random_post_switch", s.random_post_switch},
          {"fixed_knockoffs", s.fixed_knockoffs},
          {"random_knockoffs", s.random_knockoffs}};
}

void read_spec(const json& j, const std::string& path, ModelSpec& s) {
  Reader r(j, path);
  r.get("covariates", s.covariates);
  r.get("treatments", s.treatments);
  r.get("include_switch", s.include_switch);
  r.get("include_age", s.include_age);
  r.get("age_interactions", s.age_interactions);
  r.get("intercept", s.intercept);
  r.get("random_intercept", s.random_intercept);
  r.get("random_pre_switch", s.random_pre_switch);
  r.get("random_post_switch", s.random_post_switch);
  r.get("fixed_knockoffs", s.fixed_knockoffs);
  r.get("random_knockoffs", s.random_knockoffs);
  r.finish();
}

json schema_json(const InstrumentSchema& s) {
  json items = json::array();
  for (const auto& it : s.items)
    items.push_back({{"levels", it.levels}, {"cannot_perform_flag", it.cannot_perform_flag}, {"official", it.official}});
  return {{"id", s.id}, {"items", items}};
}

InstrumentSchema schema_from(const json& j, const std::string& path) {
  Reader r(j, path);
  InstrumentSchema s;
  r.get("id", s.id);
  if (const json* items = r.child("items")) {
    for (std::size_t k = 0; k < items->size(); ++k) {
      Reader ir((*items)[k], r.at("items") + "[" + std::to_string(k) + "]");
      ItemSpec it;
      ir.get("levels", it.levels);
      ir.get("cannot_perform_flag", it.cannot_perform_flag);
      ir.get("official", it.official);
      ir.finish();
      s.items.push_back(it);
    }
  }
  r.finish();
  return s;
}

json generator_json(const GeneratorConfig& g) {
  json instruments = "registry";
  if (!g.instruments.empty()) {
    instruments = json::array();
    for (const auto& t : g.instruments)
      instruments.push_back({{"schema", schema_json(t.schema)},
                             {"age_min", t.age_min},
                             {"age_max", t.age_max},
                             {"probability", t.probability},
                             {"difficulty", t.difficulty},
                             {"discrimination", t.discrimination}});
  }
  return {{"patients", g.patients},
          {"instruments", instruments},
          {"true_latent_dim", g.true_latent_dim},
          {"treatments", g.treatments},
          {"treatment_strength", g.treatment_strength},
          {"switch_slope", g.switch_slope},
          {"age_slope", g.age_slope},
          {"random_intercept_sd", g.random_intercept_sd},
          {"random_pre_slope_sd", g.random_pre_slope_sd},
          {"random_post_slope_sd", g.random_post_slope_sd},
          {"residual_sd", g.residual_sd},
          {"covariate_effect_sd", g.covariate_effect_sd},
          {"baseline_age_median", g.baseline_age_median},
          {"baseline_age_log_sd", g.baseline_age_log_sd},
          {"followup_min", g.followup_min},
          {"followup_max", g.followup_max},
          {"gap_offset", g.gap_offset},
          {"gap_shape", g.gap_shape},
          {"gap_scale", g.gap_scale},
          {"missing_item_rate", g.missing_item_rate},
          {"covariates", g.covariates}};
}

void read_generator(const json& j, const std::string& path, GeneratorConfig& g) {
  Reader r(j, path);
  r.get("patients", g.patients);
  if (const json* ins = r.child("instruments")) {
    const auto at = r.at("instruments");
    if (ins->is_string()) {
      if (ins->get<std::string>() != "registry") throw ValidationError(at + " must be \"registry\", a list or {\"compact\": ...}");
      g.instruments.clear();
    } else if (ins->is_object()) {
      Reader outer(*ins, at);
      const json* c = outer.child("compact");
      outer.finish();
      if (!c) throw ValidationError(at + " object must hold a \"compact\" entry");
      Reader cr(*c, at + ".compact");
      int count = 2, items = 6, levels = 4;
      double probability = 0.7;
      cr.get("count", count);
      cr.get("items", items);
      cr.get("levels", levels);
      cr.get("probability", probability);
      cr.finish();
      g.instruments = compact_instruments(count, items, levels, probability);
    } else if (ins->is_array()) {
      g.instruments.clear();
      for (std::size_t k = 0; k < ins->size(); ++k) {
        const auto p = at + "[" + std::to_string(k) + "]";
        Reader tr((*ins)[k], p);
        InstrumentTemplate t;
        if (const json* s = tr.child("schema")) t.schema = schema_from(*s, p + ".schema");
        tr.get("age_min", t.age_min);
        tr.get("age_max", t.age_max);
        tr.get("probability", t.probability);
        tr.get("difficulty", t.difficulty);
        tr.get("discrimination", t.discrimination);
        tr.finish();
        g.instruments.push_back(t);
      }
    } else {
      throw ValidationError(at + " has an unsupported type");
    }
  }
  r.get("true_latent_dim", g.true_latent_dim);
  r.get("treatments", g.treatments);
  r.get("treatment_strength", g.treatment_strength);
  r.get("switch_slope", g.switch_slope);
  r.get("age_slope", g.age_slope);
  r.get("random_intercept_sd", g.random_intercept_sd);
  r.get("random_pre_slope_sd", g.random_pre_slope_sd);
  r.get("random_post_slope_sd", g.random_post_slope_sd);
  r.get("residual_sd", g.residual_sd);
  r.get("covariate_effect_sd", g.covariate_effect_sd);
  r.get("baseline_age_median", g.baseline_age_median);
  r.get("baseline_age_log_sd", g.baseline_age_log_sd);
  r.get("followup_min", g.followup_min);
  r.get("followup_max", g.followup_max);
  r.get("gap_offset", g.gap_offset);
  r.get("gap_shape", g.gap_shape);
  r.get("gap_scale", g.gap_scale);
  r.get("missing_item_rate", g.missing_item_rate);
  r.get("covariates", g.covariates);
  r.finish();
}

json cohort_json(const CohortRules& c) {
  return {{"min_treatment_years", c.min_treatment_years},
          {"truncate_after_second_switch", c.truncate_after_second_switch},
          {"require_switch", c.require_switch},
          {"min_visits", c.min_visits},
          {"min_pre_switch_visits", c.min_pre_switch_visits},
          {"min_post_switch_visits", c.min_post_switch_visits},
          {"min_patients_per_treatment", c.min_patients_per_treatment},
          {"max_missing_fraction", c.max_missing_fraction}};
}

void read_cohort(const json& j, const std::string& path, CohortRules& c) {
  Reader r(j, path);
  r.get("min_treatment_years", c.min_treatment_years);
  r.get("truncate_after_second_switch", c.truncate_after_second_switch);
  r.get("require_switch", c.require_switch);
  r.get("min_visits", c.min_visits);
  r.get("min_pre_switch_visits", c.min_pre_switch_visits);
  r.get("min_post_switch_visits", c.min_post_switch_visits);
  r.get("min_patients_per_treatment", c.min_patients_per_treatment);
  r.get("max_missing_fraction", c.max_missing_fraction);
  r.finish();
}

json bootstrap_json(const BootstrapOptions& b) {
  return {{"replicates", b.replicates},
          {"max_failure_fraction", b.max_failure_fraction},
          {"parallel", b.parallel},
          {"knockoffs",
           {{"k", b.knockoffs.k}, {"level", to_string(b.knockoffs.level)}, {"random_effect", b.knockoffs.random_effect}}}};
}

void read_bootstrap(const json& j, const std::string& path, BootstrapOptions& b) {
  Reader r(j, path);
  r.get("replicates", b.replicates);
  r.get("max_failure_fraction", b.max_failure_fraction);
  r.get("parallel", b.parallel);
  if (const json* k = r.child("knockoffs")) {
    Reader kr(*k, r.at("knockoffs"));
    kr.get("k", b.knockoffs.k);
    std::string level;
    if (kr.child("level")) {
      kr.get("level", level);
      b.knockoffs.level = knockoff_level_from_string(level);
    }
    kr.get("random_effect", b.knockoffs.random_effect);
    kr.finish();
  }
  r.finish();
}

json baseline_json(const BaselineOptions& b) {
  return {{"min_patients", b.min_patients},
          {"min_visits", b.min_visits},
          {"min_pre_switch_visits", b.min_pre_switch_visits},
          {"min_post_switch_visits", b.min_post_switch_visits},
          {"criterion", to_string(b.fit.criterion)},
          {"lbfgs", lbfgs_json(b.fit.lbfgs)}};
}

void read_baseline(const json& j, const std::string& path, BaselineOptions& b) {
  Reader r(j, path);
  r.get("min_patients", b.min_patients);
  r.get("min_visits", b.min_visits);
  r.get("min_pre_switch_visits", b.min_pre_switch_visits);
  r.get("min_post_switch_visits", b.min_post_switch_visits);
  if (r.child("criterion")) {
    std::string s;
    r.get("criterion", s);
    b.fit.criterion = criterion_from_string(s);
  }
  if (const json* l = r.child("lbfgs")) read_lbfgs(*l, r.at("lbfgs"), b.fit.lbfgs);
  r.finish();
}

// ---- checkpoint ----

json mlp_json(const nn::MlpParams& p) {
  json layers = json::array();
  for (const auto& l : p.layers) layers.push_back({{"weight", mat_json(l.weight)}, {"bias", vec_json(l.bias)}});
  return layers;
}

nn::MlpParams mlp_from(const json& j) {
  nn::MlpParams p;
  for (const auto& l : j) p.layers.push_back({mat_from(l.at("weight")), vec_from(l.at("bias"))});
  return p;
}

json checkpoint_json(const TrainedModel& m) {
  json j;
  j["format_version"] = kCheckpointVersion;
  j["config"] = train_json(m.config, true);
  j["spec"] = spec_json(m.spec);
  json st = json::object();
  for (const auto& [name, ms] : m.standardization.stats) st[name] = {ms.first, ms.second};
  j["standardization"] = st;
  json vaes = json::array();
  for (const auto& v : m.vaes)
    vaes.push_back({{"encoder", mlp_json(v.encoder)}, {"decoder", mlp_json(v.decoder)}, {"cutpoint_raw", vec_json(v.cutpoint_raw)}});
  j["vaes"] = vaes;
  json opts = json::array();
  for (const auto& a : m.optimizers)
    opts.push_back({{"first_moment", vec_json(a.first_moment)},
                    {"second_moment", vec_json(a.second_moment)},
                    {"step", a.step},
                    {"learning_rate", a.learning_rate},
                    {"beta1", a.beta1},
                    {"beta2", a.beta2},
                    {"epsilon", a.epsilon}});
  j["optimizers"] = opts;
  j["mixed"] = {{"B", mat_json(m.mixed.B)}, {"log_phi", vec_json(m.mixed.log_phi)}, {"log_sigma", vec_json(m.mixed.log_sigma)}};
  j["blups"] = json::array();
  for (const auto& b : m.blups) j["blups"].push_back(mat_json(b));
  j["latents"] = json::array();
  for (const auto& z : m.latents) j["latents"].push_back(mat_json(z));
  json trace = json::array();
  for (const auto& t : m.trace)
    trace.push_back({{"epoch", t.epoch},
                     {"recon", t.loss.recon},
                     {"kl", t.loss.kl},
                     {"gamma_term", t.loss.gamma_term},
                     {"eta_term", t.loss.eta_term},
                     {"total", t.loss.total},
                     {"mixed_loglik", t.mixed_loglik},
                     {"fit_iterations", t.fit_iterations},
                     {"fit_converged", t.fit_converged},
                     {"fit_failed", t.fit_failed},
                     {"saturated", t.saturated}});
  j["trace"] = trace;
  j["warnings"] = m.warnings;
  j["rng_state"] = m.rng_state;
  j["epochs_done"] = m.epochs_done;
  return j;
}

TrainedModel checkpoint_from(const json& j) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      throw ValidationError("unsupported checkpoint format version " + std::to_string(version));
    TrainedModel m;
    read_train(j.at("config"), "config", m.config, true);
    read_spec(j.at("spec"), "spec", m.spec);
    for (const auto& item : j.at("standardization").items())
      m.standardization.stats[item.key()] = {number(item.value().at(0)), number(item.value().at(1))};
    for (const auto& v : j.at("vaes"))
      m.vaes.push_back({mlp_from(v.at("encoder")), mlp_from(v.at("decoder")), vec_from(v.at("cutpoint_raw"))});
    for (const auto& a : j.at("optimizers")) {
      nn::AdamState s;
      s.first_moment = vec_from(a.at("first_moment"));
      s.second_moment = vec_from(a.at("second_moment"));
      s.step = a.at("step").get<std::int64_t>();
      s.learning_rate = number(a.at("learning_rate"));
      s.beta1 = number(a.at("beta1"));
      s.beta2 = number(a.at("beta2"));
      s.epsilon = number(a.at("epsilon"));
      m.optimizers.push_back(s);
    }
    const auto& mixed = j.at("mixed");
    m.mixed.B = mat_from(mixed.at("B"));
    m.mixed.log_phi = vec_from(mixed.at("log_phi"));
    m.mixed.log_sigma = vec_from(mixed.at("log_sigma"));
    for (const auto& b : j.at("blups")) m.blups.push_back(mat_from(b));
    for (const auto& z : j.at("latents")) m.latents.push_back(mat_from(z));
    for (const auto& t : j.at("trace")) {
      EpochTrace e;
      e.epoch = t.at("epoch").get<int>();
      e.loss.recon = number(t.at("recon"));
      e.loss.kl = number(t.at("kl"));
      e.loss.gamma_term = number(t.at("gamma_term"));
      e.loss.eta_term = number(t.at("eta_term"));
      e.loss.total = number(t.at("total"));
      e.mixed_loglik = number(t.at("mixed_loglik"));
      e.fit_iterations = t.at("fit_iterations").get<int>();
      e.fit_converged = t.at("fit_converged").get<bool>();
      e.fit_failed = t.at("fit_failed").get<bool>();
      e.saturated = t.at("saturated").get<bool>();
      m.trace.push_back(e);
    }
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
    m.rng_state = j.at("rng_state").get<std::string>();
    m.epochs_done = j.at("epochs_done").get<int>();
    if (m.optimizers.size() != m.vaes.size()) throw ValidationError("checkpoint optimizer count does not match");
    return m;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

RunConfig::RunConfig() {
  bootstrap.knockoffs.k = 0;
  simulate.patients = 522;
}

void RunConfig::apply_seed() {
  simulate.seed = derive_seed(seed, 1);
  train.seed = derive_seed(seed, 2);
  bootstrap.seed = derive_seed(seed, 3);
  meta.seed = derive_seed(seed, 5);
}

void RunConfig::validate() const {
  simulate.validate();
  train.validate();
  baseline.validate();
  if (bootstrap.knockoffs.k < 0) throw ValidationError("knockoff count must be non-negative");
  if (bootstrap.replicates < 1) throw ValidationError("bootstrap replicates must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
  if (effect_seeds < 1) throw ValidationError("effect_seeds must be positive");
  if (!(effect.horizon > 0.0)) throw ValidationError("effect horizon must be positive");
  if (!(inject.rate > 0.0 && inject.period > 0.0)) throw ValidationError("injection rate and period must be positive");
  if (meta.replicates < 2 || meta_null_replicates < 1) throw ValidationError("meta replicate counts too small");
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("configuration is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Reader r(j, "config");
  r.get("seed", c.seed);
  if (const json* v = r.child("simulate")) read_generator(*v, "config.simulate", c.simulate);
  if (const json* v = r.child("cohort")) read_cohort(*v, "config.cohort", c.cohort);
  if (const json* v = r.child("model")) read_spec(*v, "config.model", c.spec);
  if (const json* v = r.child("train")) read_train(*v, "config.train", c.train, false);
  if (const json* v = r.child("test")) {
    Reader t(*v, "config.test");
    t.get("block", c.test_block);
    t.get("alpha", c.alpha);
    if (const json* b = t.child("bootstrap")) read_bootstrap(*b, "config.test.bootstrap", c.bootstrap);
    t.finish();
  }
  if (const json* v = r.child("effect")) {
    Reader e(*v, "config.effect");
    e.get("horizon", c.effect.horizon);
    e.get("observed_only", c.effect.observed_only);
    e.get("seeds", c.effect_seeds);
    e.finish();
  }
  if (const json* v = r.child("inject")) {
    Reader e(*v, "config.inject");
    e.get("rate", c.inject.rate);
    e.get("period", c.inject.period);
    e.finish();
  }
  if (const json* v = r.child("meta")) {
    Reader e(*v, "config.meta");
    if (const json* b = e.child("baseline")) read_baseline(*b, "config.meta.baseline", c.baseline);
    e.get("bootstrap_replicates", c.meta.replicates);
    e.get("max_failure_fraction", c.meta.max_failure_fraction);
    e.get("null_replicates", c.meta_null_replicates);
    e.finish();
  }
  r.finish();
  c.validate();
  c.apply_seed();
  return c;
}

RunConfig load_run_config(const std::string& path) { return run_config_from_json(read_file(path)); }

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["simulate"] = generator_json(c.simulate);
  j["cohort"] = cohort_json(c.cohort);
  j["model"] = spec_json(c.spec);
  j["train"] = train_json(c.train, false);
  j["test"] = {{"block", c.test_block}, {"alpha", c.alpha}, {"bootstrap", bootstrap_json(c.bootstrap)}};
  j["effect"] = {{"horizon", c.effect.horizon}, {"observed_only", c.effect.observed_only}, {"seeds", c.effect_seeds}};
  j["inject"] = {{"rate", c.inject.rate}, {"period", c.inject.period}};
  j["meta"] = {{"baseline", baseline_json(c.baseline)},
               {"bootstrap_replicates", c.meta.replicates},
               {"max_failure_fraction", c.meta.max_failure_fraction},
               {"null_replicates", c.meta_null_replicates}};
  return j.dump(2) + "\n";
}

std::vector<std::uint8_t> checkpoint_to_bytes(const TrainedModel& model) { return json::to_cbor(checkpoint_json(model)); }

TrainedModel checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes) {
  json j;
  try {
    j = json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint is not valid CBOR: ") + e.what());
  }
  return checkpoint_from(j);
}

std::string checkpoint_to_json(const TrainedModel& model) { return checkpoint_json(model).dump() + "\n"; }

TrainedModel checkpoint_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  return checkpoint_from(j);
}

void save_checkpoint(const TrainedModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path);
  if (ends_with(path, ".json")) {
    out << checkpoint_to_json(model);
  } else {
    const auto bytes = checkpoint_to_bytes(model);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw IngestionError("failed writing " + path);
}

TrainedModel load_checkpoint(const std::string& path) {
  const auto text = read_file(path);
  if (ends_with(path, ".json")) return checkpoint_from_json(text);
  return checkpoint_from_bytes(std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_truth_json(const GroundTruth& truth, std::ostream& os) {
  json j;
  j["config"] = generator_json(truth.config);
  j["config"]["seed"] = truth.config.seed;
  json items = json::array();
  for (const auto& ip : truth.items) {
    json cps = json::array();
    for (const auto& c : ip.cutpoints) cps.push_back(vec_json(c));
    items.push_back({{"loadings", mat_json(ip.loadings)}, {"cutpoints", cps}});
  }
  j["items"] = items;
  j["covariate_effects"] = mat_json(truth.covariate_effects);
  json patients = json::array();
  for (const auto& p : truth.patients) {
    json sums = json::array();
    for (const auto& s : p.expected_sum_scores) sums.push_back(vec_json(s));
    patients.push_back({{"id", p.id},
                        {"latent", mat_json(p.latent)},
                        {"latent_mean", mat_json(p.latent_mean)},
                        {"random_effects", mat_json(p.random_effects)},
                        {"expected_sum_scores", sums}});
  }
  j["patients"] = patients;
  os << j.dump() << '\n';
}

}  // namespace mmvae
