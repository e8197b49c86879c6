#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mmvae/baseline.hpp"
#include "mmvae/config.hpp"
#include "mmvae/errors.hpp"
#include "mmvae/mlmm.hpp"
#include "mmvae/pipeline.hpp"
#include "mmvae/synthgen.hpp"

namespace py = pybind11;
using namespace mmvae;

namespace {

RunConfig make_config(const std::optional<std::string>& json, std::optional<std::uint64_t> seed) {
  RunConfig c = json ? run_config_from_json(*json) : RunConfig{};
  if (seed) c.seed = *seed;
  c.apply_seed();
  c.validate();
  return c;
}

py::dict trace_row(const EpochTrace& t) {
  py::dict d;
  d["epoch"] = t.epoch;
  d["total"] = t.loss.total;
  d["recon"] = t.loss.recon;
  d["kl"] = t.loss.kl;
  d["gamma_term"] = t.loss.gamma_term;
  d["eta_term"] = t.loss.eta_term;
  d["mixed_loglik"] = t.mixed_loglik;
  d["fit_converged"] = t.fit_converged;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Latent mixed-model analysis of multi-instrument longitudinal data";

  py::register_exception<Error>(m, "MmvaeError", PyExc_RuntimeError);

  py::class_<RunConfig>(m, "Config")
      .def(py::init([](std::optional<std::string> json, std::optional<std::uint64_t> seed) {
             return make_config(json, seed);
           }),
           py::arg("json") = py::none(), py::arg("seed") = py::none())
      .def_readonly("seed", &RunConfig::seed)
      .def("to_json", &run_config_to_json);

  py::class_<Dataset>(m, "Dataset")
      .def_static("load", &load_dataset, py::arg("path"))
      .def_static("from_text",
                  [](const std::string& text) {
                    std::istringstream is(text);
                    return read_dataset_text(is);
                  })
      .def("save", [](const Dataset& d, const std::string& path) { save_dataset(d, path); })
      .def("to_text",
           [](const Dataset& d) {
             std::ostringstream os;
             write_dataset_text(d, os);
             return os.str();
           })
      .def_property_readonly("patient_count", [](const Dataset& d) { return d.patients.size(); })
      .def_property_readonly("instruments",
                             [](const Dataset& d) {
                               std::vector<std::string> ids;
                               for (const auto& s : d.instruments) ids.push_back(s.id);
                               return ids;
                             })
      .def("sum_scores", [](const Dataset& d, int instrument) {
        std::vector<std::tuple<std::size_t, std::size_t, double>> out;
        for (const auto& s : sum_scores(d, instrument)) out.emplace_back(s.patient, s.visit, s.total);
        return out;
      });

  py::class_<TrainedModel>(m, "Model")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const TrainedModel& t, const std::string& path) { save_checkpoint(t, path); })
      .def_property_readonly("latent_dim", [](const TrainedModel& t) { return t.config.latent_dim; })
      .def_property_readonly("epochs_done", [](const TrainedModel& t) { return t.epochs_done; })
      .def_property_readonly("fixed_effects", [](const TrainedModel& t) { return t.mixed.B; })
      .def_property_readonly("trace", [](const TrainedModel& t) {
        py::list rows;
        for (const auto& e : t.trace) rows.append(trace_row(e));
        return rows;
      });

  m.def(
      "simulate",
      [](const RunConfig& c) {
        const auto reg = generate_registry(c.simulate);
        std::ostringstream truth;
        write_truth_json(reg.truth, truth);
        return py::make_tuple(reg.data, truth.str());
      },
      py::arg("config"), "Synthetic registry and its ground-truth JSON.");

  m.def("train", &train_model, py::arg("dataset"), py::arg("config"), py::call_guard<py::gil_scoped_release>());

  m.def(
      "lr_test",
      [](const TrainedModel& model, const Dataset& data, const RunConfig& c) {
        LrTestResult r;
        {
          py::gil_scoped_release release;
          r = run_lr_test(model, data, c);
        }
        py::dict d;
        d["block"] = r.block;
        d["lambda_obs"] = r.lambda_obs;
        d["rd"] = r.rd;
        d["p_value"] = r.p_value;
        d["threshold"] = r.threshold;
        d["chi2_threshold"] = r.chi2_threshold;
        d["null_lambdas"] = r.null.lambdas;
        return d;
      },
      py::arg("model"), py::arg("dataset"), py::arg("config"));

  m.def(
      "effects",
      [](const TrainedModel& model, const Dataset& data, const RunConfig& c) {
        EffectRun run;
        {
          py::gil_scoped_release release;
          run = run_effects(model, data, c);
        }
        py::list rows;
        for (const auto& s : run.report.instruments) {
          py::dict d;
          d["instrument"] = s.instrument;
          d["max_score"] = s.max_score;
          d["mean"] = s.mean;
          d["sd"] = s.sd;
          d["percent"] = s.percent;
          d["item_mean"] = s.item_mean;
          d["sign_stable"] = s.sign_stable;
          d["patients"] = s.patients;
          rows.append(d);
        }
        return rows;
      },
      py::arg("model"), py::arg("dataset"), py::arg("config"));

  m.def(
      "inject",
      [](const Dataset& data, double rate, double period, std::uint64_t seed) {
        Rng rng(seed);
        InjectionReport rep;
        auto out = inject_artificial_switch(data, {rate, period}, rng, &rep);
        py::dict d;
        d["points_added"] = rep.points_added;
        d["points_reallocated"] = rep.points_reallocated;
        d["points_dropped"] = rep.points_dropped;
        return py::make_tuple(out, d);
      },
      py::arg("dataset"), py::arg("rate") = 1.0, py::arg("period") = 0.5, py::arg("seed") = 1);

  m.def(
      "meta",
      [](const Dataset& data, const RunConfig& c) {
        MetaRun run;
        {
          py::gil_scoped_release release;
          run = run_meta(data, c);
        }
        py::list fits;
        for (const auto& f : run.fits) {
          py::dict d;
          d["instrument"] = f.instrument;
          d["eligible_patients"] = f.eligible_patients;
          d["status"] = to_string(f.status);
          d["effect_names"] = f.effect_names;
          d["effect"] = f.effect;
          fits.append(d);
        }
        py::dict out;
        out["fits"] = fits;
        out["pooled"] = run.pooled ? py::cast(run.result.pooled) : py::none();
        out["statistic"] = run.pooled ? py::cast(run.result.statistic) : py::none();
        out["p_value"] = run.pooled ? py::cast(run.result.p_value) : py::none();
        return out;
      },
      py::arg("dataset"), py::arg("config"));

  m.def(
      "fit_lmm",
      [](const std::vector<Eigen::MatrixXd>& X, const std::vector<Eigen::MatrixXd>& T,
         const std::vector<Eigen::MatrixXd>& Z, const std::string& criterion) {
        if (X.empty() || X.size() != T.size() || X.size() != Z.size())
          throw ShapeError("X, T and Z need one matrix per patient");
        LmmData data;
        for (std::size_t i = 0; i < X.size(); ++i) data.push_back({X[i], T[i], Z[i]});
        FitOptions o;
        o.criterion = criterion_from_string(criterion);
        const auto r = fit(data, MixedModelParams::unit(X[0].cols(), T[0].cols(), Z[0].cols()), o);
        py::dict d;
        d["B"] = r.params.B;
        d["log_phi"] = r.params.log_phi;
        d["log_sigma"] = r.params.log_sigma;
        d["loglik"] = r.loglik;
        d["converged"] = r.converged;
        d["blups"] = r.blups;
        return d;
      },
      py::arg("X"), py::arg("T"), py::arg("Z"), py::arg("criterion") = "ML",
      "Multivariate linear mixed model with diagonal variance components.");
}
