#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "mmvae/design.hpp"
#include "mmvae/errors.hpp"

using namespace mmvae;

namespace {

Standardization unit_std() {
  Standardization s;
  s.stats["age"] = {2.0, 0.5};
  s.stats["sex"] = {0.5, 0.5};
  s.stats["vent"] = {0.0, 1.0};
  return s;
}

Dataset one_patient(const PatientRecord& p) {
  Dataset d;
  d.instruments = {fixtures::schema("I0", 3, 4)};
  d.static_covariates = {"sex"};
  d.visit_covariates = {"vent"};
  d.patients = {p};
  return d;
}

}  // namespace

TEST_CASE("hand computed three-visit design") {
  auto p = fixtures::patient("P", 1.5, {0.0, 1.0, 2.5}, 1.0, "B");
  p.static_covariates = {1.0};
  p.visits[0].covariates = {0.0};
  p.visits[1].covariates = {1.0};
  p.visits[2].covariates = {1.0};
  const auto d = one_patient(p);
  ModelSpec spec;
  spec.covariates = {"sex", "vent"};
  spec.treatments = {"B", "C"};
  const auto dp = build_design(p, d, spec, unit_std());
  // ages 1.5, 2.5, 4.0 -> standardized -1, 1, 4 ; dt = -1, 0, 1.5
  Eigen::MatrixXd X(3, 9);
  //        sw_B  sw_C  sw_B:age sw_C:age age  sex  vent sex:age vent:age
  X << 0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, -1.0, 0.0,
       0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0,
       1.5, 0.0, 6.0, 0.0, 4.0, 1.0, 1.0, 4.0, 4.0;
  CHECK((dp.X - X).cwiseAbs().maxCoeff() < 1e-14);
  Eigen::MatrixXd T(3, 3);
  T << 1.0, -1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.5;
  CHECK((dp.T - T).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(dp.fixed_names.front() == "switch_B");
  CHECK(spec.block_columns("switch") == 4);
}

TEST_CASE("no switch gives zero switch columns") {
  auto p = fixtures::patient("P", 1.5, {0.0, 1.0, 2.0}, INFINITY, "");
  ModelSpec spec;
  spec.treatments = {"B"};
  const auto dp = build_design(p, one_patient(p), spec, unit_std());
  CHECK(dp.X.col(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(dp.T.col(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(dp.T.col(2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("missing covariate names the patient") {
  auto p = fixtures::patient("P42", 1.5, {0.0, 1.0}, 0.5, "B");
  ModelSpec spec;
  spec.covariates = {"smn2"};
  spec.treatments = {"B"};
  try {
    build_design(p, one_patient(p), spec, unit_std());
    FAIL("expected error");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("P42") != std::string::npos);
    CHECK(std::string(e.what()).find("smn2") != std::string::npos);
  }
}

TEST_CASE("counterfactual design") {
  auto p = fixtures::patient("P", 1.5, {0.0, 1.0}, 1.0, "B");
  ModelSpec spec;
  spec.treatments = {"B"};
  const auto cf = counterfactual_design(p, one_patient(p), spec, unit_std(), 1.0);
  REQUIRE(cf.horizon_row == 2);
  CHECK(cf.factual.times[2] == 2.0);
  // At the switch, both scenarios agree.
  CHECK(cf.factual.X.row(1) == cf.counterfactual.X.row(1));
  CHECK(cf.factual.T.row(1) == cf.counterfactual.T.row(1));
  CHECK(cf.factual.X.row(0) == cf.counterfactual.X.row(0));
  // Post columns vanish, the pre slope keeps going.
  CHECK(cf.counterfactual.X.col(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(cf.counterfactual.X.col(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(cf.counterfactual.T(2, 1) == 1.0);
  CHECK(cf.counterfactual.T(2, 2) == 0.0);
  CHECK(cf.factual.T(2, 2) == 1.0);
  CHECK(cf.factual.X(2, 0) == 1.0);
  auto none = fixtures::patient("N", 1.5, {0.0, 1.0}, INFINITY, "");
  CHECK_THROWS_AS(counterfactual_design(none, one_patient(none), spec, unit_std(), 1.0), ValidationError);
  CHECK_THROWS_AS(counterfactual_design(p, one_patient(p), spec, unit_std(), 0.0), ValidationError);
}

TEST_CASE("blocks") {
  ModelSpec spec;
  spec.covariates = {"sex"};
  spec.treatments = {"B", "C"};
  CHECK(spec.without_block("switch").block_columns("switch") == 0);
  CHECK(spec.without_block("sex").covariates.empty());
  CHECK_THROWS_AS(spec.without_block("nope"), ValidationError);
  CHECK(spec.is_random_block("random_knockoff"));
}
