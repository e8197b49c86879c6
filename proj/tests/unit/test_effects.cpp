#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "mmvae/effects.hpp"
#include "mmvae/errors.hpp"

using namespace mmvae;

namespace {

struct Setup {
  TrainingProblem problem;
  TrainedModel model;
};

Setup setup(int latent_dim = 2) {
  const auto data = fixtures::small_dataset(3);
  ModelSpec spec;
  spec.covariates = {"sex"};
  Setup s{make_problem(data, spec, Normalizer::Literal), {}};
  TrainConfig c;
  c.latent_dim = latent_dim;
  c.hidden = {4};
  s.model = init_model(s.problem, c);
  s.model.blups.assign(data.patients.size(),
                       Eigen::MatrixXd::Zero(s.problem.random_columns(), latent_dim));
  s.model.mixed.B = Eigen::MatrixXd::Zero(s.problem.fixed_columns(), latent_dim);
  return s;
}

Eigen::Index column(const TrainingProblem& pb, const std::string& name) {
  const auto& names = pb.designs.front().fixed_names;
  for (std::size_t c = 0; c < names.size(); ++c)
    if (names[c] == name) return static_cast<Eigen::Index>(c);
  FAIL("missing column " << name);
  return -1;
}

}  // namespace

TEST_CASE("no switch coefficients means no effect") {
  auto s = setup();
  s.model.mixed.B(column(s.problem, "sex"), 0) = 0.7;
  s.model.mixed.B(column(s.problem, "age"), 1) = -0.3;
  // Equal pre and post random slopes: the counterfactual extends the pre-switch slope.
  s.model.blups[0] = Eigen::MatrixXd::Constant(s.problem.random_columns(), 2, 0.2);
  const auto e = switch_effect(s.model, s.problem, 0, 1.5);
  REQUIRE(e.instruments.size() == 1);
  CHECK(e.instruments[0].sum_difference == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(e.instruments[0].item_difference.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("latent effect equals horizon times the switch slope") {
  auto s = setup();
  const auto& p = s.problem.data.patients[1];
  const Eigen::Index c = column(s.problem, "switch_" + p.switch_treatment());
  s.model.mixed.B(c, 0) = 0.4;
  s.model.mixed.B(c, 1) = -1.1;
  const double h = 2.0;
  const auto pred = latent_prediction(s.model, s.problem, 1, h);
  CHECK(pred.time == doctest::Approx(p.switch_time() + h));
  CHECK(pred.factual[0] - pred.counterfactual[0] == doctest::Approx(0.8));
  CHECK(pred.factual[1] - pred.counterfactual[1] == doctest::Approx(-2.2));

  const auto e = switch_effect(s.model, s.problem, 1, h);
  const auto& schema = s.problem.data.instruments[0];
  const auto f = decode_ordinal(schema, s.model.vaes[0], pred.factual);
  const auto cf = decode_ordinal(schema, s.model.vaes[0], pred.counterfactual);
  double manual = 0.0;
  for (std::size_t k = 0; k < f.items.size(); ++k) {
    double ef = 0.0, ec = 0.0;
    const Eigen::VectorXd pf = f.items[k].probabilities(), pc = cf.items[k].probabilities();
    for (Eigen::Index lv = 0; lv < pf.size(); ++lv) {
      ef += static_cast<double>(lv) * pf[lv];
      ec += static_cast<double>(lv) * pc[lv];
    }
    manual += ef - ec;
    CHECK(e.instruments[0].item_difference[static_cast<Eigen::Index>(k)] == doctest::Approx(ef - ec));
  }
  CHECK(e.instruments[0].sum_difference == doctest::Approx(manual));
  CHECK(e.instruments[0].factual_sum - e.instruments[0].counterfactual_sum ==
        doctest::Approx(e.instruments[0].sum_difference));
}

TEST_CASE("effects are computed for switched patients and can be restricted to observed horizons") {
  auto s = setup(1);
  s.problem.data.patients[2].switches.clear();
  s.model.mixed.B(column(s.problem, "switch_B"), 0) = 0.5;
  EffectOptions o;
  o.horizon = 1.0;
  CHECK(switch_effects(s.model, s.problem, o).size() == s.problem.data.patients.size() - 1);
  o.horizon = 1.35;  // last visit at 2.5, switch at 1.2
  o.observed_only = true;
  CHECK(switch_effects(s.model, s.problem, o).empty());
  o.observed_only = false;
  o.horizon = 0.0;
  CHECK_THROWS_AS(switch_effects(s.model, s.problem, o), ValidationError);
  CHECK_THROWS_AS(switch_effect(s.model, s.problem, 2, 1.0), ValidationError);
}

TEST_CASE("aggregation over seeds reports mean, spread, percent and sign stability") {
  const auto schema = fixtures::schema("I0", 2, 5);  // max 8
  auto pe = [](double a, double b) {
    PatientEffect p;
    InstrumentEffect e;
    e.item_difference = Eigen::Vector2d(a, b);
    e.sum_difference = a + b;
    p.instruments.push_back(e);
    return p;
  };
  // Seed means 1.0 and 2.0.
  const std::vector<std::vector<PatientEffect>> seeds{{pe(0.5, 0.0), pe(1.0, 0.5)}, {pe(1.0, 1.0), pe(1.0, 1.0)}};
  const auto r = aggregate_effects(seeds, {schema}, 1.0);
  REQUIRE(r.instruments.size() == 1);
  const auto& s = r.instruments[0];
  CHECK(s.mean == doctest::Approx(1.5));
  CHECK(s.sd == doctest::Approx(std::sqrt(0.5)));
  CHECK(s.percent == doctest::Approx(100.0 * 1.5 / 8.0));
  CHECK(s.item_mean[0] == doctest::Approx((0.75 + 1.0) / 2));
  CHECK(s.item_mean[1] == doctest::Approx((0.25 + 1.0) / 2));
  CHECK(s.sign_stable);
  CHECK(s.patients == 2);

  const auto flipped = aggregate_effects({{pe(1.0, 0.0)}, {pe(-0.5, 0.0)}}, {schema}, 1.0);
  CHECK_FALSE(flipped.instruments[0].sign_stable);
  CHECK(aggregate_effects({{pe(1.0, 0.0)}}, {schema}, 1.0).instruments[0].sd == 0.0);
  CHECK_THROWS_AS(aggregate_effects({}, {schema}, 1.0), ValidationError);
}

TEST_CASE("artificial switch adds points only after the switch") {
  auto data = fixtures::small_dataset(2);
  for (auto& p : data.patients) {
    p.switches = {{1.0, "B"}};
    p.visits.clear();
    for (double t : {0.0, 0.5, 0.99, 1.0, 1.5, 2.0, 2.25}) {
      Visit v;
      v.time = t;
      v.covariates = {0.0};
      v.observations.push_back(fixtures::obs(0, {0, 1, 0}));
      p.visits.push_back(v);
    }
  }
  Rng rng(3);
  InjectionReport rep;
  InjectionOptions o;
  o.rate = 1.0;
  o.period = 0.5;
  const auto out = inject_artificial_switch(data, o, rng, &rep);
  const std::vector<int> expected{0, 0, 0, 0, 1, 2, 2};  // floor((t - 1) / 0.5)
  int added = 0;
  for (std::size_t i = 0; i < out.patients.size(); ++i)
    for (std::size_t v = 0; v < expected.size(); ++v) {
      const auto& before = data.patients[i].visits[v].observations[0].responses.levels;
      const auto& after = out.patients[i].visits[v].observations[0].responses.levels;
      int gain = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        CHECK(after[k] >= before[k]);
        CHECK(after[k] <= 3);
        gain += after[k] - before[k];
      }
      CHECK(gain == expected[v]);
      added += gain;
    }
  CHECK(rep.points_added == added);
  CHECK(rep.points_dropped == 0);
}

TEST_CASE("two points per year over one year raise the sum by two") {
  auto data = fixtures::small_dataset(1);
  for (auto& p : data.patients) {
    p.switches = {{1.0, "B"}};
    p.visits.resize(2);
    p.visits[0].time = 0.5;
    p.visits[1].time = 2.0;
  }
  Rng rng(9);
  InjectionOptions o;
  o.rate = 1.0;
  o.period = 0.5;
  const auto out = inject_artificial_switch(data, o, rng);
  for (std::size_t i = 0; i < out.patients.size(); ++i) {
    const auto& a = out.patients[i].visits[1].observations[0].responses.levels;
    const auto& b = data.patients[i].visits[1].observations[0].responses.levels;
    CHECK((a[0] + a[1] + a[2]) - (b[0] + b[1] + b[2]) == 2);
  }
}

TEST_CASE("points on maxed items move elsewhere and are dropped when nothing is left") {
  Dataset data;
  data.instruments = {fixtures::schema("I0", 3, 3)};  // top level 2
  data.instruments[0].items[2].official = false;
  auto p = fixtures::patient("P", 3.0, {0.0, 1.0, 2.0, 3.0}, 0.5, "B");
  p.static_covariates.clear();
  for (auto& v : p.visits) v.covariates.clear();
  p.visits[1].observations[0] = fixtures::obs(0, {1, 1, 0});
  p.visits[2].observations[0] = fixtures::obs(0, {2, 1, 0});  // item 0 now at the top
  p.visits[3].observations[0] = fixtures::obs(0, {2, 2, 0});
  p.visits[3].observations[0].responses.levels[1] = 2;
  data.patients = {p};

  Rng rng(1);
  InjectionReport rep;
  InjectionOptions o;
  o.rate = 1.0;
  o.period = 1.0;
  const auto out = inject_artificial_switch(data, o, rng, &rep);
  const auto& v1 = out.patients[0].visits[1].observations[0].responses.levels;  // t-ts = 0.5 -> 0 points
  const auto& v2 = out.patients[0].visits[2].observations[0].responses.levels;  // 1 point
  const auto& v3 = out.patients[0].visits[3].observations[0].responses.levels;  // 2 points, all maxed
  CHECK(v1 == std::vector<int>{1, 1, 0});
  CHECK(v2 == std::vector<int>{2, 2, 0});  // only item 1 has room
  CHECK(v3 == std::vector<int>{2, 2, 0});  // non-official item untouched
  CHECK(rep.points_added == 1);
  CHECK(rep.points_dropped == 2);
}

TEST_CASE("missing and cannot-perform items never receive points") {
  Dataset data;
  data.instruments = {fixtures::schema("I0", 3, 4, true)};
  auto p = fixtures::patient("P", 3.0, {0.0, 3.0}, 0.5, "B");
  p.static_covariates.clear();
  for (auto& v : p.visits) v.covariates.clear();
  auto& r = p.visits[1].observations[0].responses;
  r.levels = {0, -1, 0};
  r.cannot_perform = {1, 0, 0};
  data.patients = {p};
  Rng rng(2);
  InjectionReport rep;
  const auto out = inject_artificial_switch(data, {1.0, 0.5}, rng, &rep);
  const auto& lv = out.patients[0].visits[1].observations[0].responses.levels;
  CHECK(lv[0] == 0);
  CHECK(lv[1] == -1);
  CHECK(lv[2] == 3);
  CHECK(rep.points_added == 3);
  CHECK(rep.points_dropped == 2);
  CHECK_THROWS_AS(inject_artificial_switch(data, {0.0, 0.5}, rng), ValidationError);
}
