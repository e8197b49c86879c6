#include <cmath>

#include "dense_mvn.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "mmvae/errors.hpp"
#include "mmvae/trainer.hpp"

using namespace mmvae;

namespace {

// Two patients, two instruments, three visits each; instrument 1 carries a cannot-perform flag.
Dataset tiny_dataset() {
  Dataset d;
  d.instruments = {fixtures::schema("A", 2, 3), fixtures::schema("B", 2, 3, true)};
  d.static_covariates = {"sex"};
  d.visit_covariates = {"vent"};
  auto p1 = fixtures::patient("P1", 2.0, {0.0, 0.7, 1.6}, 0.5, "S", 2);
  auto p2 = fixtures::patient("P2", 5.0, {0.0, 0.9, 2.1}, 1.0, "S", 2);
  p1.visits[0].observations[0].responses.levels = {0, 1};
  p1.visits[1].observations.push_back(fixtures::obs(1, {1, 2}));
  p1.visits[2].observations[0] = fixtures::obs(1, {2, 2});
  p2.visits[0].observations.push_back(fixtures::obs(1, {0, 0}));
  p2.visits[0].observations.back().responses.cannot_perform = {1, 0};
  p2.visits[1].observations[0].responses.levels = {2, -1};
  p2.visits[2].observations.push_back(fixtures::obs(1, {1, 1}));
  d.patients = {p1, p2};
  return d;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.latent_dim = 2;
  c.hidden = {2};
  c.epochs = 2;
  c.vae_updates_per_epoch = 3;
  c.seed = 7;
  c.learning_rate = 0.01;
  return c;
}

struct Tiny {
  TrainingProblem pb;
  TrainedModel model;
};

Tiny tiny() {
  ModelSpec spec;
  spec.random_post_switch = false;
  auto pb = make_problem(tiny_dataset(), spec, Normalizer::Literal);
  auto model = init_model(pb, tiny_config());
  Rng rng(3);
  for (auto& v : model.vaes) {
    Eigen::VectorXd f = v.flatten();
    f += 0.3 * standard_normal_matrix(f.size(), 1, rng);
    v.unflatten(f);
  }
  model.mixed.log_phi = 0.3 * standard_normal_matrix(model.mixed.log_phi.size(), 1, rng);
  model.mixed.log_sigma = 0.3 * standard_normal_matrix(model.mixed.log_sigma.size(), 1, rng);
  return {pb, model};
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct evaluation of the objective with scalar loops and the dense normal oracle.
double loop_objective(const TrainedModel& m, const TrainingProblem& pb, const LossNoise& noise) {
  const int d = m.config.latent_dim;
  const auto& data = pb.data;
  const auto vc = m.mixed.components();
  double total = 0.0;
  for (const auto& eps : noise) {
    std::vector<Eigen::MatrixXd> Z;
    double kl = 0.0;
    for (std::size_t i = 0; i < data.patients.size(); ++i) Z.push_back(Eigen::MatrixXd::Zero(data.patients[i].visits.size(), d));
    std::vector<std::vector<int>> counts(data.patients.size());
    for (std::size_t i = 0; i < data.patients.size(); ++i) counts[i].assign(data.patients[i].visits.size(), 0);
    std::vector<std::vector<std::tuple<int, int, int, ItemResponses>>> obs(data.instruments.size());
    for (std::size_t l = 0; l < data.instruments.size(); ++l) {
      int col = 0;
      for (std::size_t i = 0; i < data.patients.size(); ++i)
        for (std::size_t v = 0; v < data.patients[i].visits.size(); ++v)
          for (const auto& o : data.patients[i].visits[v].observations) {
            if (o.instrument != static_cast<int>(l)) continue;
            const auto& vae = m.vaes[l];
            const Eigen::VectorXd out = nn::mlp_forward(vae.encoder, encode_items(data.instruments[l], o.responses).bits, nullptr);
            for (int j = 0; j < d; ++j) {
              const double mu = out[j];
              const double s = std::log1p(std::exp(out[d + j])) + 1e-4;
              Z[i](v, j) += mu + s * eps[l](j, col);
              kl += 0.5 * (mu * mu + s * s - 1.0 - std::log(s * s));
            }
            counts[i][v] += 1;
            obs[l].emplace_back(static_cast<int>(i), static_cast<int>(v), col, o.responses);
            ++col;
          }
    }
    for (std::size_t i = 0; i < Z.size(); ++i)
      for (int v = 0; v < Z[i].rows(); ++v) Z[i].row(v) /= counts[i][v];
    LmmData lmm;
    for (std::size_t i = 0; i < Z.size(); ++i) lmm.push_back({pb.designs[i].X, pb.designs[i].T, Z[i]});
    const Eigen::MatrixXd B = oracle::gls(lmm, vc);
    const auto U = oracle::conditional_mean(B, vc, lmm);
    double gap = 0.0;
    std::vector<Eigen::MatrixXd> Zhat;
    for (std::size_t i = 0; i < Z.size(); ++i) {
      Zhat.push_back(lmm[i].X * B + lmm[i].T * U[i]);
      for (int v = 0; v < Z[i].rows(); ++v)
        for (int j = 0; j < d; ++j) gap += std::pow(Zhat[i](v, j) - Z[i](v, j), 2);
    }
    const double lml = oracle::ml(B, vc, lmm);
    double recon = 0.0;
    for (std::size_t l = 0; l < data.instruments.size(); ++l) {
      const auto& schema = data.instruments[l];
      const auto& vae = m.vaes[l];
      for (const auto& [i, v, col, r] : obs[l]) {
        const Eigen::VectorXd out = nn::mlp_forward(vae.decoder, Eigen::VectorXd(Zhat[i].row(v).transpose()), nullptr);
        int raw = 0, flag_row = schema.item_count();
        for (int k = 0; k < schema.item_count(); ++k) {
          const int cuts = schema.items[k].levels - 1;
          std::vector<double> kappa{vae.cutpoint_raw[raw]};
          for (int c = 1; c < cuts; ++c) kappa.push_back(kappa.back() + std::log1p(std::exp(vae.cutpoint_raw[raw + c])));
          raw += cuts;
          const int fr = schema.items[k].cannot_perform_flag ? flag_row++ : -1;
          if (r.levels[k] < 0) continue;
          if (fr >= 0) {
            const double pi = sig(out[fr]);
            recon += r.cannot_perform[k] ? std::log(pi) : std::log(1.0 - pi);
            if (r.cannot_perform[k]) continue;
          }
          const int c = r.levels[k];
          const double up = c == cuts ? 1.0 : sig(kappa[c] - out[k]);
          const double lo = c == 0 ? 0.0 : sig(kappa[c - 1] - out[k]);
          recon += std::log(up - lo);
        }
      }
    }
    double n_visits = 0, n_obs = 0;
    for (std::size_t i = 0; i < counts.size(); ++i)
      for (int c : counts[i]) {
        n_visits += 1;
        n_obs += c;
      }
    const double I = static_cast<double>(data.patients.size());
    total += (m.config.gamma * gap - m.config.eta * lml) / (I * n_visits) + (-recon + m.config.beta * kl) / (I * n_obs);
  }
  return total / static_cast<double>(noise.size());
}

}  // namespace

TEST_CASE("latent averaging") {
  Eigen::VectorXd a = Eigen::VectorXd::Constant(3, 1.0), b = Eigen::VectorXd::Constant(3, 3.0);
  CHECK(average_latents({a}) == a);
  CHECK(average_latents({a, b}) == Eigen::VectorXd::Constant(3, 2.0));
  CHECK(average_latents({b, a}) == average_latents({a, b}));
  CHECK_THROWS_AS(average_latents(std::vector<Eigen::VectorXd>{}), ValidationError);
}

TEST_CASE("objective matches a scalar-loop recomputation") {
  auto t = tiny();
  t.model.config.mc_samples = 2;
  Rng rng(4);
  const auto noise = draw_noise(t.pb, 2, 2, rng);
  const auto ev = mmvae_loss(t.model, t.pb, freeze(t.model, t.pb), noise, false);
  CHECK(std::abs(ev.components.total - loop_objective(t.model, t.pb, noise)) < 1e-10);
}

TEST_CASE("term isolation") {
  auto t = tiny();
  Rng rng(5);
  const auto noise = draw_noise(t.pb, 2, 1, rng);
  t.model.config.gamma = 0.0;
  t.model.config.eta = 0.0;
  const auto ev = mmvae_loss(t.model, t.pb, freeze(t.model, t.pb), noise, false);
  CHECK(ev.components.total == doctest::Approx(t.pb.norm2 * (-ev.components.recon + 0.5 * ev.components.kl)).epsilon(1e-14));
  // The per-visit normalizer drops the patient-count factor.
  auto pv = make_problem(t.pb.data, ModelSpec{}.without_block("random_post_switch"), Normalizer::PerVisit);
  CHECK(pv.norm2 == doctest::Approx(t.pb.norm2 * 2.0));
}

TEST_CASE("objective gradient matches finite differences") {
  auto t = tiny();
  int params = 0;
  for (const auto& v : t.model.vaes) params += static_cast<int>(v.parameter_count());
  CHECK(params <= 100);
  Rng rng(6);
  const auto noise = draw_noise(t.pb, 2, 1, rng);
  const auto frozen = freeze(t.model, t.pb);
  const auto ev = mmvae_loss(t.model, t.pb, frozen, noise, true);
  for (std::size_t l = 0; l < t.model.vaes.size(); ++l) {
    auto f = [&](const Eigen::VectorXd& flat) {
      auto m = t.model;
      m.vaes[l].unflatten(flat);
      return mmvae_loss(m, t.pb, frozen, noise, false).components.total;
    };
    const auto fd = nn::finite_diff_grad(f, t.model.vaes[l].flatten(), 1e-6);
    for (Eigen::Index k = 0; k < fd.size(); ++k) {
      CAPTURE(l);
      CAPTURE(k);
      CHECK(std::abs(fd[k] - ev.gradients[l][k]) <= 1e-4 * std::max(std::abs(fd[k]), 1e-4));
    }
  }
}

TEST_CASE("zero updates leave the VAEs untouched") {
  auto t = tiny();
  t.model.config.vae_updates_per_epoch = 0;
  const auto before = t.model.vaes;
  train_epoch(t.model, t.pb);
  CHECK(t.model.vaes == before);
  CHECK(t.model.trace.size() == 1);
  CHECK(t.model.epochs_done == 1);
}

TEST_CASE("training is deterministic for a fixed seed") {
  ModelSpec spec;
  spec.random_post_switch = false;
  const auto a = fit_joint(tiny_dataset(), tiny_config(), spec);
  const auto b = fit_joint(tiny_dataset(), tiny_config(), spec);
  CHECK(a == b);
  REQUIRE(a.trace.size() == 2);
  for (const auto& e : a.trace) CHECK(std::isfinite(e.loss.total));
  auto c = tiny_config();
  c.seed = 8;
  CHECK_FALSE(fit_joint(tiny_dataset(), c, spec) == a);
}
