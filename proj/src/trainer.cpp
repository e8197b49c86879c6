#include "mmvae/trainer.hpp"

#include <cmath>

#include "mmvae/errors.hpp"

namespace mmvae {

std::string to_string(Normalizer n) { return n == Normalizer::Literal ? "literal" : "per-visit"; }

Normalizer normalizer_from_string(const std::string& s) {
  if (s == "literal") return Normalizer::Literal;
  if (s == "per-visit") return Normalizer::PerVisit;
  throw ValidationError("unknown normalizer '" + s + "' (expected literal or per-visit)");
}

void TrainConfig::validate() const {
  if (latent_dim < 1) throw ValidationError("latent_dim must be at least 1");
  if (beta < 0 || gamma < 0 || eta < 0) throw ValidationError("loss weights must be non-negative");
  if (epochs < 0 || vae_updates_per_epoch < 0) throw ValidationError("epoch and update counts must be non-negative");
  if (mc_samples < 1) throw ValidationError("mc_samples must be at least 1");
  if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
  for (int h : hidden)
    if (h < 1) throw ValidationError("hidden widths must be positive");
}

bool TrainConfig::operator==(const TrainConfig& o) const {
  return latent_dim == o.latent_dim && beta == o.beta && gamma == o.gamma && eta == o.eta && epochs == o.epochs &&
         vae_updates_per_epoch == o.vae_updates_per_epoch && mc_samples == o.mc_samples && seed == o.seed &&
         hidden == o.hidden && learning_rate == o.learning_rate && normalizer == o.normalizer &&
         refit_criterion == o.refit_criterion && lbfgs.initial_step == o.lbfgs.initial_step &&
         lbfgs.max_iterations == o.lbfgs.max_iterations && lbfgs.gradient_tolerance == o.lbfgs.gradient_tolerance &&
         lbfgs.memory == o.lbfgs.memory;
}

bool TrainedModel::operator==(const TrainedModel& o) const {
  if (!(config == o.config && spec == o.spec && standardization == o.standardization && vaes == o.vaes &&
        optimizers == o.optimizers && mixed == o.mixed && rng_state == o.rng_state && epochs_done == o.epochs_done &&
        warnings == o.warnings && blups.size() == o.blups.size() && latents.size() == o.latents.size() &&
        trace.size() == o.trace.size()))
    return false;
  for (std::size_t i = 0; i < blups.size(); ++i)
    if (blups[i].rows() != o.blups[i].rows() || blups[i].cols() != o.blups[i].cols() || blups[i] != o.blups[i]) return false;
  for (std::size_t i = 0; i < latents.size(); ++i)
    if (latents[i].rows() != o.latents[i].rows() || latents[i].cols() != o.latents[i].cols() || latents[i] != o.latents[i])
      return false;
  for (std::size_t e = 0; e < trace.size(); ++e) {
    const auto &a = trace[e], &b = o.trace[e];
    if (a.epoch != b.epoch || a.loss.total != b.loss.total || a.loss.recon != b.loss.recon || a.loss.kl != b.loss.kl ||
        a.loss.gamma_term != b.loss.gamma_term || a.loss.eta_term != b.loss.eta_term || a.mixed_loglik != b.mixed_loglik ||
        a.fit_converged != b.fit_converged || a.fit_failed != b.fit_failed || a.saturated != b.saturated ||
        a.fit_iterations != b.fit_iterations)
      return false;
  }
  return true;
}

TrainingProblem make_problem(const Dataset& data, const ModelSpec& spec, const Standardization& standardization,
                             Normalizer normalizer, const std::vector<KnockoffColumns>* knockoffs) {
  if (data.patients.empty()) throw ValidationError("training needs at least one patient");
  TrainingProblem pb;
  pb.data = data;
  pb.spec = spec.resolved(data);
  pb.standardization = standardization;
  if (knockoffs) {
    if (knockoffs->size() != data.patients.size()) throw ShapeError("knockoff columns must be given for every patient");
    pb.knockoffs = *knockoffs;
  }
  std::vector<std::vector<int>> cols(data.instruments.size());
  std::size_t visits = 0, observations = 0;
  pb.availability.resize(data.patients.size());
  for (std::size_t i = 0; i < data.patients.size(); ++i) {
    const auto& p = data.patients[i];
    pb.designs.push_back(build_design(p, data, pb.spec, standardization, pb.knockoffs.empty() ? nullptr : &pb.knockoffs[i]));
    pb.availability[i].assign(p.visits.size(), 0);
    visits += p.visits.size();
    for (std::size_t v = 0; v < p.visits.size(); ++v) {
      if (p.visits[v].observations.empty())
        throw ValidationError("patient " + p.id + " has a visit without observations");
      pb.availability[i][v] = static_cast<int>(p.visits[v].observations.size());
      observations += p.visits[v].observations.size();
    }
  }
  for (std::size_t l = 0; l < data.instruments.size(); ++l) {
    InstrumentBatch b;
    b.instrument = static_cast<int>(l);
    std::vector<Eigen::VectorXd> enc;
    for (std::size_t i = 0; i < data.patients.size(); ++i)
      for (std::size_t v = 0; v < data.patients[i].visits.size(); ++v)
        for (const auto& o : data.patients[i].visits[v].observations)
          if (o.instrument == static_cast<int>(l)) {
            enc.push_back(encode_items(data.instruments[l], o.responses).bits);
            b.responses.push_back(o.responses);
            b.patient.push_back(static_cast<int>(i));
            b.visit.push_back(static_cast<int>(v));
          }
    if (enc.empty()) continue;
    b.inputs.resize(data.instruments[l].encoded_width(), static_cast<Eigen::Index>(enc.size()));
    for (std::size_t c = 0; c < enc.size(); ++c) b.inputs.col(static_cast<Eigen::Index>(c)) = enc[c];
    pb.batches.push_back(std::move(b));
  }
  const double n_patients = static_cast<double>(data.patients.size());
  const double scale = normalizer == Normalizer::Literal ? n_patients : 1.0;
  pb.norm1 = 1.0 / (scale * static_cast<double>(visits));
  pb.norm2 = 1.0 / (scale * static_cast<double>(observations));
  return pb;
}

TrainingProblem make_problem(const Dataset& data, const ModelSpec& spec, Normalizer normalizer,
                             const std::vector<KnockoffColumns>* knockoffs) {
  return make_problem(data, spec, compute_standardization(data), normalizer, knockoffs);
}

TrainedModel init_model(const TrainingProblem& problem, const TrainConfig& config) {
  config.validate();
  TrainedModel m;
  m.config = config;
  m.spec = problem.spec;
  m.standardization = problem.standardization;
  Rng init_rng(derive_seed(config.seed, 0));
  for (const auto& schema : problem.data.instruments) {
    m.vaes.push_back(init_vae(schema, config.latent_dim, config.hidden, init_rng));
    m.optimizers.push_back(nn::AdamState::for_size(m.vaes.back().parameter_count(), config.learning_rate));
  }
  m.mixed = MixedModelParams::unit(problem.fixed_columns(), problem.random_columns(), config.latent_dim);
  m.rng_state = serialize_rng(Rng(derive_seed(config.seed, 1)));
  return m;
}

Eigen::VectorXd average_latents(const std::vector<Eigen::VectorXd>& draws) {
  if (draws.empty()) throw ValidationError("cannot average latents over an empty instrument set");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(draws.front().size());
  for (const auto& z : draws) {
    if (z.size() != acc.size()) throw ShapeError("latent draws differ in dimension");
    acc += z;
  }
  return acc / static_cast<double>(draws.size());
}

std::vector<Eigen::MatrixXd> average_latents(const TrainingProblem& problem, const std::vector<Eigen::MatrixXd>& draws,
                                             int latent_dim) {
  std::vector<Eigen::MatrixXd> Z;
  Z.reserve(problem.designs.size());
  for (const auto& a : problem.availability) {
    for (int c : a)
      if (c == 0) throw ValidationError("visit without any instrument draw");
    Z.push_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(a.size()), latent_dim));
  }
  for (std::size_t b = 0; b < problem.batches.size(); ++b) {
    const auto& batch = problem.batches[b];
    for (std::size_t c = 0; c < batch.patient.size(); ++c) {
      const int i = batch.patient[c], v = batch.visit[c];
      Z[i].row(v) += draws[b].col(static_cast<Eigen::Index>(c)).transpose() / problem.availability[i][v];
    }
  }
  return Z;
}

LossNoise draw_noise(const TrainingProblem& problem, int latent_dim, int samples, Rng& rng) {
  LossNoise noise(samples);
  for (auto& s : noise)
    for (const auto& b : problem.batches) s.push_back(standard_normal_matrix(latent_dim, b.inputs.cols(), rng));
  return noise;
}

FrozenMixedModel freeze(const TrainedModel& model, const TrainingProblem& problem) {
  std::vector<Eigen::MatrixXd> X, T;
  for (const auto& d : problem.designs) {
    X.push_back(d.X);
    T.push_back(d.T);
  }
  return FrozenMixedModel(X, T, model.mixed.components());
}

LossEvaluation mmvae_loss(const TrainedModel& model, const TrainingProblem& problem, const FrozenMixedModel& frozen,
                          const LossNoise& noise, bool with_gradient) {
  const int d = model.config.latent_dim;
  const double gamma = model.config.gamma, eta = model.config.eta, beta = model.config.beta;
  const double n1 = problem.norm1, n2 = problem.norm2;
  const double inv_s = 1.0 / static_cast<double>(noise.size());
  LossEvaluation ev;
  if (with_gradient)
    for (const auto& v : model.vaes) ev.gradients.push_back(Eigen::VectorXd::Zero(v.parameter_count()));

  for (const auto& eps : noise) {
    const std::size_t nb = problem.batches.size();
    std::vector<nn::Tape> enc_tapes(nb);
    std::vector<Eigen::MatrixXd> mu(nb), sraw(nb), sigma(nb), z(nb);
    LossComponents lc;
    for (std::size_t b = 0; b < nb; ++b) {
      const auto& batch = problem.batches[b];
      const auto& vae = model.vaes[static_cast<std::size_t>(batch.instrument)];
      enc_tapes[b] = nn::mlp_forward(vae.encoder, batch.inputs);
      mu[b] = enc_tapes[b].output.topRows(d);
      sraw[b] = enc_tapes[b].output.bottomRows(d);
      sigma[b] = sraw[b].unaryExpr([](double x) { return softplus(x) + kScaleFloor; });
      z[b] = mu[b].array() + sigma[b].array() * eps[b].array();
      lc.kl += 0.5 * (mu[b].array().square() + sigma[b].array().square() - 1.0 - 2.0 * sigma[b].array().log()).sum();
    }
    const auto Z = average_latents(problem, z, d);
    const auto pred = frozen.predict(Z);
    for (std::size_t i = 0; i < Z.size(); ++i) lc.gamma_term += (pred.Zhat[i] - Z[i]).squaredNorm();
    lc.eta_term = frozen.loglik_ml(Z, pred.B);

    std::vector<Eigen::MatrixXd> dZhat, dZ;
    if (with_gradient) {
      for (std::size_t i = 0; i < Z.size(); ++i) {
        dZhat.push_back(2.0 * n1 * gamma * (pred.Zhat[i] - Z[i]));
        dZ.push_back(-dZhat.back());
      }
      const auto gl = frozen.loglik_ml_grad(Z, pred.B);
      for (std::size_t i = 0; i < Z.size(); ++i) dZ[i] -= n1 * eta * gl[i];
    }
    std::vector<Eigen::VectorXd> flat_dec(nb), flat_cut(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      const auto& batch = problem.batches[b];
      const auto& vae = model.vaes[static_cast<std::size_t>(batch.instrument)];
      Eigen::MatrixXd zin(d, batch.inputs.cols());
      for (std::size_t c = 0; c < batch.patient.size(); ++c)
        zin.col(static_cast<Eigen::Index>(c)) = pred.Zhat[batch.patient[c]].row(batch.visit[c]).transpose();
      const auto dec_tape = nn::mlp_forward(vae.decoder, zin);
      const auto rb = recon_loglik_batch(problem.data.instruments[batch.instrument], dec_tape.output, vae.cutpoint_raw,
                                         batch.responses);
      lc.recon += rb.loglik;
      ev.clamped += rb.clamped;
      if (!with_gradient) continue;
      const auto bw = nn::mlp_backward(vae.decoder, dec_tape, -n2 * rb.grad_outputs);
      flat_dec[b] = bw.grads.flatten();
      flat_cut[b] = -n2 * rb.grad_cutpoint_raw;
      for (std::size_t c = 0; c < batch.patient.size(); ++c)
        dZhat[batch.patient[c]].row(batch.visit[c]) += bw.grad_input.col(static_cast<Eigen::Index>(c)).transpose();
    }
    lc.total = n1 * (gamma * lc.gamma_term - eta * lc.eta_term) + n2 * (-lc.recon + beta * lc.kl);
    ev.components.recon += inv_s * lc.recon;
    ev.components.kl += inv_s * lc.kl;
    ev.components.gamma_term += inv_s * lc.gamma_term;
    ev.components.eta_term += inv_s * lc.eta_term;
    ev.components.total += inv_s * lc.total;
    if (!with_gradient) continue;

    const auto through = frozen.predict_adjoint(dZhat);
    for (std::size_t i = 0; i < dZ.size(); ++i) dZ[i] += through[i];
    for (std::size_t b = 0; b < nb; ++b) {
      const auto& batch = problem.batches[b];
      const auto l = static_cast<std::size_t>(batch.instrument);
      const auto& vae = model.vaes[l];
      Eigen::MatrixXd dz(d, batch.inputs.cols());
      for (std::size_t c = 0; c < batch.patient.size(); ++c) {
        const int i = batch.patient[c], v = batch.visit[c];
        dz.col(static_cast<Eigen::Index>(c)) = dZ[i].row(v).transpose() / problem.availability[i][v];
      }
      Eigen::MatrixXd dout(2 * d, dz.cols());
      dout.topRows(d) = dz + n2 * beta * mu[b];
      const Eigen::ArrayXXd dsigma =
          dz.array() * eps[b].array() + n2 * beta * (sigma[b].array() - sigma[b].array().inverse());
      dout.bottomRows(d) = (dsigma * sraw[b].unaryExpr([](double x) { return sigmoid(x); }).array()).matrix();
      const auto bw = nn::mlp_backward(vae.encoder, enc_tapes[b], dout);
      auto& g = ev.gradients[l];
      const auto ne = vae.encoder.parameter_count(), nd = vae.decoder.parameter_count();
      g.head(ne) += inv_s * bw.grads.flatten();
      g.segment(ne, nd) += inv_s * flat_dec[b];
      g.tail(vae.cutpoint_raw.size()) += inv_s * flat_cut[b];
    }
  }
  return ev;
}

LossEvaluation mmvae_loss(const TrainedModel& model, const TrainingProblem& problem, Rng& rng, bool with_gradient) {
  const auto noise = draw_noise(problem, model.config.latent_dim, model.config.mc_samples, rng);
  return mmvae_loss(model, problem, freeze(model, problem), noise, with_gradient);
}

LatentDraw sample_latents(const TrainedModel& model, const TrainingProblem& problem, Rng* rng) {
  const int d = model.config.latent_dim;
  LatentDraw out;
  for (const auto& batch : problem.batches) {
    const auto& vae = model.vaes[static_cast<std::size_t>(batch.instrument)];
    const Eigen::MatrixXd o = nn::mlp_forward(vae.encoder, batch.inputs).output;
    Eigen::MatrixXd z = o.topRows(d);
    if (rng) {
      const Eigen::MatrixXd sigma = o.bottomRows(d).unaryExpr([](double x) { return softplus(x) + kScaleFloor; });
      z.array() += sigma.array() * standard_normal_matrix(d, o.cols(), *rng).array();
    }
    out.per_batch.push_back(std::move(z));
  }
  out.joint = average_latents(problem, out.per_batch, d);
  return out;
}

LmmData lmm_data(const TrainingProblem& problem, const std::vector<Eigen::MatrixXd>& latents) {
  if (latents.size() != problem.designs.size()) throw ShapeError("latent trajectories do not match patients");
  LmmData data;
  data.reserve(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) data.push_back({problem.designs[i].X, problem.designs[i].T, latents[i]});
  return data;
}

void train_epoch(TrainedModel& model, const TrainingProblem& problem) {
  Rng rng = deserialize_rng(model.rng_state);
  const auto frozen = freeze(model, problem);
  const int updates = model.config.vae_updates_per_epoch;
  LossComponents mean;
  auto accumulate = [&](const LossComponents& c, double w) {
    mean.recon += w * c.recon;
    mean.kl += w * c.kl;
    mean.gamma_term += w * c.gamma_term;
    mean.eta_term += w * c.eta_term;
    mean.total += w * c.total;
  };
  if (updates == 0) {
    const auto noise = draw_noise(problem, model.config.latent_dim, model.config.mc_samples, rng);
    accumulate(mmvae_loss(model, problem, frozen, noise, false).components, 1.0);
  }
  for (int u = 0; u < updates; ++u) {
    const auto noise = draw_noise(problem, model.config.latent_dim, model.config.mc_samples, rng);
    const auto ev = mmvae_loss(model, problem, frozen, noise, true);
    accumulate(ev.components, 1.0 / updates);
    for (std::size_t l = 0; l < model.vaes.size(); ++l) {
      Eigen::VectorXd flat = model.vaes[l].flatten();
      nn::adam_step(model.optimizers[l], flat, ev.gradients[l]);
      model.vaes[l].unflatten(flat);
    }
  }

  EpochTrace tr;
  tr.epoch = model.epochs_done + 1;
  tr.loss = mean;
  const auto draw = sample_latents(model, problem, &rng);
  FitOptions opt;
  opt.criterion = model.config.refit_criterion;
  opt.lbfgs = model.config.lbfgs;
  try {
    const auto res = fit(lmm_data(problem, draw.joint), model.mixed, opt);
    model.mixed = res.params;
    model.blups = res.blups;
    model.latents = draw.joint;
    tr.mixed_loglik = res.loglik;
    tr.fit_iterations = res.iterations;
    tr.fit_converged = res.converged;
    if (!res.converged)
      model.warnings.push_back("epoch " + std::to_string(tr.epoch) + ": mixed-model fit did not converge (" + res.message + ")");
  } catch (const Error& e) {
    tr.fit_failed = true;
    model.warnings.push_back("epoch " + std::to_string(tr.epoch) + ": mixed-model refit failed, keeping previous parameters: " +
                             e.what());
  }
  if (!model.trace.empty()) {
    const double prev = model.trace.back().loss.total;
    tr.saturated = (prev - tr.loss.total) < 0.01 * std::abs(prev);
  }
  model.trace.push_back(tr);
  model.rng_state = serialize_rng(rng);
  ++model.epochs_done;
}

TrainedModel fit_joint(const TrainingProblem& problem, const TrainConfig& config) {
  auto model = init_model(problem, config);
  for (int e = 0; e < config.epochs; ++e) train_epoch(model, problem);
  return model;
}

TrainedModel fit_joint(const Dataset& data, const TrainConfig& config, const ModelSpec& spec,
                       const std::vector<KnockoffColumns>* knockoffs) {
  return fit_joint(make_problem(data, spec, config.normalizer, knockoffs), config);
}

}  // namespace mmvae
