#include "mmvae/vae.hpp"

#include <cmath>
#include <string>

#include "mmvae/errors.hpp"

namespace mmvae {

namespace {

constexpr double kLogProbMinProb = 1e-12;

// Log-probability of `level` under the proportional-odds model plus its derivatives
// with respect to the location and each cutpoint. Returns false when clamped.
bool ordinal_logprob(double loc, const Eigen::VectorXd& kappa, int level, double& logp, double& d_loc,
                     Eigen::VectorXd* d_kappa) {
  const int cuts = static_cast<int>(kappa.size());
  const int top = cuts;  // highest level index
  double p = 0.0;
  double dp_da = 0.0;  // derivative w.r.t. the upper argument a = kappa_{level+1} - loc
  double dp_db = 0.0;  // derivative w.r.t. the lower argument b = kappa_level - loc
  bool has_a = level < top;
  bool has_b = level > 0;
  if (has_a && has_b) {
    const double a = kappa[level] - loc;
    const double b = kappa[level - 1] - loc;
    const double sa = sigmoid(a);
    const double sb = sigmoid(b);
    p = b > 0.0 ? sigmoid(-b) - sigmoid(-a) : sa - sb;
    dp_da = sa * (1.0 - sa);
    dp_db = -sb * (1.0 - sb);
  } else if (has_a) {
    const double a = kappa[level] - loc;
    p = sigmoid(a);
    dp_da = p * (1.0 - p);
  } else {
    const double b = kappa[level - 1] - loc;
    p = sigmoid(-b);
    dp_db = -p * (1.0 - p);
  }
  if (!(p > kLogProbMinProb)) {
    logp = kLogProbFloor;
    d_loc = 0.0;
    if (d_kappa) d_kappa->setZero(cuts);
    return false;
  }
  // Use the log-sigmoid form at the boundaries for accuracy in the tails.
  if (has_a && !has_b)
    logp = log_sigmoid(kappa[level] - loc);
  else if (!has_a && has_b)
    logp = log_sigmoid(loc - kappa[level - 1]);
  else
    logp = std::log(p);
  d_loc = -(dp_da + dp_db) / p;
  if (d_kappa) {
    d_kappa->setZero(cuts);
    if (has_a) (*d_kappa)[level] += dp_da / p;
    if (has_b) (*d_kappa)[level - 1] += dp_db / p;
  }
  return true;
}

void check_schema_width(const InstrumentSchema& schema, const EncodedObservation& obs) {
  if (obs.bits.size() != schema.encoded_width())
    throw ShapeError("observation width " + std::to_string(obs.bits.size()) + " does not match instrument '" +
                     schema.id + "' width " + std::to_string(schema.encoded_width()));
  if (static_cast<int>(obs.item_missing.size()) != schema.item_count())
    throw ShapeError("missing mask length does not match item count of '" + schema.id + "'");
}

}  // namespace

int InstrumentSchema::flag_count() const {
  int n = 0;
  for (const auto& it : items) n += it.cannot_perform_flag ? 1 : 0;
  return n;
}

int InstrumentSchema::encoded_width() const {
  int n = 0;
  for (const auto& it : items) n += it.levels - 1 + (it.cannot_perform_flag ? 1 : 0);
  return n;
}

int InstrumentSchema::max_sum_score() const {
  int n = 0;
  for (const auto& it : items)
    if (it.official) n += it.levels - 1;
  return n;
}

int InstrumentSchema::cutpoint_count() const {
  int n = 0;
  for (const auto& it : items) n += it.levels - 1;
  return n;
}

void InstrumentSchema::validate() const {
  if (id.empty()) throw ValidationError("instrument without id");
  if (items.empty()) throw ValidationError("instrument '" + id + "' has no items");
  for (std::size_t k = 0; k < items.size(); ++k)
    if (items[k].levels < 2 || items[k].levels > 6)
      throw ValidationError("instrument '" + id + "' item " + std::to_string(k) + " has " +
                            std::to_string(items[k].levels) + " levels (allowed 2..6)");
}

int ItemResponses::missing_count() const {
  int n = 0;
  for (int l : levels) n += l < 0 ? 1 : 0;
  return n;
}

Eigen::VectorXd thermometer_encode(int level, int level_count) {
  if (level_count < 2) throw ValidationError("thermometer encoding needs at least two levels");
  if (level < 0 || level > level_count - 1)
    throw ValidationError("level " + std::to_string(level) + " outside 0.." + std::to_string(level_count - 1));
  Eigen::VectorXd bits = Eigen::VectorXd::Zero(level_count - 1);
  bits.head(level).setOnes();
  return bits;
}

int thermometer_decode(const Eigen::Ref<const Eigen::VectorXd>& bits) {
  return static_cast<int>(std::lround(bits.sum()));
}

EncodedObservation encode_items(const InstrumentSchema& schema, const ItemResponses& responses) {
  if (static_cast<int>(responses.levels.size()) != schema.item_count() ||
      static_cast<int>(responses.cannot_perform.size()) != schema.item_count())
    throw ShapeError("response length does not match instrument '" + schema.id + "'");
  EncodedObservation obs;
  obs.instrument = schema.id;
  obs.bits = Eigen::VectorXd::Zero(schema.encoded_width());
  obs.item_missing.assign(schema.items.size(), 0);
  int pos = 0;
  for (std::size_t k = 0; k < schema.items.size(); ++k) {
    const auto& item = schema.items[k];
    const int level = responses.levels[k];
    if (level < 0) {
      obs.item_missing[k] = 1;
    } else {
      obs.bits.segment(pos, item.levels - 1) = thermometer_encode(level, item.levels);
      if (item.cannot_perform_flag && responses.cannot_perform[k]) obs.bits[pos + item.levels - 1] = 1.0;
    }
    pos += item.levels - 1 + (item.cannot_perform_flag ? 1 : 0);
  }
  return obs;
}

ItemResponses decode_items(const InstrumentSchema& schema, const EncodedObservation& obs) {
  check_schema_width(schema, obs);
  ItemResponses r;
  r.levels.resize(schema.items.size());
  r.cannot_perform.assign(schema.items.size(), 0);
  int pos = 0;
  for (std::size_t k = 0; k < schema.items.size(); ++k) {
    const auto& item = schema.items[k];
    if (obs.item_missing[k]) {
      r.levels[k] = -1;
    } else {
      r.levels[k] = thermometer_decode(obs.bits.segment(pos, item.levels - 1));
      if (item.cannot_perform_flag) r.cannot_perform[k] = obs.bits[pos + item.levels - 1] > 0.5 ? 1 : 0;
    }
    pos += item.levels - 1 + (item.cannot_perform_flag ? 1 : 0);
  }
  return r;
}

Eigen::Index VaeParams::parameter_count() const {
  return encoder.parameter_count() + decoder.parameter_count() + cutpoint_raw.size();
}

Eigen::VectorXd VaeParams::flatten() const {
  Eigen::VectorXd flat(parameter_count());
  const auto ne = encoder.parameter_count();
  const auto nd = decoder.parameter_count();
  flat.head(ne) = nn::flatten(encoder);
  flat.segment(ne, nd) = nn::flatten(decoder);
  flat.tail(cutpoint_raw.size()) = cutpoint_raw;
  return flat;
}

void VaeParams::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) throw ShapeError("flat VAE parameter length mismatch");
  const auto ne = encoder.parameter_count();
  const auto nd = decoder.parameter_count();
  nn::unflatten(flat.head(ne), encoder);
  nn::unflatten(flat.segment(ne, nd), decoder);
  cutpoint_raw = flat.tail(cutpoint_raw.size());
}

bool VaeParams::operator==(const VaeParams& other) const {
  return encoder == other.encoder && decoder == other.decoder && cutpoint_raw.size() == other.cutpoint_raw.size() &&
         cutpoint_raw == other.cutpoint_raw;
}

VaeParams init_vae(const InstrumentSchema& schema, int latent_dim, const std::vector<int>& hidden, Rng& rng) {
  schema.validate();
  if (latent_dim < 1) throw ValidationError("latent dimension must be at least 1");
  std::vector<int> enc_sizes{schema.encoded_width()};
  enc_sizes.insert(enc_sizes.end(), hidden.begin(), hidden.end());
  enc_sizes.push_back(2 * latent_dim);
  std::vector<int> dec_sizes{latent_dim};
  dec_sizes.insert(dec_sizes.end(), hidden.rbegin(), hidden.rend());
  dec_sizes.push_back(schema.item_count() + schema.flag_count());
  VaeParams p;
  p.encoder = nn::init_mlp(enc_sizes, rng);
  p.decoder = nn::init_mlp(dec_sizes, rng);
  // Unit-spaced cutpoints centred on zero.
  const double unit_increment = std::log(std::exp(1.0) - 1.0);
  p.cutpoint_raw.resize(schema.cutpoint_count());
  int pos = 0;
  for (const auto& item : schema.items) {
    const int cuts = item.levels - 1;
    p.cutpoint_raw[pos] = -0.5 * (cuts - 1);
    for (int c = 1; c < cuts; ++c) p.cutpoint_raw[pos + c] = unit_increment;
    pos += cuts;
  }
  return p;
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) { return -softplus(-x); }

VariationalPosterior encode(const InstrumentSchema& schema, const VaeParams& params, const EncodedObservation& obs) {
  check_schema_width(schema, obs);
  const Eigen::VectorXd head = nn::mlp_forward(params.encoder, obs.bits, nullptr);
  const int d = params.latent_dim();
  VariationalPosterior post;
  post.mean = head.head(d);
  post.scale.resize(d);
  for (int j = 0; j < d; ++j) post.scale[j] = softplus(head[d + j]) + kScaleFloor;
  return post;
}

Eigen::VectorXd reparameterize(const VariationalPosterior& post, const Eigen::VectorXd& noise) {
  if (noise.size() != post.mean.size() || post.scale.size() != post.mean.size())
    throw ShapeError("noise length does not match posterior dimension");
  return post.mean + post.scale.cwiseProduct(noise);
}

double kl_std_normal(const VariationalPosterior& post) {
  if (post.scale.size() != post.mean.size()) throw ShapeError("posterior mean/scale length mismatch");
  double kl = 0.0;
  for (Eigen::Index j = 0; j < post.mean.size(); ++j) {
    const double s = post.scale[j];
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("posterior scale must be positive and finite");
    const double s2 = s * s;
    kl += post.mean[j] * post.mean[j] + s2 - 1.0 - std::log(s2);
  }
  return 0.5 * kl;
}

Eigen::VectorXd ItemDistribution::probabilities() const {
  const int levels = static_cast<int>(cutpoints.size()) + 1;
  Eigen::VectorXd p(levels);
  for (int c = 0; c < levels; ++c) {
    const double upper = c < levels - 1 ? sigmoid(cutpoints[c] - location) : 1.0;
    const double lower = c > 0 ? sigmoid(cutpoints[c - 1] - location) : 0.0;
    p[c] = upper - lower;
  }
  return p;
}

double ItemDistribution::log_probability(int level) const {
  double logp = 0.0;
  double d_loc = 0.0;
  ordinal_logprob(location, cutpoints, level, logp, d_loc, nullptr);
  return logp;
}

double ItemDistribution::expected_level() const {
  double e = 0.0;
  for (Eigen::Index c = 0; c < cutpoints.size(); ++c) e += sigmoid(location - cutpoints[c]);
  if (has_flag) e *= 1.0 - sigmoid(flag_logit);
  return e;
}

double OrdinalDecoderOutput::expected_sum_score(const InstrumentSchema& schema) const {
  double s = 0.0;
  for (std::size_t k = 0; k < items.size(); ++k)
    if (schema.items[k].official) s += items[k].expected_level();
  return s;
}

Eigen::VectorXd cutpoints_from_raw(const Eigen::Ref<const Eigen::VectorXd>& raw) {
  Eigen::VectorXd kappa(raw.size());
  if (raw.size() == 0) return kappa;
  kappa[0] = raw[0];
  for (Eigen::Index c = 1; c < raw.size(); ++c) kappa[c] = kappa[c - 1] + softplus(raw[c]);
  return kappa;
}

OrdinalDecoderOutput ordinal_from_outputs(const InstrumentSchema& schema, const Eigen::Ref<const Eigen::VectorXd>& outputs,
                                          const Eigen::VectorXd& cutpoint_raw) {
  if (outputs.size() != schema.item_count() + schema.flag_count())
    throw ShapeError("decoder output width does not match instrument '" + schema.id + "'");
  if (cutpoint_raw.size() != schema.cutpoint_count()) throw ShapeError("cutpoint parameter length mismatch");
  OrdinalDecoderOutput out;
  out.items.resize(schema.items.size());
  int cut_pos = 0;
  int flag_pos = schema.item_count();
  for (std::size_t k = 0; k < schema.items.size(); ++k) {
    const auto& item = schema.items[k];
    auto& dist = out.items[k];
    dist.location = outputs[static_cast<Eigen::Index>(k)];
    dist.cutpoints = cutpoints_from_raw(cutpoint_raw.segment(cut_pos, item.levels - 1));
    cut_pos += item.levels - 1;
    dist.has_flag = item.cannot_perform_flag;
    if (dist.has_flag) dist.flag_logit = outputs[flag_pos++];
  }
  return out;
}

OrdinalDecoderOutput decode_ordinal(const InstrumentSchema& schema, const VaeParams& params, const Eigen::VectorXd& z) {
  if (z.size() != params.decoder.in_dim()) throw ShapeError("latent length does not match decoder input");
  if (!z.allFinite()) throw ValidationError("non-finite latent value");
  const Eigen::VectorXd outputs = nn::mlp_forward(params.decoder, z, nullptr);
  return ordinal_from_outputs(schema, outputs, params.cutpoint_raw);
}

double recon_loglik(const InstrumentSchema& schema, const OrdinalDecoderOutput& out, const EncodedObservation& obs,
                    ReconDiagnostics* diagnostics) {
  check_schema_width(schema, obs);
  const ItemResponses r = decode_items(schema, obs);
  double ll = 0.0;
  for (std::size_t k = 0; k < schema.items.size(); ++k) {
    if (r.levels[k] < 0) continue;
    const auto& dist = out.items[k];
    if (dist.has_flag) {
      const bool flagged = r.cannot_perform[k] != 0;
      ll += flagged ? log_sigmoid(dist.flag_logit) : log_sigmoid(-dist.flag_logit);
      if (flagged) continue;
    }
    double logp = 0.0;
    double d_loc = 0.0;
    if (!ordinal_logprob(dist.location, dist.cutpoints, r.levels[k], logp, d_loc, nullptr) && diagnostics)
      ++diagnostics->clamped;
    ll += logp;
  }
  return ll;
}

ReconBatch recon_loglik_batch(const InstrumentSchema& schema, const Eigen::MatrixXd& decoder_outputs,
                              const Eigen::VectorXd& cutpoint_raw, const std::vector<ItemResponses>& responses) {
  const Eigen::Index n_out = schema.item_count() + schema.flag_count();
  if (decoder_outputs.rows() != n_out || decoder_outputs.cols() != static_cast<Eigen::Index>(responses.size()))
    throw ShapeError("decoder output batch does not match responses");
  if (cutpoint_raw.size() != schema.cutpoint_count()) throw ShapeError("cutpoint parameter length mismatch");
  ReconBatch res;
  res.grad_outputs = Eigen::MatrixXd::Zero(decoder_outputs.rows(), decoder_outputs.cols());
  res.grad_cutpoint_raw = Eigen::VectorXd::Zero(cutpoint_raw.size());

  // Cutpoints are shared by all samples.
  std::vector<Eigen::VectorXd> kappas;
  std::vector<int> offsets;
  {
    int pos = 0;
    for (const auto& item : schema.items) {
      kappas.push_back(cutpoints_from_raw(cutpoint_raw.segment(pos, item.levels - 1)));
      offsets.push_back(pos);
      pos += item.levels - 1;
    }
  }
  Eigen::VectorXd grad_kappa = Eigen::VectorXd::Zero(cutpoint_raw.size());
  Eigen::VectorXd dk;
  for (Eigen::Index s = 0; s < decoder_outputs.cols(); ++s) {
    const auto& r = responses[static_cast<std::size_t>(s)];
    int flag_row = schema.item_count();
    for (std::size_t k = 0; k < schema.items.size(); ++k) {
      const auto& item = schema.items[k];
      const int this_flag_row = item.cannot_perform_flag ? flag_row++ : -1;
      const int level = r.levels[k];
      if (level < 0) continue;
      if (item.cannot_perform_flag) {
        const double logit = decoder_outputs(this_flag_row, s);
        const bool flagged = r.cannot_perform[k] != 0;
        res.loglik += flagged ? log_sigmoid(logit) : log_sigmoid(-logit);
        res.grad_outputs(this_flag_row, s) += (flagged ? 1.0 : 0.0) - sigmoid(logit);
        if (flagged) continue;
      }
      double logp = 0.0;
      double d_loc = 0.0;
      const double loc = decoder_outputs(static_cast<Eigen::Index>(k), s);
      if (!ordinal_logprob(loc, kappas[k], level, logp, d_loc, &dk)) ++res.clamped;
      res.loglik += logp;
      res.grad_outputs(static_cast<Eigen::Index>(k), s) += d_loc;
      grad_kappa.segment(offsets[k], item.levels - 1) += dk;
    }
  }
  // Chain through the cumulative-softplus cutpoint map.
  for (std::size_t k = 0; k < schema.items.size(); ++k) {
    const int cuts = schema.items[k].levels - 1;
    const int off = offsets[k];
    double tail = 0.0;
    for (int c = cuts - 1; c >= 1; --c) {
      tail += grad_kappa[off + c];
      res.grad_cutpoint_raw[off + c] = tail * sigmoid(cutpoint_raw[off + c]);
    }
    res.grad_cutpoint_raw[off] = tail + grad_kappa[off];
  }
  return res;
}

ItemResponses sample_items(const InstrumentSchema& schema, const OrdinalDecoderOutput& out, Rng& rng) {
  ItemResponses r;
  r.levels.resize(schema.items.size());
  r.cannot_perform.assign(schema.items.size(), 0);
  for (std::size_t k = 0; k < schema.items.size(); ++k) {
    const auto& dist = out.items[k];
    if (dist.has_flag && uniform01(rng) < sigmoid(dist.flag_logit)) {
      r.cannot_perform[k] = 1;
      r.levels[k] = 0;
      continue;
    }
    const Eigen::VectorXd p = dist.probabilities();
    double u = uniform01(rng);
    int level = static_cast<int>(p.size()) - 1;
    for (Eigen::Index c = 0; c < p.size(); ++c) {
      if (u < p[c]) {
        level = static_cast<int>(c);
        break;
      }
      u -= p[c];
    }
    r.levels[k] = level;
  }
  return r;
}

}  // namespace mmvae
