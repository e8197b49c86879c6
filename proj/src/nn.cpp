#include "mmvae/nn.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "mmvae/errors.hpp"

namespace mmvae::nn {

namespace {

bool all_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Eigen::Index MlpParams::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void MlpParams::validate() const {
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    if (l.bias.size() != l.weight.rows())
      throw ShapeError("layer " + std::to_string(k) + ": bias length does not match weight rows");
    if (k > 0 && l.in_dim() != layers[k - 1].out_dim())
      throw ShapeError("layer " + std::to_string(k) + ": input width does not chain");
    if (!all_finite(l.weight) || !l.bias.allFinite())
      throw ValidationError("layer " + std::to_string(k) + " has non-finite parameters");
  }
}

bool MlpParams::operator==(const MlpParams& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& a = layers[k];
    const auto& b = other.layers[k];
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols()) return false;
    if (a.weight != b.weight || a.bias != b.bias) return false;
  }
  return true;
}

GradientBundle GradientBundle::zeros_like(const MlpParams& params) {
  GradientBundle g;
  for (const auto& l : params.layers)
    g.layers.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                        Eigen::VectorXd::Zero(l.bias.size())});
  return g;
}

GradientBundle& GradientBundle::operator+=(const GradientBundle& other) {
  if (other.layers.size() != layers.size()) throw ShapeError("gradient bundles differ in depth");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    layers[k].weight += other.layers[k].weight;
    layers[k].bias += other.layers[k].bias;
  }
  return *this;
}

Eigen::VectorXd GradientBundle::flatten() const {
  MlpParams view;
  view.layers = layers;
  return nn::flatten(view);
}

MlpParams init_mlp(const std::vector<int>& sizes, Rng& rng) {
  if (sizes.size() < 2) throw ShapeError("a network needs at least an input and an output width");
  MlpParams params;
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    const int in = sizes[k];
    const int out = sizes[k + 1];
    if (in <= 0 || out <= 0) throw ShapeError("layer widths must be positive");
    const double a = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-a, a);
    DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
    for (int j = 0; j < in; ++j)
      for (int i = 0; i < out; ++i) layer.weight(i, j) = dist(rng);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

std::uint64_t fingerprint(const MlpParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& l : params.layers) {
    const Eigen::Index shape[2] = {l.weight.rows(), l.weight.cols()};
    h = fnv1a(shape, sizeof(shape), h);
    h = fnv1a(l.weight.data(), sizeof(double) * l.weight.size(), h);
    h = fnv1a(l.bias.data(), sizeof(double) * l.bias.size(), h);
  }
  return h;
}

Tape mlp_forward(const MlpParams& params, const Eigen::MatrixXd& input) {
  if (params.layers.empty()) throw ShapeError("empty network");
  if (input.rows() != params.in_dim())
    throw ShapeError("input width " + std::to_string(input.rows()) + " does not match network input " +
                     std::to_string(params.in_dim()));
  if (!input.allFinite()) throw ValidationError("non-finite network input");
  Tape tape;
  tape.fingerprint = fingerprint(params);
  tape.inputs.reserve(params.layers.size());
  Eigen::MatrixXd h = input;
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const auto& l = params.layers[k];
    if (l.in_dim() != h.rows()) throw ShapeError("layer " + std::to_string(k) + " does not chain");
    Eigen::MatrixXd a = l.weight * h;
    a.colwise() += l.bias;
    tape.inputs.push_back(std::move(h));
    if (k + 1 < params.layers.size())
      h = a.array().tanh().matrix();
    else
      h = std::move(a);
  }
  tape.output = std::move(h);
  return tape;
}

Eigen::VectorXd mlp_forward(const MlpParams& params, const Eigen::VectorXd& input, Tape* tape) {
  Tape t = mlp_forward(params, Eigen::MatrixXd(input));
  Eigen::VectorXd out = t.output.col(0);
  if (tape) *tape = std::move(t);
  return out;
}

Backward mlp_backward(const MlpParams& params, const Tape& tape, const Eigen::MatrixXd& grad_output) {
  if (tape.inputs.size() != params.layers.size() || tape.fingerprint != fingerprint(params))
    throw ValidationError("tape was not produced by these parameters");
  if (grad_output.rows() != params.out_dim() || grad_output.cols() != tape.output.cols())
    throw ShapeError("grad_output shape does not match network output");
  Backward out;
  out.grads.layers.resize(params.layers.size());
  Eigen::MatrixXd delta = grad_output;  // gradient w.r.t. pre-activation of current layer
  for (std::size_t k = params.layers.size(); k-- > 0;) {
    const auto& l = params.layers[k];
    const Eigen::MatrixXd& in = tape.inputs[k];
    out.grads.layers[k].weight = delta * in.transpose();
    out.grads.layers[k].bias = delta.rowwise().sum();
    Eigen::MatrixXd grad_in = l.weight.transpose() * delta;
    if (k > 0) {
      // `in` is tanh of the previous pre-activation.
      delta = grad_in.array() * (1.0 - in.array().square());
    } else {
      out.grad_input = std::move(grad_in);
    }
  }
  return out;
}

Eigen::VectorXd flatten(const MlpParams& params) {
  Eigen::VectorXd flat(params.parameter_count());
  Eigen::Index pos = 0;
  for (const auto& l : params.layers) {
    flat.segment(pos, l.weight.size()) = Eigen::Map<const Eigen::VectorXd>(l.weight.data(), l.weight.size());
    pos += l.weight.size();
    flat.segment(pos, l.bias.size()) = l.bias;
    pos += l.bias.size();
  }
  return flat;
}

void unflatten(const Eigen::VectorXd& flat, MlpParams& params) {
  if (flat.size() != params.parameter_count()) throw ShapeError("flat parameter length mismatch");
  Eigen::Index pos = 0;
  for (auto& l : params.layers) {
    Eigen::Map<Eigen::VectorXd>(l.weight.data(), l.weight.size()) = flat.segment(pos, l.weight.size());
    pos += l.weight.size();
    l.bias = flat.segment(pos, l.bias.size());
    pos += l.bias.size();
  }
}

AdamState AdamState::for_size(Eigen::Index n, double learning_rate) {
  AdamState s;
  s.first_moment = Eigen::VectorXd::Zero(n);
  s.second_moment = Eigen::VectorXd::Zero(n);
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(AdamState& state, Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size())
    throw ShapeError("Adam state, parameters and gradients must have equal length");
  if (state.step < 0) throw ValidationError("negative Adam step counter");
  state.step += 1;
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
  state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

void adam_step(AdamState& state, MlpParams& params, const GradientBundle& grads) {
  if (grads.layers.size() != params.layers.size()) throw ShapeError("gradient depth mismatch");
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    if (grads.layers[k].weight.rows() != params.layers[k].weight.rows() ||
        grads.layers[k].weight.cols() != params.layers[k].weight.cols() ||
        grads.layers[k].bias.size() != params.layers[k].bias.size())
      throw ShapeError("gradient layer " + std::to_string(k) + " shape mismatch");
  }
  Eigen::VectorXd flat = flatten(params);
  adam_step(state, flat, grads.flatten());
  unflatten(flat, params);
}

Eigen::VectorXd finite_diff_grad(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& params, double step) {
  if (!(step > 0.0)) throw ValidationError("finite-difference step must be positive");
  Eigen::VectorXd grad(params.size());
  Eigen::VectorXd x = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw ValidationError("non-finite function value during finite differencing");
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace mmvae::nn
