#pragma once

// Dense tanh networks with explicit forward/backward passes and Adam.

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Core>

#include "mmvae/random.hpp"

namespace mmvae::nn {

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

/// Hidden layers use tanh, the final layer is affine.
struct MlpParams {
  std::vector<DenseLayer> layers;

  Eigen::Index in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  Eigen::Index out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
  Eigen::Index parameter_count() const;

  /// Throws ShapeError if consecutive layers do not chain, ValidationError on non-finite entries.
  void validate() const;
  bool operator==(const MlpParams& other) const;
};

/// Same layout as MlpParams, holding derivatives.
struct GradientBundle {
  std::vector<DenseLayer> layers;

  static GradientBundle zeros_like(const MlpParams& params);
  GradientBundle& operator+=(const GradientBundle& other);
  Eigen::VectorXd flatten() const;
};

/// Per-layer activations recorded by the forward pass (columns are samples).
struct Tape {
  std::vector<Eigen::MatrixXd> inputs;  // input to each layer
  Eigen::MatrixXd output;
  std::uint64_t fingerprint = 0;
};

/// Glorot-uniform weights, zero biases. `sizes` lists every width, input first.
MlpParams init_mlp(const std::vector<int>& sizes, Rng& rng);

std::uint64_t fingerprint(const MlpParams& params);

/// Batched forward pass; each column of `input` is one sample.
Tape mlp_forward(const MlpParams& params, const Eigen::MatrixXd& input);
Eigen::VectorXd mlp_forward(const MlpParams& params, const Eigen::VectorXd& input, Tape* tape);

struct Backward {
  GradientBundle grads;           // summed over samples
  Eigen::MatrixXd grad_input;     // in_dim x samples
};

/// Reverse-mode derivative of sum_s <output_s, grad_output_s>.
Backward mlp_backward(const MlpParams& params, const Tape& tape, const Eigen::MatrixXd& grad_output);

Eigen::VectorXd flatten(const MlpParams& params);
void unflatten(const Eigen::VectorXd& flat, MlpParams& params);

struct AdamState {
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;
  std::int64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_size(Eigen::Index n, double learning_rate = 1e-3);
  bool operator==(const AdamState& other) const = default;
};

/// One bias-corrected Adam update, in place on a flat parameter vector.
void adam_step(AdamState& state, Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads);

/// Convenience overload working directly on network parameters.
void adam_step(AdamState& state, MlpParams& params, const GradientBundle& grads);

/// Central differences of a scalar function at `params`.
Eigen::VectorXd finite_diff_grad(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& params, double step);

}  // namespace mmvae::nn
