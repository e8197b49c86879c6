#pragma once

#include <functional>

#include <Eigen/Core>

namespace mmvae {

struct LbfgsOptions {
  int memory = 10;
  int max_iterations = 500;
  double gradient_tolerance = 1e-6;  // stop when ||g||_inf falls below; a stall also counts below tol * max(1, |f|)
  double initial_step = 0.15;        // trial step length of the first iteration (along -g / ||g||_inf)
  double wolfe_c1 = 1e-4;
  double wolfe_c2 = 0.9;
  int max_line_search = 40;
  double min_relative_decrease = 1e-15;  // stagnation guard
  int max_stalled_iterations = 5;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  double gradient_norm = 0.0;  // infinity norm of the projected gradient at x
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  const char* message = "";
};

/// Objective returns f(x) and writes its gradient into the second argument.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

/// Minimizes f with limited-memory BFGS and a strong-Wolfe line search.
/// Non-finite trial values are treated as +inf and trigger backtracking.
LbfgsResult lbfgs_minimize(const Objective& f, const Eigen::VectorXd& x0, const LbfgsOptions& options = {});
/// Box-constrained variant: coordinates on a bound whose gradient points outward are held fixed,
/// steps stop at the box, and convergence uses the projected gradient.
LbfgsResult lbfgs_minimize(const Objective& f, const Eigen::VectorXd& x0, const Eigen::VectorXd& lower,
                           const Eigen::VectorXd& upper, const LbfgsOptions& options = {});

}  // namespace mmvae
