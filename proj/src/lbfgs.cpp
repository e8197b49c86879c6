#include "mmvae/lbfgs.hpp"

#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>
#include <vector>

namespace mmvae {

namespace {

struct Trial {
  double alpha;
  double f;
  double dg;  // directional derivative
  Eigen::VectorXd x;
  Eigen::VectorXd g;
};

double cubic_min(double a, double fa, double da, double b, double fb, double db) {
  // Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), clamped into [lo, hi].
  const double lo = std::min(a, b);
  const double hi = std::max(a, b);
  const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - da * db;
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), b - a);
    const double t = b - (b - a) * ((db + d2 - d1) / (db - da + 2.0 * d2));
    if (std::isfinite(t)) return std::min(std::max(t, lo + 0.1 * (hi - lo)), hi - 0.1 * (hi - lo));
  }
  return 0.5 * (a + b);
}

// Strong Wolfe line search (bracketing + zoom).
// Steps never exceed alpha_max, the distance to the box along dir.
bool line_search(const Objective& f, const Eigen::VectorXd& x, double fx, const Eigen::VectorXd& gx,
                 const Eigen::VectorXd& dir, double alpha0, double alpha_max, const Eigen::VectorXd& lower,
                 const Eigen::VectorXd& upper, const LbfgsOptions& opt, Trial& out, int& evals) {
  const double dg0 = gx.dot(dir);
  if (!(dg0 < 0.0) || !(alpha_max > 0.0)) return false;
  auto eval = [&](double alpha) {
    Trial t{alpha, 0.0, 0.0, (x + alpha * dir).cwiseMax(lower).cwiseMin(upper), Eigen::VectorXd::Zero(x.size())};
    t.f = f(t.x, t.g);
    ++evals;
    if (!std::isfinite(t.f) || !t.g.allFinite()) {
      t.f = std::numeric_limits<double>::infinity();
      t.dg = std::numeric_limits<double>::quiet_NaN();
    } else {
      t.dg = t.g.dot(dir);
    }
    return t;
  };

  // Near a minimum the function differences drown in rounding error; then accept
  // steps by the approximate Wolfe test on the directional derivative alone.
  const double noise = 1e-11 * std::max(1.0, std::abs(fx));
  auto approx_wolfe = [&](const Trial& t) {
    return std::isfinite(t.f) && t.f <= fx + noise && t.dg <= (1.0 - 2.0 * opt.wolfe_c1) * -dg0 &&
           std::abs(t.dg) <= -opt.wolfe_c2 * dg0;
  };

  Trial prev{0.0, fx, dg0, x, gx};
  double alpha = std::min(alpha0, alpha_max);
  int iters = 0;
  auto zoom = [&](Trial lo, Trial hi) -> bool {
    while (iters++ < opt.max_line_search) {
      double a;
      if (std::isfinite(hi.f) && std::isfinite(hi.dg))
        a = cubic_min(lo.alpha, lo.f, lo.dg, hi.alpha, hi.f, hi.dg);
      else
        a = 0.5 * (lo.alpha + hi.alpha);
      Trial t = eval(a);
      if (approx_wolfe(t)) {
        out = std::move(t);
        return true;
      }
      if (!std::isfinite(t.f) || t.f > fx + opt.wolfe_c1 * a * dg0 || t.f >= lo.f) {
        hi = std::move(t);
      } else {
        if (std::abs(t.dg) <= -opt.wolfe_c2 * dg0) {
          out = std::move(t);
          return true;
        }
        if (t.dg * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = std::move(t);
      }
      if (std::abs(hi.alpha - lo.alpha) < 1e-16 * std::max(1.0, lo.alpha)) break;
    }
    // Accept the best sufficient-decrease point found so far.
    if (lo.alpha > 0.0 && lo.f < fx) {
      out = std::move(lo);
      return true;
    }
    return false;
  };

  while (iters++ < opt.max_line_search) {
    Trial t = eval(alpha);
    if (approx_wolfe(t)) {
      out = std::move(t);
      return true;
    }
    if (!std::isfinite(t.f)) {
      // Stepped out of the domain: shrink.
      return zoom(prev, std::move(t));
    }
    if (t.f > fx + opt.wolfe_c1 * alpha * dg0 || (prev.alpha > 0.0 && t.f >= prev.f)) return zoom(prev, std::move(t));
    if (std::abs(t.dg) <= -opt.wolfe_c2 * dg0) {
      out = std::move(t);
      return true;
    }
    if (t.dg >= 0.0) return zoom(std::move(t), prev);
    if (alpha >= alpha_max) {
      // Still descending at the box edge: stop there.
      out = std::move(t);
      return true;
    }
    prev = std::move(t);
    alpha = std::min(2.0 * alpha, alpha_max);
  }
  if (prev.alpha > 0.0 && prev.f < fx) {
    out = std::move(prev);
    return true;
  }
  return false;
}

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& f, const Eigen::VectorXd& x0, const LbfgsOptions& opt) {
  const double inf = std::numeric_limits<double>::infinity();
  return lbfgs_minimize(f, x0, Eigen::VectorXd::Constant(x0.size(), -inf), Eigen::VectorXd::Constant(x0.size(), inf),
                        opt);
}

LbfgsResult lbfgs_minimize(const Objective& f, const Eigen::VectorXd& x0, const Eigen::VectorXd& lower,
                           const Eigen::VectorXd& upper, const LbfgsOptions& opt) {
  if (lower.size() != x0.size() || upper.size() != x0.size() || (lower.array() > upper.array()).any())
    throw std::invalid_argument("lbfgs: bounds do not match the start point");
  LbfgsResult res;
  res.x = x0.cwiseMax(lower).cwiseMin(upper);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(x0.size());
  res.value = f(res.x, g);
  res.evaluations = 1;
  if (!std::isfinite(res.value) || !g.allFinite()) {
    res.message = "non-finite objective at the initial point";
    return res;
  }
  // A coordinate is held when it sits on a bound and the gradient pushes it outward.
  auto held_mask = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& grad) {
    std::vector<bool> held(static_cast<std::size_t>(x.size()));
    for (Eigen::Index i = 0; i < x.size(); ++i)
      held[static_cast<std::size_t>(i)] = (x[i] <= lower[i] && grad[i] > 0.0) || (x[i] >= upper[i] && grad[i] < 0.0);
    return held;
  };
  auto project = [](Eigen::VectorXd v, const std::vector<bool>& held) {
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (held[static_cast<std::size_t>(i)]) v[i] = 0.0;
    return v;
  };
  std::vector<bool> held = held_mask(res.x, g);
  Eigen::VectorXd pg = project(g, held);
  res.gradient_norm = x0.size() ? pg.lpNorm<Eigen::Infinity>() : 0.0;
  std::deque<Eigen::VectorXd> s_hist;
  std::deque<Eigen::VectorXd> y_hist;
  std::deque<double> rho_hist;
  auto reset_history = [&] {
    s_hist.clear();
    y_hist.clear();
    rho_hist.clear();
  };
  int stalled = 0;
  // At the floating-point floor a stall is accepted when the gradient is small relative to |f|.
  auto stalled_at_optimum = [&] {
    return res.gradient_norm < opt.gradient_tolerance * std::max(1.0, std::abs(res.value));
  };

  while (true) {
    if (res.gradient_norm < opt.gradient_tolerance) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      return res;
    }
    if (res.iterations >= opt.max_iterations) {
      res.message = "iteration limit reached";
      return res;
    }
    // Two-loop recursion on the free coordinates.
    Eigen::VectorXd q = -pg;
    const std::size_t m = s_hist.size();
    std::vector<double> alpha(m);
    for (std::size_t k = m; k-- > 0;) {
      alpha[k] = rho_hist[k] * s_hist[k].dot(q);
      q -= alpha[k] * y_hist[k];
    }
    if (m > 0) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t k = 0; k < m; ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(q);
      q += (alpha[k] - beta) * s_hist[k];
    }
    Eigen::VectorXd dir = project(q, held);
    double step = 1.0;
    if (m == 0) step = opt.initial_step / std::max(res.gradient_norm, 1e-300);
    if (g.dot(dir) >= 0.0) {
      // Curvature history is unusable; restart from steepest descent.
      reset_history();
      dir = -pg;
      step = opt.initial_step / std::max(res.gradient_norm, 1e-300);
    }
    double alpha_max = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < dir.size(); ++i) {
      if (dir[i] < 0.0) alpha_max = std::min(alpha_max, (lower[i] - res.x[i]) / dir[i]);
      if (dir[i] > 0.0) alpha_max = std::min(alpha_max, (upper[i] - res.x[i]) / dir[i]);
    }
    Trial t;
    if (!line_search(f, res.x, res.value, g, dir, step, alpha_max, lower, upper, opt, t, res.evaluations)) {
      if (m > 0) {
        // Retry once with steepest descent before giving up.
        reset_history();
        continue;
      }
      res.converged = stalled_at_optimum();
      res.message = res.converged ? "stalled within relative gradient tolerance" : "line search failed";
      return res;
    }
    ++res.iterations;
    Eigen::VectorXd s = t.x - res.x;
    Eigen::VectorXd y = t.g - g;
    const double sy = s.dot(y);
    const double decrease = res.value - t.f;
    res.x = std::move(t.x);
    g = std::move(t.g);
    const double previous = res.value;
    res.value = t.f;
    const auto new_held = held_mask(res.x, g);
    if (new_held != held) reset_history();
    held = new_held;
    pg = project(g, held);
    res.gradient_norm = pg.lpNorm<Eigen::Infinity>();
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opt.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    if (decrease <= opt.min_relative_decrease * std::max(1.0, std::abs(previous)))
      ++stalled;
    else
      stalled = 0;
    if (stalled >= opt.max_stalled_iterations && res.gradient_norm >= opt.gradient_tolerance) {
      res.converged = stalled_at_optimum();
      res.message = res.converged ? "stalled within relative gradient tolerance" : "no further decrease";
      return res;
    }
  }
}

}  // namespace mmvae
