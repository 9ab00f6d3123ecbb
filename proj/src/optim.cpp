#include "longseg/optim.hpp"

#include <cmath>
#include <deque>
#include <limits>

#include "longseg/errors.hpp"

namespace longseg {

LbfgsResult lbfgs_minimize(const ObjectiveFn& fn, const Eigen::VectorXd& x0,
                           const LbfgsOptions& opts) {
  LbfgsResult res;
  res.x = x0;

  Eigen::VectorXd g(x0.size());
  res.f = fn(res.x, &g);
  if (!std::isfinite(res.f))
    throw NumericError("lbfgs_minimize: infinite objective at start point");

  struct Pair {
    Eigen::VectorXd s, y;
    double rho;
  };
  std::deque<Pair> history;
  double gamma = 1.0;
  bool made_progress = false;

  for (res.iters = 0; res.iters < opts.max_iters; ++res.iters) {
    if (g.lpNorm<Eigen::Infinity>() <= opts.grad_tol) {
      res.converged = true;
      break;
    }

    // Two-loop recursion for the search direction.
    Eigen::VectorXd q = g;
    std::vector<double> alpha(history.size());
    for (int i = static_cast<int>(history.size()) - 1; i >= 0; --i) {
      alpha[i] = history[i].rho * history[i].s.dot(q);
      q -= alpha[i] * history[i].y;
    }
    q *= gamma;
    for (std::size_t i = 0; i < history.size(); ++i) {
      const double beta = history[i].rho * history[i].y.dot(q);
      q += (alpha[i] - beta) * history[i].s;
    }
    Eigen::VectorXd dir = -q;

    double dg = dir.dot(g);
    if (dg >= 0.0) {  // not a descent direction; fall back to steepest descent
      dir = -g;
      dg = -g.squaredNorm();
      history.clear();
      gamma = 1.0;
    }

    // Weak-Wolfe line search by bisection: the Armijo condition bounds the
    // step from above, the curvature condition g_new'dir >= c2 dg from below.
    // A Wolfe point guarantees s'y > 0 so the curvature pair is usable.
    const double c2 = 0.9;
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double step = 1.0;
    double f_new = std::numeric_limits<double>::infinity();
    Eigen::VectorXd x_new, g_new(g.size());
    bool accepted = false;
    double best_armijo_step = 0.0;
    double best_f = res.f;
    Eigen::VectorXd best_x, best_g;
    for (int ls = 0; ls < opts.max_line_search; ++ls) {
      x_new = res.x + step * dir;
      f_new = fn(x_new, &g_new);
      if (!std::isfinite(f_new) ||
          f_new > res.f + opts.armijo_c1 * step * dg) {
        hi = step;
      } else {
        if (f_new < best_f) {
          best_armijo_step = step;
          best_f = f_new;
          best_x = x_new;
          best_g = g_new;
        }
        if (g_new.dot(dir) < c2 * dg) {
          lo = step;
        } else {
          accepted = true;
          break;
        }
      }
      step = std::isfinite(hi) ? 0.5 * (lo + hi) : 2.0 * step;
    }
    if (!accepted) {
      if (best_armijo_step > 0.0) {  // fall back to the best sufficient-decrease point
        x_new = std::move(best_x);
        f_new = best_f;
        g_new = std::move(best_g);
      } else {
        res.stalled = !made_progress;
        break;
      }
    }

    const Eigen::VectorXd s = x_new - res.x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      history.push_back({s, y, 1.0 / sy});
      if (static_cast<int>(history.size()) > opts.memory) history.pop_front();
      gamma = sy / y.squaredNorm();
    }

    const double improvement = res.f - f_new;
    res.x = std::move(x_new);
    res.f = f_new;
    g = g_new;
    made_progress = true;

    if (improvement <= opts.rel_f_tol * (std::abs(res.f) + 1.0)) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace longseg
