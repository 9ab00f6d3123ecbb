#pragma once

#include <Eigen/Dense>
#include <functional>

namespace longseg {

/// Objective callback: returns f(x) and, when grad is non-null, fills the
/// gradient. May return +inf outside the feasible region (e.g. folded mesh);
/// the line search backtracks away from such points.
using ObjectiveFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct LbfgsOptions {
  int memory = 10;
  int max_iters = 100;
  double grad_tol = 1e-6;      // stop when ||g||_inf <= grad_tol
  double rel_f_tol = 1e-10;    // stop on relative objective improvement
  int max_line_search = 40;
  double armijo_c1 = 1e-4;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  int iters = 0;
  bool converged = false;
  /// True when no finite-energy descent step could be found at the start.
  bool stalled = false;
};

/// Limited-memory BFGS with backtracking Armijo line search. Accepted iterates
/// never increase the objective; the initial point must have finite value.
LbfgsResult lbfgs_minimize(const ObjectiveFn& fn, const Eigen::VectorXd& x0,
                           const LbfgsOptions& opts = {});

}  // namespace longseg
