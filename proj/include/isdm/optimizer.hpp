#pragma once

#include <Eigen/Dense>

#include <functional>

namespace isdm {

/// f(x) with gradient written into g. Must return +inf (not throw) where the
/// objective is undefined so the line search can back off.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& g)>;

struct LbfgsOptions {
  int max_iterations = 500;
  int memory = 10;
  /// Converged when max|g| < tolerance * (1 + |f|).
  double tolerance = 1e-6;
  double armijo = 1e-4;
  int max_backtracks = 40;
};

struct OptimResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  int evaluations = 0;
  int line_search_failures = 0;
  bool converged = false;
  bool monotone = true;  // every accepted step lowered f
};

bool gradient_converged(const Eigen::VectorXd& g, double f, double tolerance);

/// Limited-memory BFGS with a backtracking Armijo line search. Steps are
/// tried from largest to smallest and the first acceptable one is taken.
OptimResult minimize_lbfgs(const Objective& fn, Eigen::VectorXd x0, const LbfgsOptions& options = {});

/// Central-difference Hessian of an analytic gradient, symmetrised. Step for
/// coordinate i is rel_step * max(1, |x_i|).
Eigen::MatrixXd finite_difference_hessian(const Objective& fn, const Eigen::VectorXd& x, double rel_step = 1e-5);

}  // namespace isdm
