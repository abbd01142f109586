#include "isdm/optimizer.hpp"

#include <cmath>
#include <deque>
#include <limits>

namespace isdm {

bool gradient_converged(const Eigen::VectorXd& g, double f, double tolerance) {
  if (g.size() == 0) return std::isfinite(f);
  return g.allFinite() && g.lpNorm<Eigen::Infinity>() < tolerance * (1.0 + std::abs(f));
}

namespace {

struct Pair {
  Eigen::VectorXd s, y;
  double rho;
};

Eigen::VectorXd two_loop(const std::deque<Pair>& memory, const Eigen::VectorXd& g) {
  Eigen::VectorXd q = g;
  std::vector<double> alpha(memory.size());
  for (std::size_t k = memory.size(); k-- > 0;) {
    alpha[k] = memory[k].rho * memory[k].s.dot(q);
    q -= alpha[k] * memory[k].y;
  }
  if (!memory.empty()) {
    const auto& last = memory.back();
    q *= last.s.dot(last.y) / last.y.squaredNorm();
  }
  for (std::size_t k = 0; k < memory.size(); ++k) {
    const double beta = memory[k].rho * memory[k].y.dot(q);
    q += (alpha[k] - beta) * memory[k].s;
  }
  return -q;
}

}  // namespace

OptimResult minimize_lbfgs(const Objective& fn, Eigen::VectorXd x0, const LbfgsOptions& options) {
  OptimResult r;
  r.x = std::move(x0);
  r.gradient = Eigen::VectorXd::Zero(r.x.size());
  r.f = fn(r.x, r.gradient);
  ++r.evaluations;
  if (!std::isfinite(r.f)) return r;

  std::deque<Pair> memory;
  Eigen::VectorXd g_new(r.x.size()), x_new(r.x.size());
  int failures_in_row = 0;

  while (r.iterations < options.max_iterations) {
    if (gradient_converged(r.gradient, r.f, options.tolerance)) {
      r.converged = true;
      break;
    }
    Eigen::VectorXd d = two_loop(memory, r.gradient);
    double slope = d.dot(r.gradient);
    if (!(slope < 0.0)) {
      memory.clear();
      d = -r.gradient;
      slope = d.dot(r.gradient);
    }
    double t = memory.empty() ? std::min(1.0, 1.0 / std::max(r.gradient.lpNorm<Eigen::Infinity>(), 1e-300)) : 1.0;

    bool accepted = false;
    double f_new = 0.0;
    for (int b = 0; b < options.max_backtracks; ++b, t *= 0.5) {
      x_new = r.x + t * d;
      f_new = fn(x_new, g_new);
      ++r.evaluations;
      if (std::isfinite(f_new) && f_new <= r.f + options.armijo * t * slope && g_new.allFinite()) {
        accepted = true;
        break;
      }
    }
    ++r.iterations;
    if (!accepted) {
      ++r.line_search_failures;
      if (memory.empty() || ++failures_in_row > 1) break;
      memory.clear();
      continue;
    }
    failures_in_row = 0;
    if (!(f_new < r.f) && f_new != r.f) r.monotone = false;

    Pair p{x_new - r.x, g_new - r.gradient, 0.0};
    const double sy = p.s.dot(p.y);
    if (sy > 1e-12 * p.s.norm() * p.y.norm()) {
      p.rho = 1.0 / sy;
      memory.push_back(std::move(p));
      if (static_cast<int>(memory.size()) > options.memory) memory.pop_front();
    }
    const bool stalled = f_new == r.f;
    r.x = x_new;
    r.f = f_new;
    r.gradient = g_new;
    if (stalled) {
      r.converged = gradient_converged(r.gradient, r.f, options.tolerance);
      break;
    }
  }
  if (!r.converged) r.converged = gradient_converged(r.gradient, r.f, options.tolerance);
  return r;
}

Eigen::MatrixXd finite_difference_hessian(const Objective& fn, const Eigen::VectorXd& x, double rel_step) {
  const auto n = x.size();
  Eigen::MatrixXd h(n, n);
  Eigen::VectorXd gp(n), gm(n), xp = x;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double step = rel_step * std::max(1.0, std::abs(x[i]));
    xp[i] = x[i] + step;
    fn(xp, gp);
    xp[i] = x[i] - step;
    fn(xp, gm);
    xp[i] = x[i];
    h.col(i) = (gp - gm) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

}  // namespace isdm
