#include <Eigen/SparseCholesky>

#include <cmath>
#include <limits>

#include "isdm/inference.hpp"

namespace isdm {

const char* to_string(FitMode mode) {
  switch (mode) {
    case FitMode::automatic: return "auto";
    case FitMode::joint: return "joint";
    case FitMode::laplace: return "laplace";
  }
  return "?";
}

FitMode parse_fit_mode(const std::string& s) {
  if (s == "auto") return FitMode::automatic;
  if (s == "joint") return FitMode::joint;
  if (s == "laplace") return FitMode::laplace;
  throw SpecificationError("unknown fit mode '" + s + "' (expected auto, joint or laplace)");
}

FitMode resolve_fit_mode(const JointObjective& objective, const FitOptions& options) {
  if (options.mode != FitMode::automatic) return options.mode;
  const auto& spec = objective.spec();
  const auto is_free = [&](std::size_t i) { return spec.parameters[i].used && !spec.parameters[i].fixed; };
  for (const auto& f : spec.fields) {
    if (!spec.parameters[f.log_tau].used) continue;
    if (is_free(f.log_tau) || is_free(f.log_kappa)) return FitMode::laplace;
    if (spec.mesh->vertex_count() > options.laplace_vertex_threshold) return FitMode::laplace;
  }
  for (const auto& d : spec.datasets)
    if (d.binding.log_sd_overdispersion && is_free(*d.binding.log_sd_overdispersion)) return FitMode::laplace;
  return FitMode::joint;
}

namespace {

Eigen::VectorXd gather(const Eigen::VectorXd& v, const std::vector<std::size_t>& idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[static_cast<Eigen::Index>(idx[k])];
  return out;
}

void scatter(Eigen::VectorXd& v, const std::vector<std::size_t>& idx, const Eigen::VectorXd& x) {
  for (std::size_t k = 0; k < idx.size(); ++k) v[static_cast<Eigen::Index>(idx[k])] = x[static_cast<Eigen::Index>(k)];
}

Eigen::SparseMatrix<double> restrict_to(const Eigen::SparseMatrix<double>& h, const std::vector<std::size_t>& idx) {
  std::vector<Eigen::Index> pos(static_cast<std::size_t>(h.rows()), -1);
  for (std::size_t k = 0; k < idx.size(); ++k) pos[idx[k]] = static_cast<Eigen::Index>(k);
  std::vector<Eigen::Triplet<double>> t;
  for (int c = 0; c < h.outerSize(); ++c)
    for (Eigen::SparseMatrix<double>::InnerIterator it(h, c); it; ++it) {
      const auto r = pos[static_cast<std::size_t>(it.row())], cc = pos[static_cast<std::size_t>(it.col())];
      if (r >= 0 && cc >= 0) t.emplace_back(r, cc, it.value());
    }
  const auto n = static_cast<Eigen::Index>(idx.size());
  Eigen::SparseMatrix<double> out(n, n);
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

using Ldlt = Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>;

/// Factorises h, adding a growing diagonal shift until it is positive definite.
/// Returns the shift used (0 when h itself is PD).
double factor_pd(Ldlt& solver, const Eigen::SparseMatrix<double>& h) {
  double shift = 0.0;
  const double scale = std::max(1.0, h.diagonal().cwiseAbs().maxCoeff());
  for (int attempt = 0; attempt < 30; ++attempt) {
    Eigen::SparseMatrix<double> m = h;
    if (shift > 0.0) {
      Eigen::SparseMatrix<double> eye(h.rows(), h.cols());
      eye.setIdentity();
      m += shift * eye;
    }
    solver.compute(m);
    if (solver.info() == Eigen::Success && (solver.vectorD().array() > 0.0).all()) return shift;
    shift = shift == 0.0 ? 1e-10 * scale : shift * 10.0;
  }
  throw std::runtime_error("could not factorise the latent Hessian");
}

struct InnerResult {
  double f = 0.0;
  double log_det = 0.0;
  double grad_inf = 0.0;
  bool converged = false;
  bool singular = false;  // the final Hessian needed a shift
};

/// Newton iterations over the free linear parameters with everything else held.
InnerResult inner_newton(const JointObjective& obj, Eigen::VectorXd& theta, int max_iterations) {
  const auto& idx = obj.linear_free();
  InnerResult r;
  Eigen::VectorXd g;
  r.f = obj.value_and_gradient(theta, g);
  if (idx.empty()) {
    r.converged = std::isfinite(r.f);
    return r;
  }
  Ldlt solver;
  for (int it = 0; it < max_iterations; ++it) {
    Eigen::VectorXd gl = gather(g, idx);
    r.grad_inf = gl.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(r.f)) break;
    const auto h = restrict_to(obj.latent_hessian(theta), idx);
    factor_pd(solver, h);
    const Eigen::VectorXd d = -solver.solve(gl);
    const double slope = gl.dot(d);
    if (r.grad_inf < 1e-11 * (1.0 + std::abs(r.f)) || -slope < 1e-22 * (1.0 + std::abs(r.f))) {
      r.converged = true;
      break;
    }
    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd trial = theta, g_trial;
    for (int b = 0; b < 40; ++b, t *= 0.5) {
      trial = theta;
      for (std::size_t k = 0; k < idx.size(); ++k)
        trial[static_cast<Eigen::Index>(idx[k])] += t * d[static_cast<Eigen::Index>(k)];
      const double f_trial = obj.value_and_gradient(trial, g_trial);
      if (std::isfinite(f_trial) && f_trial <= r.f + 1e-4 * t * slope) {
        theta = trial;
        g = g_trial;
        r.f = f_trial;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // no further progress is possible in floating point
      r.converged = r.grad_inf < 1e-6 * (1.0 + std::abs(r.f));
      break;
    }
  }
  r.grad_inf = gather(g, idx).lpNorm<Eigen::Infinity>();
  if (!r.converged) r.converged = r.grad_inf < 1e-6 * (1.0 + std::abs(r.f));
  const auto h = restrict_to(obj.latent_hessian(theta), idx);
  r.singular = factor_pd(solver, h) > 0.0;
  r.log_det = solver.vectorD().array().log().sum();
  return r;
}

struct OuterEval {
  double value;
  InnerResult inner;
};

OuterEval outer_eval(const JointObjective& obj, Eigen::VectorXd& theta, int max_inner) {
  InnerResult in;
  try {
    in = inner_newton(obj, theta, max_inner);
  } catch (const std::runtime_error&) {
    return {std::numeric_limits<double>::infinity(), in};
  }
  const double v = in.f + 0.5 * in.log_det;
  return {std::isfinite(v) ? v : std::numeric_limits<double>::infinity(), in};
}

double step_for(double x, double rel) { return rel * std::max(1.0, std::abs(x)); }

FitResult fit_joint(const JointObjective& obj, const FitOptions& options, Eigen::VectorXd theta) {
  const auto free = obj.free_parameters();
  const Objective fn = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    Eigen::VectorXd th = theta, full;
    scatter(th, free, x);
    const double f = obj.value_and_gradient(th, full);
    g = gather(full, free);
    return f;
  };
  LbfgsOptions lo;
  lo.max_iterations = options.max_iterations;
  lo.tolerance = options.tolerance;
  lo.memory = options.memory;
  auto r = minimize_lbfgs(fn, gather(theta, free), lo);

  FitResult fit;
  fit.mode = FitMode::joint;
  fit.iterations = r.iterations;
  fit.line_search_failures = r.line_search_failures;

  if (!r.converged && std::isfinite(r.f) && !free.empty() && free.size() <= options.newton_polish_limit) {
    for (int it = 0; it < 20 && !gradient_converged(r.gradient, r.f, options.tolerance); ++it) {
      const Eigen::MatrixXd h = finite_difference_hessian(fn, r.x);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
      Eigen::VectorXd d;
      if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0.0).all())
        d = -ldlt.solve(r.gradient);
      else
        d = -r.gradient;
      const double slope = d.dot(r.gradient);
      if (!(slope < 0.0)) break;
      double t = 1.0;
      bool accepted = false;
      Eigen::VectorXd g_new;
      for (int b = 0; b < 40; ++b, t *= 0.5) {
        const Eigen::VectorXd x_new = r.x + t * d;
        const double f_new = fn(x_new, g_new);
        if (std::isfinite(f_new) && f_new <= r.f + 1e-4 * t * slope) {
          r.x = x_new;
          r.f = f_new;
          r.gradient = g_new;
          accepted = true;
          break;
        }
      }
      ++fit.iterations;
      if (!accepted) {
        ++fit.line_search_failures;
        break;
      }
    }
    r.converged = gradient_converged(r.gradient, r.f, options.tolerance);
  }

  scatter(theta, free, r.x);
  fit.optimum = theta;
  fit.neg_log_posterior = obj.value(theta);
  fit.objective = fit.neg_log_posterior;
  fit.gradient_norm = r.gradient.size() ? r.gradient.lpNorm<Eigen::Infinity>() : 0.0;
  fit.converged = r.converged && std::isfinite(fit.neg_log_posterior);
  return fit;
}

FitResult fit_laplace(const JointObjective& obj, const FitOptions& options, Eigen::VectorXd theta) {
  const auto& outer = obj.nonlinear_free();
  FitResult fit;
  fit.mode = FitMode::laplace;
  Eigen::VectorXd warm = theta;

  const Objective fn = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    Eigen::VectorXd center = warm;
    scatter(center, outer, x);
    const auto c = outer_eval(obj, center, options.inner_max_iterations);
    g = Eigen::VectorXd::Zero(x.size());
    if (!std::isfinite(c.value)) return c.value;
    for (std::size_t k = 0; k < outer.size(); ++k) {
      const auto i = static_cast<Eigen::Index>(outer[k]);
      const double h = step_for(center[i], options.outer_step);
      Eigen::VectorXd plus = center, minus = center;
      plus[i] += h;
      minus[i] -= h;
      const double fp = outer_eval(obj, plus, options.inner_max_iterations).value;
      const double fm = outer_eval(obj, minus, options.inner_max_iterations).value;
      if (!std::isfinite(fp) || !std::isfinite(fm)) return std::numeric_limits<double>::infinity();
      g[static_cast<Eigen::Index>(k)] = (fp - fm) / (2.0 * h);
    }
    warm = center;
    return c.value;
  };

  OptimResult r;
  if (outer.empty()) {
    r.x = Eigen::VectorXd(0);
    r.gradient = Eigen::VectorXd(0);
    r.converged = true;
  } else {
    LbfgsOptions lo;
    lo.max_iterations = options.max_iterations;
    lo.tolerance = options.tolerance;
    lo.memory = options.memory;
    r = minimize_lbfgs(fn, gather(theta, outer), lo);
  }
  Eigen::VectorXd final_theta = warm;
  scatter(final_theta, outer, r.x);
  const auto c = outer_eval(obj, final_theta, options.inner_max_iterations);

  fit.optimum = final_theta;
  fit.objective = c.value;
  fit.neg_log_posterior = c.inner.f;
  fit.iterations = r.iterations;
  fit.line_search_failures = r.line_search_failures;
  const double outer_norm = r.gradient.size() ? r.gradient.lpNorm<Eigen::Infinity>() : 0.0;
  fit.gradient_norm = std::max(outer_norm, c.inner.grad_inf);
  fit.converged = r.converged && c.inner.converged && std::isfinite(c.value);
  if (!c.inner.converged) fit.diagnostic = "inner Newton iterations did not converge";
  return fit;
}

}  // namespace

double laplace_outer_objective(const JointObjective& objective, Eigen::VectorXd& theta, int max_inner) {
  return outer_eval(objective, theta, max_inner).value;
}

FitResult fit_map(const JointObjective& objective, const FitOptions& options, std::optional<Eigen::VectorXd> init) {
  Eigen::VectorXd theta = init ? *init : objective.spec().initial();
  if (theta.size() != static_cast<Eigen::Index>(objective.size()))
    throw SpecificationError("initial vector has the wrong length");
  // held parameters always take their configured values
  for (std::size_t i = 0; i < objective.size(); ++i)
    if (objective.spec().parameters[i].fixed) theta[static_cast<Eigen::Index>(i)] = objective.spec().parameters[i].init;

  const FitMode mode = resolve_fit_mode(objective, options);
  FitResult fit = mode == FitMode::laplace ? fit_laplace(objective, options, std::move(theta))
                                           : fit_joint(objective, options, std::move(theta));
  if (fit.diagnostic.empty()) {
    if (fit.converged) fit.diagnostic = "converged";
    else if (fit.iterations >= options.max_iterations) fit.diagnostic = "iteration limit reached";
    else fit.diagnostic = "line search could not make progress";
  }
  fit.standard_errors.assign(objective.size(), std::nullopt);
  if (options.standard_errors && std::isfinite(fit.neg_log_posterior)) laplace_standard_errors(objective, fit, options);
  return fit;
}

FitResult fit_map(const ModelSpec& spec, const FitOptions& options, std::optional<Eigen::VectorXd> init) {
  JointObjective objective(spec, options.threads);
  return fit_map(objective, options, std::move(init));
}

void laplace_standard_errors(const JointObjective& obj, FitResult& fit, const FitOptions& options) {
  const auto& spec = obj.spec();
  fit.standard_errors.assign(obj.size(), std::nullopt);
  fit.covariance_index.clear();
  fit.covariance.resize(0, 0);
  fit.curvature_ok = false;
  const auto reportable = [&](std::size_t i) {
    const auto b = spec.parameters[i].block;
    return b != ParameterBlock::field_latent && b != ParameterBlock::noise_latent;
  };

  if (fit.mode == FitMode::joint) {
    const auto free = obj.free_parameters();
    const Eigen::VectorXd theta = fit.optimum;
    const Objective fn = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
      Eigen::VectorXd th = theta, full;
      scatter(th, free, x);
      const double f = obj.value_and_gradient(th, full);
      g = gather(full, free);
      return f;
    };
    const Eigen::MatrixXd h = finite_difference_hessian(fn, gather(theta, free));
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (free.empty() || llt.info() != Eigen::Success || !h.allFinite()) {
      fit.curvature_diagnostic = free.empty() ? "no free parameters" : "Hessian is not positive definite; standard errors withheld";
      return;
    }
    fit.covariance_index = free;
    fit.covariance = llt.solve(Eigen::MatrixXd::Identity(h.rows(), h.cols()));
  } else {
    const auto& lin = obj.linear_free();
    const auto& outer = obj.nonlinear_free();
    Eigen::VectorXd theta = fit.optimum;
    Eigen::MatrixXd cov_lin, cov_out;
    if (!lin.empty()) {
      const Eigen::MatrixXd h = Eigen::MatrixXd(restrict_to(obj.latent_hessian(theta), lin));
      Eigen::LLT<Eigen::MatrixXd> llt(h);
      if (llt.info() != Eigen::Success) {
        fit.curvature_diagnostic = "latent Hessian is not positive definite; standard errors withheld";
        return;
      }
      cov_lin = llt.solve(Eigen::MatrixXd::Identity(h.rows(), h.cols()));
    }
    if (!outer.empty()) {
      const auto k = static_cast<Eigen::Index>(outer.size());
      Eigen::MatrixXd h(k, k);
      std::vector<double> steps(outer.size());
      for (std::size_t a = 0; a < outer.size(); ++a) steps[a] = step_for(theta[static_cast<Eigen::Index>(outer[a])], 2e-3);
      const auto at = [&](std::vector<std::pair<std::size_t, double>> moves) {
        Eigen::VectorXd th = theta;
        for (auto [a, s] : moves) th[static_cast<Eigen::Index>(outer[a])] += s;
        return laplace_outer_objective(obj, th, options.inner_max_iterations);
      };
      const double f0 = at({});
      for (std::size_t a = 0; a < outer.size(); ++a) {
        const double ha = steps[a];
        h(a, a) = (at({{a, ha}}) - 2.0 * f0 + at({{a, -ha}})) / (ha * ha);
        for (std::size_t b = 0; b < a; ++b) {
          const double hb = steps[b];
          const double v = (at({{a, ha}, {b, hb}}) - at({{a, ha}, {b, -hb}}) - at({{a, -ha}, {b, hb}}) +
                            at({{a, -ha}, {b, -hb}})) /
                           (4.0 * ha * hb);
          h(a, b) = h(b, a) = v;
        }
      }
      Eigen::LLT<Eigen::MatrixXd> llt(h);
      if (llt.info() != Eigen::Success || !h.allFinite()) {
        fit.curvature_diagnostic = "outer Hessian is not positive definite; standard errors withheld";
        return;
      }
      cov_out = llt.solve(Eigen::MatrixXd::Identity(k, k));
    }
    fit.covariance_index = lin;
    fit.covariance_index.insert(fit.covariance_index.end(), outer.begin(), outer.end());
    const auto nl = static_cast<Eigen::Index>(lin.size()), no = static_cast<Eigen::Index>(outer.size());
    fit.covariance = Eigen::MatrixXd::Zero(nl + no, nl + no);
    if (nl) fit.covariance.topLeftCorner(nl, nl) = cov_lin;
    if (no) fit.covariance.bottomRightCorner(no, no) = cov_out;
    if (fit.covariance_index.empty()) {
      fit.curvature_diagnostic = "no free parameters";
      return;
    }
  }
  fit.curvature_ok = true;
  for (std::size_t k = 0; k < fit.covariance_index.size(); ++k) {
    const auto i = fit.covariance_index[k];
    const double v = fit.covariance(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    if (reportable(i) && v > 0.0) fit.standard_errors[i] = std::sqrt(v);
  }
}

// ---------------------------------------------------------------------------

PredictionGrid predict_grid(const JointObjective& obj, const FitResult& fit, const PredictOptions& options) {
  if (!(options.resolution > 0.0)) throw SpecificationError("grid resolution must be positive");
  const auto& spec = obj.spec();
  if (spec.targets.empty()) throw SpecificationError("the model defines no prediction targets");
  const auto& mesh = *spec.mesh;
  double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
  for (const auto& p : mesh.boundary().ring) {
    x0 = std::min(x0, p.x);
    y0 = std::min(y0, p.y);
    x1 = std::max(x1, p.x);
    y1 = std::max(y1, p.y);
  }
  const auto count = [&](double span) {
    return static_cast<std::size_t>(std::max(1.0, std::ceil(span / options.resolution - 1e-9)));
  };
  const std::size_t nx = count(x1 - x0), ny = count(y1 - y0);

  PredictionGrid grid;
  grid.resolution = options.resolution;
  std::vector<EvalPoint> points;
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const Point2D p{x0 + (static_cast<double>(i) + 0.5) * options.resolution,
                      y0 + (static_cast<double>(j) + 0.5) * options.resolution};
      if (mesh.try_locate(p)) points.push_back(obj.model().at_point(p));
      else ++grid.dropped;
    }

  std::vector<Eigen::Index> pos(spec.size(), -1);
  for (std::size_t k = 0; k < fit.covariance_index.size(); ++k)
    pos[fit.covariance_index[k]] = static_cast<Eigen::Index>(k);
  const std::span<const double> th(fit.optimum.data(), static_cast<std::size_t>(fit.optimum.size()));

  for (const auto& target : spec.targets) {
    if (!options.targets.empty() &&
        std::find(options.targets.begin(), options.targets.end(), target.name) == options.targets.end())
      continue;
    LinearPredictor lp = target.ecological;
    if (options.include_bias) lp.terms.insert(lp.terms.end(), target.bias.terms.begin(), target.bias.terms.end());
    const PredictorDesign design(obj.model(), lp, points);
    const Eigen::VectorXd eta = design.eta(th);
    PredictionLayer layer;
    layer.target = target.name;
    const auto& j = design.linear();
    for (Eigen::Index r = 0; r < j.rows(); ++r) {
      std::vector<std::pair<Eigen::Index, double>> a;
      if (design.has_nonlinear_terms()) {
        Eigen::VectorXd unit = Eigen::VectorXd::Zero(j.rows()), g = Eigen::VectorXd::Zero(fit.optimum.size());
        unit[r] = 1.0;
        design.accumulate_gradient(th, unit, std::span<double>(g.data(), static_cast<std::size_t>(g.size())));
        for (Eigen::Index i = 0; i < g.size(); ++i)
          if (g[i] != 0.0 && pos[static_cast<std::size_t>(i)] >= 0) a.emplace_back(pos[static_cast<std::size_t>(i)], g[i]);
      } else {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(j, r); it; ++it)
          if (pos[static_cast<std::size_t>(it.col())] >= 0) a.emplace_back(pos[static_cast<std::size_t>(it.col())], it.value());
      }
      double var = 0.0;
      for (auto [p, vp] : a)
        for (auto [q, vq] : a) var += vp * vq * fit.covariance(p, q);
      const double se = fit.curvature_ok ? std::sqrt(std::max(var, 0.0)) : std::numeric_limits<double>::quiet_NaN();
      layer.points.push_back({points[static_cast<std::size_t>(r)].location, eta[r], se});
    }
    grid.layers.push_back(std::move(layer));
  }
  return grid;
}

double confounding_curvature(const JointObjective& obj, const Eigen::VectorXd& theta, const std::string& plus,
                             const std::string& minus) {
  const auto p = static_cast<Eigen::Index>(obj.spec().index(plus));
  const auto m = static_cast<Eigen::Index>(obj.spec().index(minus));
  const auto h = obj.data_hessian(theta);
  return h.coeff(p, p) + h.coeff(m, m) - h.coeff(p, m) - h.coeff(m, p);
}

}  // namespace isdm
