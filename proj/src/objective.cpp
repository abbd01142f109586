#include <cmath>
#include <future>

#include "isdm/inference.hpp"
#include "isdm/summation.hpp"

namespace isdm {

namespace {

// Width of the soft sum-to-zero constraint, relative to the domain area.
constexpr double kZeroIntegralScale = 1e-3;

bool is_linear(ParameterBlock b) {
  return b == ParameterBlock::fixed_effect || b == ParameterBlock::field_latent || b == ParameterBlock::noise_latent;
}

}  // namespace

JointObjective::JointObjective(ModelSpec spec, unsigned threads) : spec_(std::move(spec)), threads_(std::max(1u, threads)) {
  model_ = std::make_unique<ProcessModel>(spec_.process_model());
  for (const auto& d : spec_.datasets) {
    try {
      likelihoods_.push_back(compile_likelihood(*model_, d.data, d.binding));
    } catch (const DataError& e) {
      throw DataError("dataset '" + d.name + "': " + e.what());
    } catch (const SpecificationError& e) {
      throw SpecificationError("dataset '" + d.name + "': " + e.what());
    }
  }
  for (const auto& t : spec_.targets) {
    model_->check(t.ecological);
    model_->check(t.bias);
  }
  for (std::size_t k = 0; k < spec_.fields.size(); ++k)
    field_models_.push_back(std::make_unique<MaternFieldModel>(spec_.mesh, spec_.representation, spec_.dense_limit));
  dual_areas_ = Eigen::Map<const Eigen::VectorXd>(spec_.mesh->dual_areas().data(),
                                                  static_cast<Eigen::Index>(spec_.mesh->vertex_count()));
  for (std::size_t i = 0; i < spec_.size(); ++i) {
    const auto& p = spec_.parameters[i];
    if (p.fixed || !p.used) continue;
    (is_linear(p.block) ? linear_free_ : nonlinear_free_).push_back(i);
  }
}

JointObjective::~JointObjective() = default;

std::vector<std::size_t> JointObjective::free_parameters() const {
  std::vector<std::size_t> all;
  for (std::size_t i = 0; i < spec_.size(); ++i)
    if (!spec_.parameters[i].fixed && spec_.parameters[i].used) all.push_back(i);
  return all;
}

std::size_t JointObjective::clamp_events() const {
  std::size_t n = 0;
  for (const auto& l : likelihoods_) n += l->clamp_events();
  return n;
}

double JointObjective::value(const Eigen::VectorXd& theta) const { return evaluate(theta, nullptr, nullptr); }

double JointObjective::value_and_gradient(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const {
  return evaluate(theta, &grad, nullptr);
}

JointObjective::Decomposition JointObjective::decompose(const Eigen::VectorXd& theta) const {
  Decomposition d;
  evaluate(theta, nullptr, &d);
  return d;
}

double JointObjective::evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad, Decomposition* parts) const {
  const auto n = static_cast<Eigen::Index>(spec_.size());
  if (theta.size() != n)
    throw SpecificationError("parameter vector has " + std::to_string(theta.size()) + " entries, expected " +
                             std::to_string(n));
  const std::span<const double> th(theta.data(), static_cast<std::size_t>(n));
  if (grad) *grad = Eigen::VectorXd::Zero(n);
  CompensatedSum total;

  // priors
  CompensatedSum prior_sum;
  for (std::size_t i = 0; i < spec_.size(); ++i) {
    const auto& p = spec_.parameters[i];
    if (!p.used || !p.prior) continue;
    prior_sum += p.prior->log_density(th[i]);
    if (grad) (*grad)[static_cast<Eigen::Index>(i)] += p.prior->d_log_density(th[i]);
  }
  total += prior_sum.value();
  if (parts) parts->priors = prior_sum.value();

  // fields
  const auto nv = static_cast<Eigen::Index>(spec_.mesh->vertex_count());
  for (std::size_t k = 0; k < spec_.fields.size(); ++k) {
    const auto& f = spec_.fields[k];
    if (!spec_.parameters[f.log_tau].used) continue;
    const MaternParams mp{th[f.log_tau], th[f.log_kappa]};
    const auto off = static_cast<Eigen::Index>(f.offset);
    const Eigen::VectorXd u = theta.segment(off, nv);
    double lp = 0.0;
    if (grad) {
      const bool want_kappa = !spec_.parameters[f.log_kappa].fixed;
      const auto e = field_models_[k]->evaluate(mp, u, want_kappa);
      lp = e.log_density;
      grad->segment(off, nv) += e.grad_u;
      (*grad)[static_cast<Eigen::Index>(f.log_tau)] += e.d_log_tau;
      if (want_kappa) (*grad)[static_cast<Eigen::Index>(f.log_kappa)] += e.d_log_kappa;
    } else {
      lp = field_models_[k]->log_density(mp, u);
    }
    if (f.zero_integral) {
      const double s = kZeroIntegralScale * spec_.mesh->area();
      const double m = dual_areas_.dot(u);
      lp -= 0.5 * m * m / (s * s);
      if (grad) grad->segment(off, nv) -= dual_areas_ * (m / (s * s));
    }
    total += lp;
    if (parts) parts->fields.emplace_back(f.name, lp);
  }

  // datasets, each into its own buffer so the reduction order never changes
  const std::size_t nd = likelihoods_.size();
  std::vector<double> values(nd, 0.0);
  std::vector<Eigen::VectorXd> grads(grad ? nd : 0);
  const auto run = [&](std::size_t d) {
    std::span<double> g;
    if (grad) {
      grads[d] = Eigen::VectorXd::Zero(n);
      g = std::span<double>(grads[d].data(), static_cast<std::size_t>(n));
    }
    try {
      values[d] = likelihoods_[d]->evaluate(th, g);
    } catch (const std::exception& e) {
      throw DataError("dataset '" + spec_.datasets[d].name + "': " + e.what());
    }
  };
  if (threads_ > 1 && nd > 1) {
    std::vector<std::future<void>> jobs;
    for (std::size_t start = 0; start < nd; start += threads_) {
      jobs.clear();
      for (std::size_t d = start; d < std::min(nd, start + threads_); ++d)
        jobs.push_back(std::async(std::launch::async, run, d));
      for (auto& j : jobs) j.get();
    }
  } else {
    for (std::size_t d = 0; d < nd; ++d) run(d);
  }
  for (std::size_t d = 0; d < nd; ++d) {
    total += values[d];
    if (grad) *grad += grads[d];
    if (parts) parts->datasets.emplace_back(spec_.datasets[d].name, values[d]);
  }

  if (grad) {
    *grad = -*grad;
    for (std::size_t i = 0; i < spec_.size(); ++i)
      if (!spec_.parameters[i].used) (*grad)[static_cast<Eigen::Index>(i)] = 0.0;
  }
  const double neg = -total.value();
  if (parts) parts->neg_log_posterior = neg;
  return std::isnan(neg) ? std::numeric_limits<double>::infinity() : neg;
}

void JointObjective::add_prior_hessian(const Eigen::VectorXd& theta, std::vector<Eigen::Triplet<double>>& t) const {
  for (std::size_t i = 0; i < spec_.size(); ++i) {
    const auto& p = spec_.parameters[i];
    if (!p.used || !p.prior || !is_linear(p.block)) continue;
    const auto ii = static_cast<Eigen::Index>(i);
    t.emplace_back(ii, ii, 1.0 / (p.prior->sd * p.prior->sd));
  }
  const auto nv = static_cast<Eigen::Index>(spec_.mesh->vertex_count());
  for (std::size_t k = 0; k < spec_.fields.size(); ++k) {
    const auto& f = spec_.fields[k];
    if (!spec_.parameters[f.log_tau].used) continue;
    const auto off = static_cast<Eigen::Index>(f.offset);
    const Eigen::SparseMatrix<double> q =
        field_models_[k]->precision(MaternParams{theta[static_cast<Eigen::Index>(f.log_tau)],
                                                 theta[static_cast<Eigen::Index>(f.log_kappa)]});
    for (int c = 0; c < q.outerSize(); ++c)
      for (Eigen::SparseMatrix<double>::InnerIterator it(q, c); it; ++it)
        t.emplace_back(off + it.row(), off + it.col(), it.value());
    if (f.zero_integral) {
      const double s = kZeroIntegralScale * spec_.mesh->area();
      for (Eigen::Index a = 0; a < nv; ++a)
        for (Eigen::Index b = 0; b < nv; ++b)
          t.emplace_back(off + a, off + b, dual_areas_[a] * dual_areas_[b] / (s * s));
    }
  }
}

Eigen::SparseMatrix<double> JointObjective::data_hessian(const Eigen::VectorXd& theta) const {
  const std::span<const double> th(theta.data(), static_cast<std::size_t>(theta.size()));
  std::vector<Eigen::Triplet<double>> t;
  for (const auto& l : likelihoods_) l->add_hessian(th, t);
  const auto n = static_cast<Eigen::Index>(spec_.size());
  Eigen::SparseMatrix<double> h(n, n);
  h.setFromTriplets(t.begin(), t.end());
  return h;
}

Eigen::SparseMatrix<double> JointObjective::latent_hessian(const Eigen::VectorXd& theta) const {
  const std::span<const double> th(theta.data(), static_cast<std::size_t>(theta.size()));
  std::vector<Eigen::Triplet<double>> t;
  for (const auto& l : likelihoods_) l->add_hessian(th, t);
  add_prior_hessian(theta, t);
  const auto n = static_cast<Eigen::Index>(spec_.size());
  Eigen::SparseMatrix<double> h(n, n);
  h.setFromTriplets(t.begin(), t.end());
  return h;
}

}  // namespace isdm
