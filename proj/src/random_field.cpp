#include "isdm/random_field.hpp"

#include <Eigen/SparseCholesky>

#include <cmath>
#include <numbers>
#include <string>

namespace isdm {

double MaternParams::tau() const { return std::exp(log_tau); }
double MaternParams::kappa() const { return std::exp(log_kappa); }

MaternParams MaternParams::from_variance(double sigma2, double kappa) {
  return {log_tau_from_variance(sigma2, kappa), std::log(kappa)};
}

double matern_correlation(double kappa, double d) {
  if (d < 0.0) throw std::invalid_argument("matern_correlation: negative distance");
  if (!(kappa > 0.0)) throw std::invalid_argument("matern_correlation: kappa must be positive");
  const double x = kappa * d;
  if (x == 0.0) return 1.0;
  if (x > 700.0) return 0.0;
  return x * std::cyl_bessel_k(1.0, x);
}

double matern_correlation(const MaternParams& params, double d) { return matern_correlation(params.kappa(), d); }

double matern_correlation_dlogkappa(double kappa, double d) {
  const double x = kappa * d;
  if (x == 0.0 || x > 700.0) return 0.0;
  return -x * x * std::cyl_bessel_k(0.0, x);
}

double marginal_variance(const MaternParams& params) {
  const double tau = params.tau(), kappa = params.kappa();
  if (!(tau > 0.0) || !(kappa > 0.0) || !std::isfinite(tau) || !std::isfinite(kappa))
    throw std::invalid_argument("marginal_variance: tau and kappa must be positive and finite");
  return 1.0 / (4.0 * std::numbers::pi * tau * tau * kappa * kappa);
}

double log_tau_from_variance(double sigma2, double kappa) {
  return -std::log(4.0 * std::numbers::pi * sigma2 * kappa * kappa) / 2.0;
}

double kappa_for_range(double range) { return std::sqrt(8.0 * MaternParams::nu) / range; }

FemMatrices assemble_fem(const TriangulatedDomain& mesh) {
  const auto n = static_cast<Eigen::Index>(mesh.vertex_count());
  FemMatrices fem;
  fem.mass = Eigen::Map<const Eigen::VectorXd>(mesh.dual_areas().data(), n);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(9 * mesh.triangle_count());
  const auto& v = mesh.vertices();
  for (std::size_t t = 0; t < mesh.triangle_count(); ++t) {
    const auto& tri = mesh.triangles()[t];
    const double area = mesh.triangle_area(t);
    if (!(area > 0.0)) throw InvalidPriorError("degenerate triangle in finite-element assembly");
    // gradient of the hat function of corner i is perp(opposite edge) / (2 area)
    std::array<Point2D, 3> e;
    for (int i = 0; i < 3; ++i) e[i] = v[tri[(i + 2) % 3]] - v[tri[(i + 1) % 3]];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        trips.emplace_back(static_cast<Eigen::Index>(tri[i]), static_cast<Eigen::Index>(tri[j]),
                           dot(e[i], e[j]) / (4.0 * area));
  }
  fem.stiffness.resize(n, n);
  fem.stiffness.setFromTriplets(trips.begin(), trips.end());
  return fem;
}

Eigen::SparseMatrix<double> spde_precision_structure(const FemMatrices& fem, double kappa) {
  const auto n = fem.mass.size();
  if ((fem.mass.array() <= 0.0).any()) throw InvalidPriorError("singular lumped mass matrix");
  Eigen::SparseMatrix<double> c(n, n), cinv(n, n);
  std::vector<Eigen::Triplet<double>> dc, di;
  for (Eigen::Index i = 0; i < n; ++i) {
    dc.emplace_back(i, i, fem.mass[i]);
    di.emplace_back(i, i, 1.0 / fem.mass[i]);
  }
  c.setFromTriplets(dc.begin(), dc.end());
  cinv.setFromTriplets(di.begin(), di.end());
  const double k2 = kappa * kappa;
  Eigen::SparseMatrix<double> gcg = fem.stiffness * cinv * fem.stiffness;
  Eigen::SparseMatrix<double> q = (k2 * k2) * c + (2.0 * k2) * fem.stiffness + gcg;
  // exact symmetry regardless of product rounding
  Eigen::SparseMatrix<double> qt = q.transpose();
  return 0.5 * (q + qt);
}

// ---------------------------------------------------------------------------
// FieldPrior

struct FieldPrior::Impl {
  Eigen::MatrixXd covariance;
  Eigen::LLT<Eigen::MatrixXd> dense_llt;
  Eigen::SparseMatrix<double> precision;
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> sparse_llt;
};

namespace {

double log_det_from_llt_diagonal(const Eigen::VectorXd& diag) { return 2.0 * diag.array().log().sum(); }

double sparse_log_det(const Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>& llt) {
  Eigen::SparseMatrix<double> l = llt.matrixL();
  return log_det_from_llt_diagonal(l.diagonal());
}

constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace

FieldPrior FieldPrior::dense(Eigen::MatrixXd covariance) {
  if (covariance.rows() != covariance.cols()) throw InvalidPriorError("covariance must be square");
  if (!covariance.isApprox(covariance.transpose(), 1e-10) &&
      (covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    throw InvalidPriorError("covariance is not symmetric");
  auto impl = std::make_shared<Impl>();
  impl->covariance = std::move(covariance);
  impl->dense_llt.compute(impl->covariance);
  if (impl->dense_llt.info() != Eigen::Success) throw InvalidPriorError("covariance is not positive definite");
  FieldPrior prior;
  prior.representation_ = FieldRepresentation::dense_covariance;
  prior.log_det_precision_ = -log_det_from_llt_diagonal(Eigen::MatrixXd(impl->dense_llt.matrixL()).diagonal());
  prior.impl_ = std::move(impl);
  return prior;
}

FieldPrior FieldPrior::sparse(Eigen::SparseMatrix<double> precision) {
  if (precision.rows() != precision.cols()) throw InvalidPriorError("precision must be square");
  Eigen::SparseMatrix<double> diff = precision - Eigen::SparseMatrix<double>(precision.transpose());
  if (diff.nonZeros() > 0 && diff.coeffs().cwiseAbs().maxCoeff() > 1e-10)
    throw InvalidPriorError("precision is not symmetric");
  auto impl = std::make_shared<Impl>();
  impl->precision = std::move(precision);
  impl->sparse_llt.compute(impl->precision);
  if (impl->sparse_llt.info() != Eigen::Success) throw InvalidPriorError("precision is not positive definite");
  FieldPrior prior;
  prior.representation_ = FieldRepresentation::sparse_precision;
  prior.log_det_precision_ = sparse_log_det(impl->sparse_llt);
  prior.impl_ = std::move(impl);
  return prior;
}

Eigen::Index FieldPrior::size() const {
  return representation_ == FieldRepresentation::dense_covariance ? impl_->covariance.rows() : impl_->precision.rows();
}

const Eigen::MatrixXd& FieldPrior::covariance() const {
  if (representation_ != FieldRepresentation::dense_covariance) throw std::logic_error("prior is not dense");
  return impl_->covariance;
}

const Eigen::SparseMatrix<double>& FieldPrior::precision() const {
  if (representation_ != FieldRepresentation::sparse_precision) throw std::logic_error("prior is not sparse");
  return impl_->precision;
}

Eigen::VectorXd FieldPrior::apply_precision(const Eigen::VectorXd& u) const {
  if (u.size() != size()) throw std::invalid_argument("field realization has the wrong length");
  if (representation_ == FieldRepresentation::dense_covariance) return impl_->dense_llt.solve(u);
  return impl_->precision * u;
}

double FieldPrior::log_density(const Eigen::VectorXd& u) const {
  const double quad = u.dot(apply_precision(u));
  return -0.5 * static_cast<double>(size()) * kLog2Pi + 0.5 * log_det_precision_ - 0.5 * quad;
}

Eigen::VectorXd FieldPrior::sample(std::mt19937_64& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
  if (representation_ == FieldRepresentation::dense_covariance) return impl_->dense_llt.matrixL() * z;
  // Q = P^T L L^T P, so x = P^T L^-T z has covariance Q^-1
  Eigen::VectorXd y = impl_->sparse_llt.matrixU().solve(z);
  return impl_->sparse_llt.permutationPinv() * y;
}

FieldPrior build_dense_covariance(const TriangulatedDomain& mesh, const MaternParams& params, std::size_t dense_limit) {
  const std::size_t n = mesh.vertex_count();
  if (n > dense_limit)
    throw InvalidPriorError("mesh has " + std::to_string(n) + " vertices, above the dense limit of " +
                            std::to_string(dense_limit) + "; use the sparse precision path");
  const double sigma2 = marginal_variance(params);
  const double kappa = params.kappa();
  const auto& v = mesh.vertices();
  Eigen::MatrixXd cov(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = sigma2 * (1.0 + kDenseJitter);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = distance(v[i], v[j]);
      if (d == 0.0) throw InvalidPriorError("invalid mesh: two vertices at distance 0");
      const double c = sigma2 * matern_correlation(kappa, d);
      cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c;
      cov(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = c;
    }
  }
  return FieldPrior::dense(std::move(cov));
}

FieldPrior build_sparse_precision(const TriangulatedDomain& mesh, const MaternParams& params) {
  const FemMatrices fem = assemble_fem(mesh);
  const double tau = params.tau();
  return FieldPrior::sparse((tau * tau) * spde_precision_structure(fem, params.kappa()));
}

double field_log_density(const Eigen::VectorXd& u, const FieldPrior& prior) { return prior.log_density(u); }

Eigen::VectorXd sample_field(const FieldPrior& prior, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return prior.sample(rng);
}

// ---------------------------------------------------------------------------
// MaternFieldModel

struct MaternFieldModel::Cache {
  double log_kappa = 0.0;
  // sparse: structure Q~ = Q / tau^2 and its derivative in log kappa
  Eigen::SparseMatrix<double> structure;
  Eigen::SparseMatrix<double> structure_dlogkappa;
  std::shared_ptr<Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>> sparse_llt;
  // dense: jittered correlation R~ with Sigma = sigma^2 R~
  Eigen::MatrixXd correlation;
  Eigen::MatrixXd correlation_dlogkappa;
  Eigen::LLT<Eigen::MatrixXd> dense_llt;
  double log_det_structure = 0.0;  // log det Q~ (sparse) or log det R~ (dense)
  // tr(Q~^-1 dQ~) or tr(R~^-1 dR~), computed on first request
  mutable std::once_flag trace_once;
  mutable double trace_term = 0.0;
};

MaternFieldModel::MaternFieldModel(std::shared_ptr<const TriangulatedDomain> mesh, FieldRepresentation representation,
                                   std::size_t dense_limit)
    : mesh_(std::move(mesh)), representation_(representation) {
  const auto n = static_cast<Eigen::Index>(mesh_->vertex_count());
  if (representation_ == FieldRepresentation::sparse_precision) {
    fem_ = assemble_fem(*mesh_);
  } else {
    if (mesh_->vertex_count() > dense_limit)
      throw InvalidPriorError("mesh has " + std::to_string(n) + " vertices, above the dense limit of " +
                              std::to_string(dense_limit) + "; use the sparse precision path");
    distances_.resize(n, n);
    const auto& v = mesh_->vertices();
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        distances_(i, j) = distance(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
  }
}

std::shared_ptr<const MaternFieldModel::Cache> MaternFieldModel::cache_for(double log_kappa) const {
  {
    std::lock_guard lock(mutex_);
    if (cache_ && cache_->log_kappa == log_kappa) return cache_;
  }
  auto c = std::make_shared<Cache>();
  c->log_kappa = log_kappa;
  const double kappa = std::exp(log_kappa);
  const auto n = size();
  if (representation_ == FieldRepresentation::sparse_precision) {
    c->structure = spde_precision_structure(fem_, kappa);
    const double k2 = kappa * kappa;
    Eigen::SparseMatrix<double> cm(n, n);
    std::vector<Eigen::Triplet<double>> d;
    for (Eigen::Index i = 0; i < n; ++i) d.emplace_back(i, i, fem_.mass[i]);
    cm.setFromTriplets(d.begin(), d.end());
    c->structure_dlogkappa = (4.0 * k2 * k2) * cm + (4.0 * k2) * fem_.stiffness;
    c->sparse_llt = std::make_shared<Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>>(c->structure);
    if (c->sparse_llt->info() != Eigen::Success) throw InvalidPriorError("SPDE precision is not positive definite");
    c->log_det_structure = sparse_log_det(*c->sparse_llt);
  } else {
    c->correlation.resize(n, n);
    c->correlation_dlogkappa.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      c->correlation(i, i) = 1.0 + kDenseJitter;
      c->correlation_dlogkappa(i, i) = 0.0;
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double r = matern_correlation(kappa, distances_(i, j));
        const double dr = matern_correlation_dlogkappa(kappa, distances_(i, j));
        c->correlation(i, j) = c->correlation(j, i) = r;
        c->correlation_dlogkappa(i, j) = c->correlation_dlogkappa(j, i) = dr;
      }
    }
    c->dense_llt.compute(c->correlation);
    if (c->dense_llt.info() != Eigen::Success) throw InvalidPriorError("Matérn covariance is not positive definite");
    c->log_det_structure = log_det_from_llt_diagonal(Eigen::MatrixXd(c->dense_llt.matrixL()).diagonal());
  }
  std::lock_guard lock(mutex_);
  cache_ = c;
  return c;
}

MaternFieldModel::Evaluation MaternFieldModel::evaluate(const MaternParams& params, const Eigen::VectorXd& u,
                                                        bool want_kappa_gradient) const {
  if (u.size() != size()) throw std::invalid_argument("field realization has the wrong length");
  const auto cache = cache_for(params.log_kappa);
  const auto n = static_cast<double>(size());
  Evaluation ev;
  if (representation_ == FieldRepresentation::sparse_precision) {
    const double tau2 = std::exp(2.0 * params.log_tau);
    const Eigen::VectorXd qu = cache->structure * u;
    const double quad = u.dot(qu);  // u' Q~ u
    ev.log_density = -0.5 * n * kLog2Pi + n * params.log_tau + 0.5 * cache->log_det_structure - 0.5 * tau2 * quad;
    ev.grad_u = -tau2 * qu;
    ev.d_log_tau = n - tau2 * quad;
    if (want_kappa_gradient) {
      std::call_once(cache->trace_once, [&] {
        // tr(Q~^-1 dQ~) column by column
        double tr = 0.0;
        const auto& dq = cache->structure_dlogkappa;
        Eigen::VectorXd col(size());
        for (Eigen::Index j = 0; j < size(); ++j) {
          col = dq.col(j);
          tr += cache->sparse_llt->solve(col)[j];
        }
        cache->trace_term = tr;
      });
      ev.d_log_kappa = 0.5 * cache->trace_term - 0.5 * tau2 * u.dot(cache->structure_dlogkappa * u);
    }
  } else {
    const double sigma2 = marginal_variance(params);
    const Eigen::VectorXd ru = cache->dense_llt.solve(u);  // R~^-1 u
    const double quad = u.dot(ru);
    ev.log_density = -0.5 * n * kLog2Pi - 0.5 * n * std::log(sigma2) - 0.5 * cache->log_det_structure -
                     0.5 * quad / sigma2;
    ev.grad_u = -ru / sigma2;
    ev.d_log_tau = n - quad / sigma2;
    if (want_kappa_gradient) {
      std::call_once(cache->trace_once, [&] {
        const Eigen::MatrixXd rinv = cache->dense_llt.solve(Eigen::MatrixXd::Identity(size(), size()));
        cache->trace_term = rinv.cwiseProduct(cache->correlation_dlogkappa).sum();
      });
      ev.d_log_kappa = n - quad / sigma2 - 0.5 * cache->trace_term +
                       0.5 * ru.dot(cache->correlation_dlogkappa * ru) / sigma2;
    }
  }
  return ev;
}

double MaternFieldModel::log_density(const MaternParams& params, const Eigen::VectorXd& u) const {
  return evaluate(params, u, false).log_density;
}

Eigen::SparseMatrix<double> MaternFieldModel::precision(const MaternParams& params) const {
  const auto cache = cache_for(params.log_kappa);
  if (representation_ == FieldRepresentation::sparse_precision)
    return std::exp(2.0 * params.log_tau) * cache->structure;
  const double sigma2 = marginal_variance(params);
  const Eigen::MatrixXd rinv = cache->dense_llt.solve(Eigen::MatrixXd::Identity(size(), size()));
  return (rinv / sigma2).sparseView(0.0, 0.0);
}

FieldPrior MaternFieldModel::prior(const MaternParams& params) const {
  if (representation_ == FieldRepresentation::sparse_precision)
    return FieldPrior::sparse(std::exp(2.0 * params.log_tau) * cache_for(params.log_kappa)->structure);
  return FieldPrior::dense(marginal_variance(params) * cache_for(params.log_kappa)->correlation);
}

}  // namespace isdm
