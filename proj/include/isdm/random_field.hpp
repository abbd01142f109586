#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstdint>
#include <memory>
#include <mutex>
#include <random>
#include <stdexcept>

#include "isdm/mesh.hpp"

namespace isdm {

/// Matérn hyperparameters on the optimisation scale. Smoothness is fixed at 1.
struct MaternParams {
  double log_tau = 0.0;
  double log_kappa = 0.0;
  static constexpr double nu = 1.0;

  double tau() const;
  double kappa() const;

  /// Parameters giving marginal variance sigma2 at range parameter kappa.
  static MaternParams from_variance(double sigma2, double kappa);
};

/// Matérn correlation for nu = 1: (kappa d) K1(kappa d), with value 1 at d = 0.
double matern_correlation(double kappa, double d);
double matern_correlation(const MaternParams& params, double d);

/// d/d(log kappa) of the nu = 1 correlation, i.e. -(kappa d)^2 K0(kappa d).
double matern_correlation_dlogkappa(double kappa, double d);

/// sigma_u^2 = 1 / (4 pi tau^2 kappa^2).
double marginal_variance(const MaternParams& params);

/// log(tau) = -log(4 pi sigma2 kappa^2) / 2.
double log_tau_from_variance(double sigma2, double kappa);

/// Kappa whose practical range sqrt(8 nu) / kappa equals the given distance.
double kappa_for_range(double range);

class InvalidPriorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FieldRepresentation { dense_covariance, sparse_precision };

/// Linear finite-element matrices on the mesh: lumped (diagonal) mass and stiffness.
struct FemMatrices {
  Eigen::VectorXd mass;
  Eigen::SparseMatrix<double> stiffness;
};

FemMatrices assemble_fem(const TriangulatedDomain& mesh);

/// kappa^4 C + 2 kappa^2 G + G C^-1 G (the precision for tau = 1).
Eigen::SparseMatrix<double> spde_precision_structure(const FemMatrices& fem, double kappa);

inline constexpr std::size_t kDefaultDenseLimit = 3000;
inline constexpr double kDenseJitter = 1e-8;

/// Zero-mean Gaussian prior over mesh nodes, held either as a dense
/// covariance or as a sparse precision. Immutable value.
class FieldPrior {
 public:
  static FieldPrior dense(Eigen::MatrixXd covariance);
  static FieldPrior sparse(Eigen::SparseMatrix<double> precision);

  FieldRepresentation representation() const { return representation_; }
  Eigen::Index size() const;

  /// Dense representation only.
  const Eigen::MatrixXd& covariance() const;
  /// Sparse representation only.
  const Eigen::SparseMatrix<double>& precision() const;

  double log_det_precision() const { return log_det_precision_; }
  Eigen::VectorXd apply_precision(const Eigen::VectorXd& u) const;
  double log_density(const Eigen::VectorXd& u) const;
  Eigen::VectorXd sample(std::mt19937_64& rng) const;

 private:
  struct Impl;
  FieldRepresentation representation_ = FieldRepresentation::sparse_precision;
  std::shared_ptr<const Impl> impl_;
  double log_det_precision_ = 0.0;
};

FieldPrior build_dense_covariance(const TriangulatedDomain& mesh, const MaternParams& params,
                                  std::size_t dense_limit = kDefaultDenseLimit);
FieldPrior build_sparse_precision(const TriangulatedDomain& mesh, const MaternParams& params);

double field_log_density(const Eigen::VectorXd& u, const FieldPrior& prior);
Eigen::VectorXd sample_field(const FieldPrior& prior, std::uint64_t seed);

/// Matérn field over a fixed mesh for repeated evaluation at changing
/// hyperparameters. Factorisations are cached per kappa (tau only rescales),
/// so sweeps over log tau reuse one Cholesky.
class MaternFieldModel {
 public:
  MaternFieldModel(std::shared_ptr<const TriangulatedDomain> mesh, FieldRepresentation representation,
                   std::size_t dense_limit = kDefaultDenseLimit);

  struct Evaluation {
    double log_density = 0.0;
    Eigen::VectorXd grad_u;
    double d_log_tau = 0.0;
    double d_log_kappa = 0.0;
  };

  FieldRepresentation representation() const { return representation_; }
  Eigen::Index size() const { return static_cast<Eigen::Index>(mesh_->vertex_count()); }

  /// Log density with gradients. d_log_kappa is filled only when requested
  /// since it needs a trace of the inverse.
  Evaluation evaluate(const MaternParams& params, const Eigen::VectorXd& u, bool want_kappa_gradient) const;
  double log_density(const MaternParams& params, const Eigen::VectorXd& u) const;

  /// Precision matrix at these hyperparameters (dense inverse covariance in
  /// the dense representation).
  Eigen::SparseMatrix<double> precision(const MaternParams& params) const;

  FieldPrior prior(const MaternParams& params) const;

 private:
  struct Cache;
  std::shared_ptr<const Cache> cache_for(double log_kappa) const;

  std::shared_ptr<const TriangulatedDomain> mesh_;
  FieldRepresentation representation_;
  FemMatrices fem_;
  Eigen::MatrixXd distances_;
  mutable std::mutex mutex_;
  mutable std::shared_ptr<const Cache> cache_;
};

}  // namespace isdm
