#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "isdm/mesh.hpp"

namespace isdm {

/// Covariate stored at mesh vertices; evaluated elsewhere by barycentric
/// interpolation.
struct CovariateField {
  std::string name;
  Eigen::VectorXd values;
};

/// Projects scattered covariate samples onto mesh vertices by nearest neighbour.
CovariateField project_covariate(const TriangulatedDomain& mesh, std::string name, std::span<const Point2D> points,
                                 std::span<const double> values);

struct NormalPrior {
  double mean = 0.0;
  double sd = 1.0;

  double log_density(double x) const;
  double d_log_density(double x) const;
};

/// Expert range map used as a covariate: rho(s) = -gamma * distance(s, range),
/// zero inside any range polygon.
struct RangeMapTerm {
  std::vector<Polygon> polygons;
  double gamma = 0.0;
  NormalPrior log_gamma_prior{0.0, 1.0};
};

double range_covariate(const RangeMapTerm& term, Point2D p);

/// 1 - exp(-mu), the probability that a region with expected count mu is occupied.
double occupancy_probability(double mu);

enum class ThinningKind { sampling, detection, reporting };

const char* to_string(ThinningKind kind);

/// Logistic thinning probability; coefficients[0] is the intercept and the
/// rest pair with covariates.
double thinning_link(ThinningKind kind, std::span<const double> coefficients, std::span<const double> covariates);

// Predictor terms reference parameters by their position in the flat
// parameter vector.
struct InterceptTerm {
  std::size_t param;
};
struct CovariateTerm {
  std::size_t covariate;
  std::size_t coefficient;
};
struct FieldTerm {
  std::size_t component;
};
struct RangeTerm {
  std::size_t range_map;
  std::size_t log_gamma;
};
/// Adds log(logistic(c0 + sum c_j x_j)) to the predictor.
struct ThinningTerm {
  ThinningKind kind = ThinningKind::sampling;
  std::vector<std::size_t> covariates;
  std::vector<std::size_t> coefficients;  // intercept first
};

using Term = std::variant<InterceptTerm, CovariateTerm, FieldTerm, RangeTerm, ThinningTerm>;

struct LinearPredictor {
  std::vector<Term> terms;
};

/// Point at which a predictor is evaluated: up to three mesh nodes with
/// interpolation weights.
struct EvalPoint {
  Point2D location;
  std::array<std::size_t, 3> nodes{};
  std::array<double, 3> weights{};
};

class SpecificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a predictor needs besides the parameter vector: mesh, covariates,
/// range maps and where each field component's node values live.
class ProcessModel {
 public:
  ProcessModel(std::shared_ptr<const TriangulatedDomain> mesh, std::vector<CovariateField> covariates,
               std::vector<std::vector<Polygon>> range_maps, std::vector<std::size_t> field_offsets,
               std::size_t parameter_count);

  const TriangulatedDomain& mesh() const { return *mesh_; }
  const std::shared_ptr<const TriangulatedDomain>& mesh_ptr() const { return mesh_; }
  const std::vector<CovariateField>& covariates() const { return covariates_; }
  std::optional<std::size_t> covariate_index(const std::string& name) const;
  const std::vector<std::vector<Polygon>>& range_maps() const { return range_maps_; }
  std::size_t field_offset(std::size_t component) const { return field_offsets_.at(component); }
  std::size_t field_count() const { return field_offsets_.size(); }
  std::size_t parameter_count() const { return parameter_count_; }

  EvalPoint at_point(Point2D p) const;
  EvalPoint at_vertex(std::size_t v) const;
  double covariate_at(std::size_t covariate, const EvalPoint& e) const;

  /// Throws SpecificationError when a term refers to something that does not exist.
  void check(const LinearPredictor& lp) const;

  double eval_linear_predictor(const LinearPredictor& lp, std::span<const double> theta, const EvalPoint& e) const;
  double eval_linear_predictor(const LinearPredictor& lp, std::span<const double> theta, Point2D p) const;
  double intensity(const LinearPredictor& lp, std::span<const double> theta, Point2D p) const;

  /// Dual-mesh quadrature: sum of A(s) exp(eta(s)) over vertices inside the
  /// region (the whole domain when region is null). Empty intersection gives 0.
  double region_mean(const LinearPredictor& lp, std::span<const double> theta, const Polygon* region = nullptr) const;

 private:
  std::shared_ptr<const TriangulatedDomain> mesh_;
  std::vector<CovariateField> covariates_;
  std::vector<std::vector<Polygon>> range_maps_;
  std::vector<std::size_t> field_offsets_;
  std::size_t parameter_count_;
};

/// A predictor evaluated over a fixed set of points. The part that is linear
/// in the parameters is a sparse Jacobian; range and thinning terms are kept
/// separately with their own derivatives.
class PredictorDesign {
 public:
  PredictorDesign(const ProcessModel& model, const LinearPredictor& lp, std::span<const EvalPoint> points);

  Eigen::Index rows() const { return linear_.rows(); }

  /// Adds theta[first + i] to row i (per-row latent effects).
  void add_row_effects(std::size_t first);
  void set_offset(Eigen::VectorXd offset);
  bool has_nonlinear_terms() const { return !ranges_.empty() || !thinnings_.empty(); }

  Eigen::VectorXd eta(std::span<const double> theta) const;

  /// grad += d(eta)^T d_eta.
  void accumulate_gradient(std::span<const double> theta, const Eigen::VectorXd& d_eta, std::span<double> grad) const;

  /// Jacobian of eta with respect to the parameters that enter linearly.
  const Eigen::SparseMatrix<double, Eigen::RowMajor>& linear() const { return linear_; }

 private:
  struct RangeBlock {
    std::size_t log_gamma;
    Eigen::VectorXd distance;
  };
  struct ThinningBlock {
    std::vector<std::size_t> coefficients;
    Eigen::MatrixXd covariates;  // rows x (k + 1), first column ones
  };

  Eigen::SparseMatrix<double, Eigen::RowMajor> linear_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> rest_;  // linear_ without the intercepts
  std::vector<std::size_t> intercepts_;
  std::vector<RangeBlock> ranges_;
  std::vector<ThinningBlock> thinnings_;
  Eigen::VectorXd offset_;
};

/// log(logistic(z)) and its derivative, stable for large |z|.
double log_logistic(double z);
double d_log_logistic(double z);

}  // namespace isdm
