#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "isdm/observation.hpp"
#include "isdm/optimizer.hpp"
#include "isdm/random_field.hpp"

namespace isdm {

/// Parameter blocks, in the order they appear in the flat parameter vector.
/// Within a block parameters keep their creation order.
enum class ParameterBlock { fixed_effect, observation, hyperparameter, field_latent, noise_latent };

const char* to_string(ParameterBlock block);

struct ParameterInfo {
  std::string name;
  ParameterBlock block = ParameterBlock::fixed_effect;
  double init = 0.0;
  std::optional<NormalPrior> prior;  // nullopt: flat
  bool fixed = false;                // held at init during fitting
  bool used = true;                  // referenced by a dataset or field; set when the spec is built
};

/// Matérn field component. u values occupy [offset, offset + vertex count).
struct FieldComponent {
  std::string name;
  bool bias = false;
  std::size_t log_tau = 0;
  std::size_t log_kappa = 0;
  std::size_t offset = 0;
  /// Soft sum-to-zero constraint on the dual-area weighted field.
  bool zero_integral = false;
};

struct DatasetSpec {
  std::string name;
  Dataset data;
  ObservationBinding binding;
};

/// What predict_grid evaluates: the ecological predictor, plus bias terms
/// only on request.
struct PredictionTarget {
  std::string name;
  LinearPredictor ecological;
  LinearPredictor bias;
};

/// Full model: mesh, covariates, parameter layout, field components, datasets.
/// Parameter indices are final (block order) once built.
struct ModelSpec {
  std::shared_ptr<const TriangulatedDomain> mesh;
  std::vector<CovariateField> covariates;
  std::vector<std::string> range_map_names;
  std::vector<std::vector<Polygon>> range_maps;
  std::vector<ParameterInfo> parameters;
  std::vector<FieldComponent> fields;
  std::vector<DatasetSpec> datasets;
  std::vector<PredictionTarget> targets;
  FieldRepresentation representation = FieldRepresentation::sparse_precision;
  std::size_t dense_limit = kDefaultDenseLimit;

  std::size_t size() const { return parameters.size(); }
  std::optional<std::size_t> find(const std::string& name) const;
  /// Throws SpecificationError for unknown names.
  std::size_t index(const std::string& name) const;
  Eigen::VectorXd initial() const;
  ProcessModel process_model() const;
};

/// Parameter values keyed by name. Together with unflatten this is a bijection
/// between the flat vector and a complete name map.
std::map<std::string, double> flatten_names(const ModelSpec& spec, const Eigen::VectorXd& theta);
Eigen::VectorXd unflatten_names(const ModelSpec& spec, const std::map<std::string, double>& values);

/// Assembles a ModelSpec with parameters referenced by name.
///
/// Naming: "u.<field>[i]", "log_tau.<field>", "log_kappa.<field>",
/// "log_gamma.<range map>", "thin.<dataset>.<kind>.<intercept|covariate>",
/// "log_sd_od.<dataset>", "eps.<dataset>[i]". Everything else is caller-chosen.
class ModelBuilder {
 public:
  explicit ModelBuilder(std::shared_ptr<const TriangulatedDomain> mesh);

  void set_representation(FieldRepresentation representation, std::size_t dense_limit = kDefaultDenseLimit);

  std::size_t add_covariate(CovariateField covariate);
  std::size_t add_range_map(const std::string& name, std::vector<Polygon> polygons);

  /// Get-or-create. New parameters get the block's default prior.
  std::size_t parameter(const std::string& name, ParameterBlock block = ParameterBlock::fixed_effect);
  bool has_parameter(const std::string& name) const;

  /// Creates the field's hyperparameters and latent values. Default priors:
  /// log kappa centred on a range of one fifth of the domain diameter, log tau
  /// centred on unit marginal variance at that kappa, both with sd 1.
  std::size_t add_field(const std::string& name, bool bias = false);
  std::size_t field_index(const std::string& name) const;

  Term intercept(const std::string& param);
  Term covariate(const std::string& covariate, const std::string& coefficient);
  Term field(const std::string& name);
  Term range(const std::string& map);
  Term thinning(ThinningKind kind, const std::string& dataset, const std::vector<std::string>& covariates);

  struct DatasetOptions {
    double po_data_weight = 0.0;
    double small_region_factor = 3.0;
  };
  /// Overdispersed counts get "log_sd_od.<name>" and per-site "eps.<name>[i]".
  void add_dataset(const std::string& name, Dataset data, LinearPredictor predictor, DatasetOptions options);
  void add_dataset(const std::string& name, Dataset data, LinearPredictor predictor) {
    add_dataset(name, std::move(data), std::move(predictor), DatasetOptions{});
  }
  void add_target(const std::string& name, LinearPredictor ecological, LinearPredictor bias = {});

  void set_init(const std::string& name, double value);
  void set_prior(const std::string& name, std::optional<NormalPrior> prior);
  void fix(const std::string& name, double value);
  void fix(const std::string& name);
  void set_zero_integral(const std::string& field, bool on);

  const TriangulatedDomain& mesh() const { return *spec_.mesh; }

  /// Reorders parameters into block order and marks unused ones.
  ModelSpec build() const;

 private:
  std::size_t covariate_index(const std::string& name) const;
  std::size_t range_index(const std::string& name) const;

  ModelSpec spec_;
  std::map<std::string, std::size_t> by_name_;
};

/// Start value for a dataset's intercept: log(points / area) for
/// presence-only data, cloglog of the prevalence for occupancy, log of the
/// mean rate for counts. Regional lists use the cloglog of the presence
/// fraction per unit mean region area.
double default_intercept(const Dataset& data, double domain_area);

/// Negative log posterior: -[field densities + priors + dataset log-likelihoods].
class JointObjective {
 public:
  explicit JointObjective(ModelSpec spec, unsigned threads = 1);
  ~JointObjective();
  JointObjective(const JointObjective&) = delete;
  JointObjective& operator=(const JointObjective&) = delete;

  const ModelSpec& spec() const { return spec_; }
  const ProcessModel& model() const { return *model_; }
  std::size_t size() const { return spec_.size(); }

  double value(const Eigen::VectorXd& theta) const;
  /// Value with gradient over all parameters. Unused parameters get exactly 0.
  double value_and_gradient(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const;

  struct Decomposition {
    std::vector<std::pair<std::string, double>> datasets;  // log-likelihoods
    std::vector<std::pair<std::string, double>> fields;    // log densities
    double priors = 0.0;                                   // log densities
    double neg_log_posterior = 0.0;
  };
  Decomposition decompose(const Eigen::VectorXd& theta) const;

  /// Hessian of the negative log posterior restricted to parameters that enter
  /// the predictors linearly (fixed effects and latents); exact there.
  Eigen::SparseMatrix<double> latent_hessian(const Eigen::VectorXd& theta) const;
  /// Hessian of the negative data log-likelihood alone, same restriction.
  Eigen::SparseMatrix<double> data_hessian(const Eigen::VectorXd& theta) const;

  /// Parameters that enter linearly and are free (the inner Newton block).
  const std::vector<std::size_t>& linear_free() const { return linear_free_; }
  /// Free parameters that are not linear (hyperparameters, thinning, noise scale).
  const std::vector<std::size_t>& nonlinear_free() const { return nonlinear_free_; }
  std::vector<std::size_t> free_parameters() const;

  std::size_t clamp_events() const;

 private:
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad, Decomposition* parts) const;
  void add_prior_hessian(const Eigen::VectorXd& theta, std::vector<Eigen::Triplet<double>>& t) const;

  ModelSpec spec_;
  unsigned threads_;
  std::unique_ptr<ProcessModel> model_;
  std::vector<std::unique_ptr<DatasetLikelihood>> likelihoods_;
  std::vector<std::unique_ptr<MaternFieldModel>> field_models_;
  Eigen::VectorXd dual_areas_;
  std::vector<std::size_t> linear_free_, nonlinear_free_;
};

enum class FitMode { automatic, joint, laplace };

const char* to_string(FitMode mode);
FitMode parse_fit_mode(const std::string& s);

struct FitOptions {
  FitMode mode = FitMode::automatic;
  int max_iterations = 500;
  double tolerance = 1e-6;
  int memory = 10;
  /// Newton refinement after L-BFGS in joint mode, for at most this many free parameters.
  std::size_t newton_polish_limit = 600;
  int inner_max_iterations = 100;
  /// Relative step of the outer finite-difference gradient in laplace mode.
  double outer_step = 1e-4;
  /// Meshes with more vertices than this default to laplace mode when fields are present.
  std::size_t laplace_vertex_threshold = 500;
  bool standard_errors = true;
  unsigned threads = 1;
};

struct FitResult {
  Eigen::VectorXd optimum;
  double neg_log_posterior = 0.0;
  /// Laplace mode: the outer objective (profiled posterior plus half log det).
  double objective = 0.0;
  double gradient_norm = 0.0;
  bool converged = false;
  int iterations = 0;
  int line_search_failures = 0;
  FitMode mode = FitMode::joint;
  std::string diagnostic;

  /// Per parameter; nullopt where withheld (fixed, unused, latent or failed curvature).
  std::vector<std::optional<double>> standard_errors;
  bool curvature_ok = false;
  std::string curvature_diagnostic;
  /// Covariance over covariance_index parameters.
  std::vector<std::size_t> covariance_index;
  Eigen::MatrixXd covariance;
};

/// Chooses the fit mode: laplace when any field or overdispersion scale is
/// free, or fields sit on a mesh above the vertex threshold; joint otherwise.
FitMode resolve_fit_mode(const JointObjective& objective, const FitOptions& options);

FitResult fit_map(const JointObjective& objective, const FitOptions& options = {},
                  std::optional<Eigen::VectorXd> init = std::nullopt);
FitResult fit_map(const ModelSpec& spec, const FitOptions& options = {},
                  std::optional<Eigen::VectorXd> init = std::nullopt);

/// Fills standard errors and covariance. Joint mode inverts a finite-difference
/// Hessian of the gradient over all free parameters; laplace mode uses the
/// inner Hessian for linear parameters and a finite-difference Hessian of the
/// outer objective for the rest. Indefinite curvature withholds SEs.
void laplace_standard_errors(const JointObjective& objective, FitResult& fit, const FitOptions& options = {});

/// Laplace-mode outer objective at the given nonlinear values; theta is
/// updated in place with the inner optimum. Exposed for tests.
double laplace_outer_objective(const JointObjective& objective, Eigen::VectorXd& theta, int max_inner = 100);

struct GridPoint {
  Point2D location;
  double mean = 0.0;
  double se = 0.0;
};

struct PredictionLayer {
  std::string target;
  std::vector<GridPoint> points;
};

struct PredictionGrid {
  double resolution = 0.0;
  std::vector<PredictionLayer> layers;
  std::size_t dropped = 0;  // grid points outside the domain, per layer
};

struct PredictOptions {
  double resolution = 0.1;
  bool include_bias = false;
  std::vector<std::string> targets;  // empty: all
};

/// Cell-centre grid over the domain bounding box; mean log-intensity per point
/// and delta-method standard errors from the fit covariance.
PredictionGrid predict_grid(const JointObjective& objective, const FitResult& fit, const PredictOptions& options);

/// Curvature of the negative data log-likelihood along +1 at `plus` and -1 at `minus`.
double confounding_curvature(const JointObjective& objective, const Eigen::VectorXd& theta, const std::string& plus,
                             const std::string& minus);

struct SpeciesData {
  std::string name;
  std::optional<OccupancyDataset> presence_absence;
  std::optional<PresenceOnlyDataset> presence_only;
};

struct CaseStudyOptions {
  FieldRepresentation representation = FieldRepresentation::sparse_precision;
  bool species_fields = true;
  bool bias_field = true;
};

/// One field per species entering its PA and PO predictors, a bias field shared
/// by all PO predictors, species-specific betas over a shared covariate set and
/// per-(dataset, species) intercepts. Names: "alpha.pa.<sp>", "alpha.po.<sp>",
/// "beta.<sp>.<covariate>", fields "xi.<sp>" and "xi_bias", datasets
/// "pa.<sp>" and "po.<sp>".
ModelSpec compose_case_study_spec(std::shared_ptr<const TriangulatedDomain> mesh, const std::vector<SpeciesData>& species,
                                  const std::vector<CovariateField>& covariates, const CaseStudyOptions& options = {});

}  // namespace isdm
