#include "isdm/process_model.hpp"

#include <cmath>
#include <iostream>
#include <limits>

namespace isdm {

CovariateField project_covariate(const TriangulatedDomain& mesh, std::string name, std::span<const Point2D> points,
                                 std::span<const double> values) {
  if (points.size() != values.size() || points.empty())
    throw std::invalid_argument("covariate '" + name + "' needs matching, non-empty points and values");
  CovariateField field{std::move(name), Eigen::VectorXd(static_cast<Eigen::Index>(mesh.vertex_count()))};
  for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
    const Point2D q = mesh.vertices()[v];
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double dx = points[i].x - q.x, dy = points[i].y - q.y;
      const double d = dx * dx + dy * dy;
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    if (!std::isfinite(values[best])) throw std::invalid_argument("covariate '" + field.name + "' has non-finite values");
    field.values[static_cast<Eigen::Index>(v)] = values[best];
  }
  return field;
}

double NormalPrior::log_density(double x) const {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.91893853320467274178;
}

double NormalPrior::d_log_density(double x) const { return -(x - mean) / (sd * sd); }

double range_covariate(const RangeMapTerm& term, Point2D p) {
  if (term.gamma == 0.0) return 0.0;
  return -term.gamma * distance_to_region(term.polygons, p);
}

double occupancy_probability(double mu) {
  if (mu < 0.0 || std::isnan(mu)) throw std::invalid_argument("occupancy_probability: mu must be nonnegative");
  return -std::expm1(-mu);
}

const char* to_string(ThinningKind kind) {
  switch (kind) {
    case ThinningKind::sampling: return "sampling";
    case ThinningKind::detection: return "detection";
    case ThinningKind::reporting: return "reporting";
  }
  return "?";
}

double log_logistic(double z) { return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

double d_log_logistic(double z) {
  // 1 - logistic(z)
  return z >= 0.0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
}

double thinning_link(ThinningKind, std::span<const double> coefficients, std::span<const double> covariates) {
  if (coefficients.size() != covariates.size() + 1)
    throw std::invalid_argument("thinning_link: need one coefficient per covariate plus an intercept");
  double z = coefficients[0];
  for (std::size_t j = 0; j < covariates.size(); ++j) z += coefficients[j + 1] * covariates[j];
  return std::exp(log_logistic(z));
}

// ---------------------------------------------------------------------------

ProcessModel::ProcessModel(std::shared_ptr<const TriangulatedDomain> mesh, std::vector<CovariateField> covariates,
                           std::vector<std::vector<Polygon>> range_maps, std::vector<std::size_t> field_offsets,
                           std::size_t parameter_count)
    : mesh_(std::move(mesh)),
      covariates_(std::move(covariates)),
      range_maps_(std::move(range_maps)),
      field_offsets_(std::move(field_offsets)),
      parameter_count_(parameter_count) {
  const auto n = static_cast<Eigen::Index>(mesh_->vertex_count());
  for (std::size_t i = 0; i < covariates_.size(); ++i) {
    if (covariates_[i].values.size() != n)
      throw SpecificationError("covariate '" + covariates_[i].name + "' does not have one value per vertex");
    if (!covariates_[i].values.allFinite())
      throw SpecificationError("covariate '" + covariates_[i].name + "' has non-finite values");
    for (std::size_t j = 0; j < i; ++j)
      if (covariates_[j].name == covariates_[i].name)
        throw SpecificationError("duplicate covariate name '" + covariates_[i].name + "'");
  }
  for (auto off : field_offsets_)
    if (off + mesh_->vertex_count() > parameter_count_) throw SpecificationError("field block exceeds parameter vector");
}

std::optional<std::size_t> ProcessModel::covariate_index(const std::string& name) const {
  for (std::size_t i = 0; i < covariates_.size(); ++i)
    if (covariates_[i].name == name) return i;
  return std::nullopt;
}

EvalPoint ProcessModel::at_point(Point2D p) const {
  const MeshLocation loc = mesh_->locate(p);
  const auto& tri = mesh_->triangles()[loc.triangle];
  return {p, {tri[0], tri[1], tri[2]}, loc.barycentric};
}

EvalPoint ProcessModel::at_vertex(std::size_t v) const {
  return {mesh_->vertices().at(v), {v, v, v}, {1.0, 0.0, 0.0}};
}

double ProcessModel::covariate_at(std::size_t covariate, const EvalPoint& e) const {
  const auto& x = covariates_.at(covariate).values;
  double s = 0.0;
  for (int k = 0; k < 3; ++k)
    if (e.weights[k] != 0.0) s += e.weights[k] * x[static_cast<Eigen::Index>(e.nodes[k])];
  return s;
}

void ProcessModel::check(const LinearPredictor& lp) const {
  const auto param_ok = [&](std::size_t p) {
    if (p >= parameter_count_) throw SpecificationError("predictor references a missing parameter");
  };
  for (const auto& term : lp.terms) {
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, InterceptTerm>) {
            param_ok(t.param);
          } else if constexpr (std::is_same_v<T, CovariateTerm>) {
            if (t.covariate >= covariates_.size()) throw SpecificationError("predictor references a missing covariate");
            param_ok(t.coefficient);
          } else if constexpr (std::is_same_v<T, FieldTerm>) {
            if (t.component >= field_offsets_.size())
              throw SpecificationError("predictor references a missing field component");
          } else if constexpr (std::is_same_v<T, RangeTerm>) {
            if (t.range_map >= range_maps_.size()) throw SpecificationError("predictor references a missing range map");
            param_ok(t.log_gamma);
          } else {
            if (t.coefficients.size() != t.covariates.size() + 1)
              throw SpecificationError("thinning term needs an intercept plus one coefficient per covariate");
            for (auto c : t.covariates)
              if (c >= covariates_.size()) throw SpecificationError("thinning term references a missing covariate");
            for (auto c : t.coefficients) param_ok(c);
          }
        },
        term);
  }
}

double ProcessModel::eval_linear_predictor(const LinearPredictor& lp, std::span<const double> theta,
                                           const EvalPoint& e) const {
  if (theta.size() != parameter_count_) throw SpecificationError("parameter vector has the wrong length");
  check(lp);
  // intercepts are summed before everything else so that shifting a constant
  // between two of them leaves eta unchanged bit for bit
  double eta = 0.0;
  for (const auto& term : lp.terms)
    if (const auto* t = std::get_if<InterceptTerm>(&term)) eta += theta[t->param];
  for (const auto& term : lp.terms) {
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, InterceptTerm>) {
          } else if constexpr (std::is_same_v<T, CovariateTerm>) {
            eta += theta[t.coefficient] * covariate_at(t.covariate, e);
          } else if constexpr (std::is_same_v<T, FieldTerm>) {
            const std::size_t off = field_offsets_[t.component];
            for (int k = 0; k < 3; ++k)
              if (e.weights[k] != 0.0) eta += e.weights[k] * theta[off + e.nodes[k]];
          } else if constexpr (std::is_same_v<T, RangeTerm>) {
            eta -= std::exp(theta[t.log_gamma]) * distance_to_region(range_maps_[t.range_map], e.location);
          } else {
            double z = theta[t.coefficients[0]];
            for (std::size_t j = 0; j < t.covariates.size(); ++j)
              z += theta[t.coefficients[j + 1]] * covariate_at(t.covariates[j], e);
            eta += log_logistic(z);
          }
        },
        term);
  }
  return eta;
}

double ProcessModel::eval_linear_predictor(const LinearPredictor& lp, std::span<const double> theta, Point2D p) const {
  return eval_linear_predictor(lp, theta, at_point(p));
}

double ProcessModel::intensity(const LinearPredictor& lp, std::span<const double> theta, Point2D p) const {
  return std::exp(eval_linear_predictor(lp, theta, p));
}

double ProcessModel::region_mean(const LinearPredictor& lp, std::span<const double> theta, const Polygon* region) const {
  const auto& areas = mesh_->dual_areas();
  double mu = 0.0;
  std::size_t members = 0;
  for (std::size_t v = 0; v < mesh_->vertex_count(); ++v) {
    if (region && !contains(*region, mesh_->vertices()[v])) continue;
    ++members;
    mu += areas[v] * std::exp(eval_linear_predictor(lp, theta, at_vertex(v)));
  }
  if (members == 0) std::clog << "warning: region contains no mesh vertex; region mean is 0\n";
  return mu;
}

// ---------------------------------------------------------------------------

PredictorDesign::PredictorDesign(const ProcessModel& model, const LinearPredictor& lp, std::span<const EvalPoint> points) {
  model.check(lp);
  const auto rows = static_cast<Eigen::Index>(points.size());
  const auto cols = static_cast<Eigen::Index>(model.parameter_count());
  std::vector<Eigen::Triplet<double>> trips;
  for (const auto& term : lp.terms) {
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, InterceptTerm>) {
            intercepts_.push_back(t.param);
          } else if constexpr (std::is_same_v<T, CovariateTerm>) {
            for (Eigen::Index i = 0; i < rows; ++i)
              trips.emplace_back(i, static_cast<Eigen::Index>(t.coefficient),
                                 model.covariate_at(t.covariate, points[static_cast<std::size_t>(i)]));
          } else if constexpr (std::is_same_v<T, FieldTerm>) {
            const std::size_t off = model.field_offset(t.component);
            for (Eigen::Index i = 0; i < rows; ++i) {
              const auto& e = points[static_cast<std::size_t>(i)];
              for (int k = 0; k < 3; ++k)
                if (e.weights[k] != 0.0) trips.emplace_back(i, static_cast<Eigen::Index>(off + e.nodes[k]), e.weights[k]);
            }
          } else if constexpr (std::is_same_v<T, RangeTerm>) {
            RangeBlock block{t.log_gamma, Eigen::VectorXd(rows)};
            const auto& polys = model.range_maps()[t.range_map];
            for (Eigen::Index i = 0; i < rows; ++i)
              block.distance[i] = distance_to_region(polys, points[static_cast<std::size_t>(i)].location);
            ranges_.push_back(std::move(block));
          } else {
            ThinningBlock block{t.coefficients, Eigen::MatrixXd(rows, static_cast<Eigen::Index>(t.coefficients.size()))};
            for (Eigen::Index i = 0; i < rows; ++i) {
              block.covariates(i, 0) = 1.0;
              for (std::size_t j = 0; j < t.covariates.size(); ++j)
                block.covariates(i, static_cast<Eigen::Index>(j + 1)) =
                    model.covariate_at(t.covariates[j], points[static_cast<std::size_t>(i)]);
            }
            thinnings_.push_back(std::move(block));
          }
        },
        term);
  }
  rest_.resize(rows, cols);
  rest_.setFromTriplets(trips.begin(), trips.end());
  for (auto p : intercepts_)
    for (Eigen::Index i = 0; i < rows; ++i) trips.emplace_back(i, static_cast<Eigen::Index>(p), 1.0);
  linear_.resize(rows, cols);
  linear_.setFromTriplets(trips.begin(), trips.end());
  offset_ = Eigen::VectorXd::Zero(rows);
}

void PredictorDesign::add_row_effects(std::size_t first) {
  if (first + static_cast<std::size_t>(linear_.rows()) > static_cast<std::size_t>(linear_.cols()))
    throw SpecificationError("row effect block exceeds parameter vector");
  for (auto* m : {&linear_, &rest_}) {
    std::vector<Eigen::Triplet<double>> trips;
    for (int k = 0; k < m->outerSize(); ++k)
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(*m, k); it; ++it)
        trips.emplace_back(it.row(), it.col(), it.value());
    for (Eigen::Index i = 0; i < m->rows(); ++i) trips.emplace_back(i, static_cast<Eigen::Index>(first) + i, 1.0);
    m->setFromTriplets(trips.begin(), trips.end());
  }
}

void PredictorDesign::set_offset(Eigen::VectorXd offset) {
  if (offset.size() != rows()) throw std::invalid_argument("offset length must equal the number of rows");
  offset_ = std::move(offset);
}

Eigen::VectorXd PredictorDesign::eta(std::span<const double> theta) const {
  const Eigen::Map<const Eigen::VectorXd> th(theta.data(), static_cast<Eigen::Index>(theta.size()));
  double constant = 0.0;
  for (auto p : intercepts_) constant += theta[p];
  Eigen::VectorXd eta = (Eigen::VectorXd::Constant(rows(), constant) + rest_ * th) + offset_;
  for (const auto& r : ranges_) eta -= std::exp(th[static_cast<Eigen::Index>(r.log_gamma)]) * r.distance;
  for (const auto& b : thinnings_) {
    Eigen::VectorXd c(static_cast<Eigen::Index>(b.coefficients.size()));
    for (std::size_t j = 0; j < b.coefficients.size(); ++j) c[static_cast<Eigen::Index>(j)] = theta[b.coefficients[j]];
    const Eigen::VectorXd z = b.covariates * c;
    for (Eigen::Index i = 0; i < z.size(); ++i) eta[i] += log_logistic(z[i]);
  }
  return eta;
}

void PredictorDesign::accumulate_gradient(std::span<const double> theta, const Eigen::VectorXd& d_eta,
                                          std::span<double> grad) const {
  Eigen::Map<Eigen::VectorXd> g(grad.data(), static_cast<Eigen::Index>(grad.size()));
  g.noalias() += linear_.transpose() * d_eta;
  for (const auto& r : ranges_) {
    const double gamma = std::exp(theta[r.log_gamma]);
    grad[r.log_gamma] -= gamma * r.distance.dot(d_eta);
  }
  for (const auto& b : thinnings_) {
    Eigen::VectorXd c(static_cast<Eigen::Index>(b.coefficients.size()));
    for (std::size_t j = 0; j < b.coefficients.size(); ++j) c[static_cast<Eigen::Index>(j)] = theta[b.coefficients[j]];
    const Eigen::VectorXd z = b.covariates * c;
    Eigen::VectorXd w(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) w[i] = d_log_logistic(z[i]) * d_eta[i];
    const Eigen::VectorXd gc = b.covariates.transpose() * w;
    for (std::size_t j = 0; j < b.coefficients.size(); ++j) grad[b.coefficients[j]] += gc[static_cast<Eigen::Index>(j)];
  }
}

}  // namespace isdm
