#include "isdm/observation.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "isdm/summation.hpp"

namespace isdm {

const char* kind_name(const Dataset& ds) {
  switch (ds.index()) {
    case 0: return "count";
    case 1: return "occupancy";
    case 2: return "presence_only";
    default: return "regional";
  }
}

std::size_t record_count(const Dataset& ds) {
  return std::visit(
      [](const auto& d) -> std::size_t {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, PresenceOnlyDataset>) return d.points.size();
        else return d.records.size();
      },
      ds);
}

void validate_dataset(const Dataset& ds) {
  const auto fail = [](std::size_t i, const std::string& what) {
    throw DataError("record " + std::to_string(i + 1) + ": " + what);
  };
  const auto finite = [](Point2D p) { return std::isfinite(p.x) && std::isfinite(p.y); };
  std::visit(
      [&](const auto& d) {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, CountDataset>) {
          for (std::size_t i = 0; i < d.records.size(); ++i) {
            const auto& r = d.records[i];
            if (!finite(r.site)) fail(i, "non-finite coordinates");
            if (r.count < 0) fail(i, "count must be a nonnegative integer");
            if (r.duration && !(*r.duration > 0.0 && std::isfinite(*r.duration))) fail(i, "duration must be positive");
          }
        } else if constexpr (std::is_same_v<T, OccupancyDataset>) {
          for (std::size_t i = 0; i < d.records.size(); ++i) {
            const auto& r = d.records[i];
            if (!finite(r.site)) fail(i, "non-finite coordinates");
            if (r.visits < 1) fail(i, "visits must be at least 1");
            if (r.detections < 0 || r.detections > r.visits) fail(i, "detections must lie in [0, visits]");
          }
        } else if constexpr (std::is_same_v<T, PresenceOnlyDataset>) {
          for (std::size_t i = 0; i < d.points.size(); ++i)
            if (!finite(d.points[i])) fail(i, "non-finite coordinates");
        } else {
          for (std::size_t i = 0; i < d.records.size(); ++i) validate_polygon(d.records[i].region);
        }
      },
      ds);
}

double poisson_log_pmf(std::int64_t r, double log_mean) {
  if (r == 0) return -std::exp(log_mean);
  return static_cast<double>(r) * log_mean - std::exp(log_mean) - std::lgamma(static_cast<double>(r) + 1.0);
}

namespace {

using RowSparse = Eigen::SparseMatrix<double, Eigen::RowMajor>;

std::vector<EvalPoint> locate_all(const ProcessModel& model, std::span<const Point2D> pts) {
  std::vector<EvalPoint> out;
  out.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    try {
      out.push_back(model.at_point(pts[i]));
    } catch (const OutsideDomainError& e) {
      throw DataError("record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

std::vector<EvalPoint> all_vertices(const ProcessModel& model) {
  std::vector<EvalPoint> out;
  out.reserve(model.mesh().vertex_count());
  for (std::size_t v = 0; v < model.mesh().vertex_count(); ++v) out.push_back(model.at_vertex(v));
  return out;
}

void push(const Eigen::SparseMatrix<double>& h, std::vector<Eigen::Triplet<double>>& out) {
  for (int k = 0; k < h.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(h, k); it; ++it) out.emplace_back(it.row(), it.col(), it.value());
}

// J^T diag(w) J
void add_weighted_gram(const RowSparse& j, const Eigen::VectorXd& w, std::vector<Eigen::Triplet<double>>& out) {
  const Eigen::SparseMatrix<double> jc = j;
  const Eigen::SparseMatrix<double> wj = w.asDiagonal() * jc;
  const Eigen::SparseMatrix<double> h = Eigen::SparseMatrix<double>(jc.transpose()) * wj;
  push(h, out);
}

struct OccupancyTerms {
  double value;
  double d1;  // d value / d eta
  double d2;  // d2 value / d eta2
};

OccupancyTerms cloglog_terms(int visits, int detections, double eta, bool& clamped) {
  const double m = std::exp(eta);
  const double n = detections, absent = visits - detections;
  OccupancyTerms t{0.0, 0.0, 0.0};
  if (detections > 0) {
    const double p = -std::expm1(-m);
    if (!(p >= kProbabilityClamp)) {
      clamped = true;
      t.value += n * std::log(kProbabilityClamp);
    } else {
      t.value += n * std::log(p);
      double f = 0.0, df = 0.0;  // f = m / expm1(m) = dlogp/deta; df = d f / d eta
      if (m < 1e-5) {
        f = 1.0 - m / 2.0 + m * m / 12.0;
        df = m * (-0.5 + m / 6.0);
      } else if (m < 700.0) {
        const double em1 = std::expm1(m), e = std::exp(m);
        f = m / em1;
        df = m * (em1 - m * e) / (em1 * em1);
      }
      t.d1 += n * f;
      t.d2 += n * df;
    }
  }
  if (absent > 0) {
    // log(1 - p) = -m, clamped at log(kProbabilityClamp)
    if (m > -std::log(kProbabilityClamp)) {
      clamped = true;
      t.value += absent * std::log(kProbabilityClamp);
    } else {
      t.value -= absent * m;
      t.d1 -= absent * m;
      t.d2 -= absent * m;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------

class CountLikelihood final : public DatasetLikelihood {
 public:
  CountLikelihood(const ProcessModel& model, const CountDataset& ds, const ObservationBinding& b)
      : design_(model, b.predictor, locate_all(model, sites(ds))) {
    Eigen::VectorXd offset = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ds.records.size()));
    counts_.reserve(ds.records.size());
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
      counts_.push_back(ds.records[i].count);
      if (ds.duration_offset && ds.records[i].duration)
        offset[static_cast<Eigen::Index>(i)] = std::log(*ds.records[i].duration);
    }
    design_.set_offset(std::move(offset));
    if (ds.overdispersion) {
      if (!b.log_sd_overdispersion || !b.overdispersion_offset)
        throw SpecificationError("overdispersed count data needs a noise scale and per-site noise parameters");
      log_sd_ = b.log_sd_overdispersion;
      noise_ = b.overdispersion_offset;
      design_.add_row_effects(*noise_);
    }
  }

  double evaluate(std::span<const double> theta, std::span<double> grad) const override {
    const Eigen::VectorXd eta = design_.eta(theta);
    CompensatedSum sum;
    Eigen::VectorXd d(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const auto r = counts_[static_cast<std::size_t>(i)];
      sum += poisson_log_pmf(r, eta[i]);
      d[i] = static_cast<double>(r) - std::exp(eta[i]);
    }
    if (!grad.empty()) design_.accumulate_gradient(theta, d, grad);
    if (noise_) {
      const double log_sd = theta[*log_sd_];
      const double inv_var = std::exp(-2.0 * log_sd);
      const NormalPrior unit{0.0, 1.0};
      double sq = 0.0;
      for (std::size_t i = 0; i < counts_.size(); ++i) {
        const double e = theta[*noise_ + i];
        sq += e * e;
        sum += unit.log_density(e * std::exp(-log_sd)) - log_sd;
        if (!grad.empty()) grad[*noise_ + i] -= e * inv_var;
      }
      if (!grad.empty()) grad[*log_sd_] += -static_cast<double>(counts_.size()) + sq * inv_var;
    }
    return sum.value();
  }

  void add_hessian(std::span<const double> theta, std::vector<Eigen::Triplet<double>>& out) const override {
    add_weighted_gram(design_.linear(), design_.eta(theta).array().exp().matrix(), out);
    if (noise_) {
      const double inv_var = std::exp(-2.0 * theta[*log_sd_]);
      for (std::size_t i = 0; i < counts_.size(); ++i)
        out.emplace_back(static_cast<Eigen::Index>(*noise_ + i), static_cast<Eigen::Index>(*noise_ + i), inv_var);
    }
  }

 private:
  static std::vector<Point2D> sites(const CountDataset& ds) {
    std::vector<Point2D> s;
    for (const auto& r : ds.records) s.push_back(r.site);
    return s;
  }

  PredictorDesign design_;
  std::vector<std::int64_t> counts_;
  std::optional<std::size_t> log_sd_;
  std::optional<std::size_t> noise_;
};

class OccupancyLikelihood final : public DatasetLikelihood {
 public:
  OccupancyLikelihood(const ProcessModel& model, const OccupancyDataset& ds, const ObservationBinding& b)
      : design_(model, b.predictor, locate_all(model, sites(ds))), records_(ds.records) {}

  double evaluate(std::span<const double> theta, std::span<double> grad) const override {
    const Eigen::VectorXd eta = design_.eta(theta);
    CompensatedSum sum;
    Eigen::VectorXd d(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const auto& r = records_[static_cast<std::size_t>(i)];
      bool clamped = false;
      const auto t = cloglog_terms(r.visits, r.detections, eta[i], clamped);
      if (clamped) note_clamp();
      sum += t.value;
      d[i] = t.d1;
    }
    if (!grad.empty()) design_.accumulate_gradient(theta, d, grad);
    return sum.value();
  }

  void add_hessian(std::span<const double> theta, std::vector<Eigen::Triplet<double>>& out) const override {
    const Eigen::VectorXd eta = design_.eta(theta);
    Eigen::VectorXd w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const auto& r = records_[static_cast<std::size_t>(i)];
      bool clamped = false;
      w[i] = -cloglog_terms(r.visits, r.detections, eta[i], clamped).d2;
    }
    add_weighted_gram(design_.linear(), w, out);
  }

 private:
  static std::vector<Point2D> sites(const OccupancyDataset& ds) {
    std::vector<Point2D> s;
    for (const auto& r : ds.records) s.push_back(r.site);
    return s;
  }

  PredictorDesign design_;
  std::vector<OccupancyRecord> records_;
};

class PresenceOnlyLikelihood final : public DatasetLikelihood {
 public:
  PresenceOnlyLikelihood(const ProcessModel& model, const PresenceOnlyDataset& ds, const ObservationBinding& b)
      : points_(model, b.predictor, locate_all(model, ds.points)),
        nodes_(model, b.predictor, all_vertices(model)),
        weights_(Eigen::Map<const Eigen::VectorXd>(model.mesh().dual_areas().data(),
                                                   static_cast<Eigen::Index>(model.mesh().vertex_count()))),
        data_weight_(b.po_data_weight) {
    if (data_weight_ < 0.0) throw SpecificationError("presence-only data weight must be nonnegative");
  }

  double evaluate(std::span<const double> theta, std::span<double> grad) const override {
    CompensatedSum sum;
    const Eigen::VectorXd eta_pts = points_.eta(theta);
    Eigen::VectorXd d_pts(eta_pts.size());
    for (Eigen::Index i = 0; i < eta_pts.size(); ++i) {
      // w z log(phi) - w phi with w z = 1
      const double phi = data_weight_ > 0.0 ? std::exp(eta_pts[i]) : 0.0;
      sum += eta_pts[i] - data_weight_ * phi;
      d_pts[i] = 1.0 - data_weight_ * phi;
    }
    const Eigen::VectorXd eta_nodes = nodes_.eta(theta);
    Eigen::VectorXd d_nodes(eta_nodes.size());
    for (Eigen::Index v = 0; v < eta_nodes.size(); ++v) {
      const double m = weights_[v] * std::exp(eta_nodes[v]);
      sum += -m;
      d_nodes[v] = -m;
    }
    if (!grad.empty()) {
      points_.accumulate_gradient(theta, d_pts, grad);
      nodes_.accumulate_gradient(theta, d_nodes, grad);
    }
    return sum.value();
  }

  void add_hessian(std::span<const double> theta, std::vector<Eigen::Triplet<double>>& out) const override {
    add_weighted_gram(nodes_.linear(), (weights_.array() * nodes_.eta(theta).array().exp()).matrix(), out);
    if (data_weight_ > 0.0) add_weighted_gram(points_.linear(), data_weight_ * points_.eta(theta).array().exp().matrix(), out);
  }

 private:
  PredictorDesign points_;
  PredictorDesign nodes_;
  Eigen::VectorXd weights_;
  double data_weight_;
};

class RegionalLikelihood final : public DatasetLikelihood {
 public:
  RegionalLikelihood(const ProcessModel& model, const RegionalListDataset& ds, const ObservationBinding& b)
      : design_(model, b.predictor, rows(model, ds, b.small_region_factor)) {
    for (const auto& r : ds.records) present_.push_back(r.present);
  }

  double evaluate(std::span<const double> theta, std::span<double> grad) const override {
    const Eigen::VectorXd eta = design_.eta(theta);
    CompensatedSum sum;
    Eigen::VectorXd d = Eigen::VectorXd::Zero(eta.size());
    for (std::size_t k = 0; k < present_.size(); ++k) {
      double mu = 0.0;
      for (auto i = start_[k]; i < start_[k + 1]; ++i) mu += weight_[i] * std::exp(eta[static_cast<Eigen::Index>(i)]);
      const auto [value, d1, d2] = terms(k, mu);
      sum += value;
      for (auto i = start_[k]; i < start_[k + 1]; ++i)
        d[static_cast<Eigen::Index>(i)] = d1 * weight_[i] * std::exp(eta[static_cast<Eigen::Index>(i)]);
    }
    if (!grad.empty()) design_.accumulate_gradient(theta, d, grad);
    return sum.value();
  }

  void add_hessian(std::span<const double> theta, std::vector<Eigen::Triplet<double>>& out) const override {
    const Eigen::VectorXd eta = design_.eta(theta);
    const Eigen::SparseMatrix<double> jt = Eigen::SparseMatrix<double>(design_.linear()).transpose();
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(eta.size());
    for (std::size_t k = 0; k < present_.size(); ++k) {
      Eigen::VectorXd g = Eigen::VectorXd::Zero(eta.size());
      double mu = 0.0;
      for (auto i = start_[k]; i < start_[k + 1]; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        g[ii] = weight_[i] * std::exp(eta[ii]);
        mu += g[ii];
      }
      const auto [value, d1, d2] = terms(k, mu);
      diag -= d1 * g;
      if (d2 != 0.0) {
        // rank-one part: -d2 (J^T g)(J^T g)^T
        const Eigen::VectorXd a = jt * g;
        std::vector<Eigen::Index> nz;
        for (Eigen::Index p = 0; p < a.size(); ++p)
          if (a[p] != 0.0) nz.push_back(p);
        for (auto p : nz)
          for (auto q : nz) out.emplace_back(p, q, -d2 * a[p] * a[q]);
      }
    }
    add_weighted_gram(design_.linear(), diag, out);
  }

 private:
  struct Terms {
    double value, d1, d2;  // derivatives with respect to mu
  };

  Terms terms(std::size_t k, double mu) const {
    if (!present_[k]) return {-mu, -1.0, 0.0};
    const double p = -std::expm1(-mu);
    if (!(p >= kProbabilityClamp)) {
      note_clamp();
      return {std::log(kProbabilityClamp), 0.0, 0.0};
    }
    if (mu > 700.0) return {std::log(p), 0.0, 0.0};
    const double em1 = std::expm1(mu);
    return {std::log(p), 1.0 / em1, -std::exp(mu) / (em1 * em1)};
  }

  std::vector<EvalPoint> rows(const ProcessModel& model, const RegionalListDataset& ds, double factor) {
    const auto& mesh = model.mesh();
    const double limit = factor * mesh.max_edge();
    std::vector<EvalPoint> out;
    start_.push_back(0);
    for (std::size_t k = 0; k < ds.records.size(); ++k) {
      const auto& region = ds.records[k].region;
      const std::string where = "record " + std::to_string(k + 1) + ": ";
      if (diameter(region) > limit)
        throw DataError(where + "region diameter exceeds " + std::to_string(limit) +
                        "; larger regions cannot be treated as a constant surface and need another approach "
                        "(for example a range-map covariate)");
      const auto members = mesh.vertices_in(region);
      if (members.empty()) {
        // no vertex inside: constant surface at the region centroid
        const Point2D c = centroid(region);
        try {
          out.push_back(model.at_point(c));
        } catch (const OutsideDomainError&) {
          throw DataError(where + "region lies outside the domain");
        }
        weight_.push_back(area(region));
      } else {
        for (auto v : members) {
          out.push_back(model.at_vertex(v));
          weight_.push_back(mesh.dual_areas()[v]);
        }
      }
      start_.push_back(out.size());
    }
    return out;
  }

  std::vector<std::size_t> start_;
  std::vector<double> weight_;
  PredictorDesign design_;
  std::vector<bool> present_;
};

}  // namespace

double cloglog_binomial_kernel(int visits, int detections, double eta) {
  bool clamped = false;
  return cloglog_terms(visits, detections, eta, clamped).value;
}

std::unique_ptr<DatasetLikelihood> compile_likelihood(const ProcessModel& model, const Dataset& ds,
                                                      const ObservationBinding& binding) {
  validate_dataset(ds);
  return std::visit(
      [&](const auto& d) -> std::unique_ptr<DatasetLikelihood> {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, CountDataset>) return std::make_unique<CountLikelihood>(model, d, binding);
        else if constexpr (std::is_same_v<T, OccupancyDataset>)
          return std::make_unique<OccupancyLikelihood>(model, d, binding);
        else if constexpr (std::is_same_v<T, PresenceOnlyDataset>)
          return std::make_unique<PresenceOnlyLikelihood>(model, d, binding);
        else return std::make_unique<RegionalLikelihood>(model, d, binding);
      },
      ds);
}

double count_loglik(const CountDataset& ds, const ProcessModel& model, const ObservationBinding& binding,
                    std::span<const double> theta) {
  return compile_likelihood(model, ds, binding)->evaluate(theta, {});
}

double occupancy_loglik(const OccupancyDataset& ds, const ProcessModel& model, const ObservationBinding& binding,
                        std::span<const double> theta) {
  return compile_likelihood(model, ds, binding)->evaluate(theta, {});
}

double po_loglik_quadrature(const PresenceOnlyDataset& ds, const ProcessModel& model,
                            const ObservationBinding& binding, std::span<const double> theta) {
  return compile_likelihood(model, ds, binding)->evaluate(theta, {});
}

double po_loglik_direct(const PresenceOnlyDataset& ds, const ProcessModel& model, const ObservationBinding& binding,
                        std::span<const double> theta) {
  validate_dataset(ds);
  CompensatedSum sum;
  for (std::size_t i = 0; i < ds.points.size(); ++i) {
    try {
      sum += model.eval_linear_predictor(binding.predictor, theta, ds.points[i]);
    } catch (const OutsideDomainError& e) {
      throw DataError("record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  sum += -model.region_mean(binding.predictor, theta);
  sum += -std::lgamma(static_cast<double>(ds.points.size()) + 1.0);
  return sum.value();
}

double regional_list_loglik(const RegionalListDataset& ds, const ProcessModel& model,
                            const ObservationBinding& binding, std::span<const double> theta) {
  return compile_likelihood(model, ds, binding)->evaluate(theta, {});
}

}  // namespace isdm
