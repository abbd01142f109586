#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "isdm/process_model.hpp"

namespace isdm {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CountRecord {
  Point2D site;
  std::int64_t count = 0;
  std::optional<double> duration;
};

struct CountDataset {
  std::vector<CountRecord> records;
  bool duration_offset = true;  // log(duration) enters as an offset when present
  bool overdispersion = false;  // per-site Gaussian noise on the log scale
};

struct OccupancyRecord {
  Point2D site;
  int visits = 1;
  int detections = 0;
};

struct OccupancyDataset {
  std::vector<OccupancyRecord> records;
};

struct PresenceOnlyDataset {
  std::vector<Point2D> points;
};

struct RegionalRecord {
  Polygon region;
  bool present = false;
};

struct RegionalListDataset {
  std::vector<RegionalRecord> records;
};

using Dataset = std::variant<CountDataset, OccupancyDataset, PresenceOnlyDataset, RegionalListDataset>;

const char* kind_name(const Dataset& ds);
std::size_t record_count(const Dataset& ds);

/// Record-level invariants (counts >= 0, 0 <= n <= N, positive durations...).
void validate_dataset(const Dataset& ds);

/// How a dataset attaches to the parameter vector.
struct ObservationBinding {
  LinearPredictor predictor;
  std::optional<std::size_t> log_sd_overdispersion;  // counts with overdispersion
  std::optional<std::size_t> overdispersion_offset;  // first per-site noise value
  /// Presence-only quadrature: weight carried by data points in the integral
  /// (0 means the integral uses mesh vertices only). Data points always enter
  /// with w * z = 1.
  double po_data_weight = 0.0;
  /// Regional lists: maximum region diameter as a multiple of the mesh max_edge.
  double small_region_factor = 3.0;
};

/// Clamp for probabilities inside logs.
inline constexpr double kProbabilityClamp = 1e-12;

/// A dataset's log-likelihood compiled against a process model. Evaluation is
/// const and pure apart from the clamp counter.
class DatasetLikelihood {
 public:
  virtual ~DatasetLikelihood() = default;

  /// Log-likelihood; when grad is non-empty adds d(loglik)/d(theta) into it.
  virtual double evaluate(std::span<const double> theta, std::span<double> grad) const = 0;

  /// Adds -d2(loglik)/d(theta)2 restricted to parameters entering the
  /// predictor linearly (plus per-site noise penalties).
  virtual void add_hessian(std::span<const double> theta, std::vector<Eigen::Triplet<double>>& out) const = 0;

  std::size_t clamp_events() const { return clamps_.load(); }

 protected:
  void note_clamp() const { ++clamps_; }

 private:
  mutable std::atomic<std::size_t> clamps_{0};
};

/// Throws DataError (outside-domain records, oversized regions) or
/// SpecificationError (binding problems).
std::unique_ptr<DatasetLikelihood> compile_likelihood(const ProcessModel& model, const Dataset& ds,
                                                      const ObservationBinding& binding);

double count_loglik(const CountDataset& ds, const ProcessModel& model, const ObservationBinding& binding,
                    std::span<const double> theta);
double occupancy_loglik(const OccupancyDataset& ds, const ProcessModel& model, const ObservationBinding& binding,
                        std::span<const double> theta);
/// sum log phi(s_i) - integral phi - log M!, integral by dual-mesh quadrature.
double po_loglik_direct(const PresenceOnlyDataset& ds, const ProcessModel& model, const ObservationBinding& binding,
                        std::span<const double> theta);
/// Weighted Poisson form over data points plus mesh-vertex quadrature points.
double po_loglik_quadrature(const PresenceOnlyDataset& ds, const ProcessModel& model,
                            const ObservationBinding& binding, std::span<const double> theta);
double regional_list_loglik(const RegionalListDataset& ds, const ProcessModel& model,
                            const ObservationBinding& binding, std::span<const double> theta);

/// Poisson log-pmf pieces used by the count model, exposed for testing.
double poisson_log_pmf(std::int64_t r, double log_mean);
/// n log p + (N - n) log(1 - p) with p = 1 - exp(-exp(eta)); coefficient omitted.
double cloglog_binomial_kernel(int visits, int detections, double eta);

}  // namespace isdm
