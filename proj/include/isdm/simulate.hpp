#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "isdm/inference.hpp"

namespace isdm {

/// Seed for replicate r derived from a base seed: splitmix64(base + (r + 1) * 0x9E3779B97F4A7C15).
std::uint64_t replicate_seed(std::uint64_t base, std::uint64_t replicate);
std::uint64_t splitmix64(std::uint64_t x);

/// Poisson process with intensity lambda(s) on the mesh domain. Each triangle
/// draws candidates from a homogeneous process at a bound of `safety` times the
/// largest intensity seen at its vertices and a barycentric probe lattice
/// (spacing 1/4), and keeps each with probability lambda(p) / bound. A
/// candidate above the bound widens the factor by 2 and restarts the triangle.
std::vector<Point2D> simulate_lgcp(const TriangulatedDomain& mesh, const std::function<double(Point2D)>& intensity,
                                   std::mt19937_64& rng, double safety = 1.2);
std::vector<Point2D> simulate_lgcp(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                                   std::mt19937_64& rng, double safety = 1.2);

/// Independent retention with probability q(s); q outside [0, 1] is rejected.
std::vector<Point2D> thin_pattern(std::span<const Point2D> pattern, const std::function<double(Point2D)>& q,
                                  std::mt19937_64& rng);

/// Counts ~ Poisson(t exp(eta(site) + eps)); eps ~ N(0, sd^2) when noise_sd is given.
CountDataset simulate_counts(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                             const CountDataset& design, std::mt19937_64& rng, std::optional<double> noise_sd = {});
/// Detections ~ Binomial(N, 1 - exp(-exp(eta(site)))).
OccupancyDataset simulate_occupancy(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                                    const OccupancyDataset& design, std::mt19937_64& rng);
/// Presence ~ Bernoulli(1 - exp(-mu(B))), mu by dual-cell quadrature (or the
/// centroid intensity times |B| when no vertex lies in B).
RegionalListDataset simulate_regional(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                                      const RegionalListDataset& design, std::mt19937_64& rng);

/// Expected count in a region as the regional likelihood computes it.
double regional_mean(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                     const Polygon& region);

/// One simulated dataset. For presence-only data the process predictor gives
/// lambda and `thinning` gives log q (q = exp(thinning) must not exceed 1).
/// For the other kinds the two are added.
struct SimulationDataset {
  std::string name;
  Dataset design;
  LinearPredictor process;
  LinearPredictor thinning;
  std::optional<double> noise_sd;  // overdispersed counts
};

struct SimulationConfig {
  /// Covariates, range maps, fields and parameter names. Datasets are ignored.
  ModelSpec model;
  /// Generating values. Field latents are sampled from their Matérn priors and overwritten.
  Eigen::VectorXd truth;
  std::vector<SimulationDataset> datasets;
  std::uint64_t seed = 0;
  double safety_factor = 1.2;
};

struct SimulationOutput {
  std::vector<std::pair<std::string, Dataset>> datasets;
  Eigen::VectorXd truth;
};

/// Fields are drawn first (in field order), then datasets in order, all from
/// one generator seeded with config.seed.
SimulationOutput simulate(const SimulationConfig& config);

/// Replicate r uses replicate_seed(config.seed, r). At most `threads` run at once.
std::vector<SimulationOutput> simulate_replicates(const SimulationConfig& config, std::size_t replicates,
                                                  unsigned threads = 1);

}  // namespace isdm
