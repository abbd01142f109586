#include "isdm/simulate.hpp"

#include <cmath>
#include <future>

namespace isdm {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t replicate_seed(std::uint64_t base, std::uint64_t replicate) {
  return splitmix64(base + (replicate + 1) * 0x9E3779B97F4A7C15ULL);
}

namespace {

constexpr int kProbeLevels = 4;

using PointIntensity = std::function<double(Point2D, std::size_t, const std::array<double, 3>&)>;

std::vector<Point2D> rejection_sample(const TriangulatedDomain& mesh, const std::vector<double>& vertex_intensity,
                                      const PointIntensity& intensity, std::mt19937_64& rng, double safety) {
  if (!(safety >= 1.0)) throw std::invalid_argument("safety factor must be at least 1");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Point2D> out;
  const auto& verts = mesh.vertices();
  for (std::size_t t = 0; t < mesh.triangle_count(); ++t) {
    const auto& tri = mesh.triangles()[t];
    double top = 0.0;
    for (auto v : tri) {
      if (!(vertex_intensity[v] >= 0.0) || !std::isfinite(vertex_intensity[v]))
        throw std::domain_error("intensity must be finite and nonnegative");
      top = std::max(top, vertex_intensity[v]);
    }
    // interior probes on a barycentric lattice catch maxima away from the vertices
    for (int i = 0; i <= kProbeLevels; ++i)
      for (int j = 0; i + j <= kProbeLevels; ++j) {
        const int k = kProbeLevels - i - j;
        if (i == kProbeLevels || j == kProbeLevels || k == kProbeLevels) continue;
        const std::array<double, 3> w{static_cast<double>(i) / kProbeLevels, static_cast<double>(j) / kProbeLevels,
                                      static_cast<double>(k) / kProbeLevels};
        const Point2D p{w[0] * verts[tri[0]].x + w[1] * verts[tri[1]].x + w[2] * verts[tri[2]].x,
                        w[0] * verts[tri[0]].y + w[1] * verts[tri[1]].y + w[2] * verts[tri[2]].y};
        const double lam = intensity(p, t, w);
        if (!(lam >= 0.0) || !std::isfinite(lam)) throw std::domain_error("intensity must be finite and nonnegative");
        top = std::max(top, lam);
      }
    double factor = safety;
    std::vector<Point2D> kept;
    for (bool restart = true; restart;) {
      restart = false;
      kept.clear();
      const double bound = factor * top;
      if (bound <= 0.0) break;
      std::poisson_distribution<std::int64_t> count(bound * mesh.triangle_area(t));
      const auto n = count(rng);
      for (std::int64_t k = 0; k < n; ++k) {
        const double s = std::sqrt(unif(rng)), r = unif(rng);
        const std::array<double, 3> w{1.0 - s, s * (1.0 - r), s * r};
        const Point2D p{w[0] * verts[tri[0]].x + w[1] * verts[tri[1]].x + w[2] * verts[tri[2]].x,
                        w[0] * verts[tri[0]].y + w[1] * verts[tri[1]].y + w[2] * verts[tri[2]].y};
        const double lam = intensity(p, t, w);
        const double accept = unif(rng);
        if (lam > bound) {
          factor *= 2.0;
          restart = true;
          break;
        }
        if (accept * bound < lam) kept.push_back(p);
      }
    }
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

}  // namespace

std::vector<Point2D> simulate_lgcp(const TriangulatedDomain& mesh, const std::function<double(Point2D)>& intensity,
                                   std::mt19937_64& rng, double safety) {
  std::vector<double> at_vertices;
  for (const auto& v : mesh.vertices()) at_vertices.push_back(intensity(v));
  return rejection_sample(
      mesh, at_vertices, [&](Point2D p, std::size_t, const std::array<double, 3>&) { return intensity(p); }, rng, safety);
}

std::vector<Point2D> simulate_lgcp(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                                   std::mt19937_64& rng, double safety) {
  model.check(lp);
  const auto& mesh = model.mesh();
  std::vector<double> at_vertices;
  for (std::size_t v = 0; v < mesh.vertex_count(); ++v)
    at_vertices.push_back(std::exp(model.eval_linear_predictor(lp, theta, model.at_vertex(v))));
  return rejection_sample(
      mesh, at_vertices,
      [&](Point2D p, std::size_t t, const std::array<double, 3>& w) {
        EvalPoint e{p, mesh.triangles()[t], w};
        return std::exp(model.eval_linear_predictor(lp, theta, e));
      },
      rng, safety);
}

std::vector<Point2D> thin_pattern(std::span<const Point2D> pattern, const std::function<double(Point2D)>& q,
                                  std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Point2D> out;
  for (const auto& p : pattern) {
    const double prob = q(p);
    if (!(prob >= 0.0 && prob <= 1.0))
      throw std::domain_error("thinning probability " + std::to_string(prob) + " is outside [0, 1]");
    if (unif(rng) < prob) out.push_back(p);
  }
  return out;
}

namespace {
EvalPoint site_point(const ProcessModel& model, Point2D p, std::size_t record) {
  try {
    return model.at_point(p);
  } catch (const OutsideDomainError& e) {
    throw DataError("design record " + std::to_string(record + 1) + ": " + e.what());
  }
}
}  // namespace

CountDataset simulate_counts(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                             const CountDataset& design, std::mt19937_64& rng, std::optional<double> noise_sd) {
  model.check(lp);
  CountDataset out = design;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    auto& r = out.records[i];
    double log_mean = model.eval_linear_predictor(lp, theta, site_point(model, r.site, i));
    if (design.duration_offset && r.duration) {
      if (!(*r.duration > 0.0)) throw DataError("design record " + std::to_string(i + 1) + ": duration must be positive");
      log_mean += std::log(*r.duration);
    }
    if (noise_sd) log_mean += *noise_sd * normal(rng);
    const double mean = std::exp(log_mean);
    r.count = mean > 0.0 ? std::poisson_distribution<std::int64_t>(mean)(rng) : 0;
  }
  return out;
}

OccupancyDataset simulate_occupancy(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                                    const OccupancyDataset& design, std::mt19937_64& rng) {
  model.check(lp);
  OccupancyDataset out = design;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    auto& r = out.records[i];
    if (r.visits < 1) throw DataError("design record " + std::to_string(i + 1) + ": visits must be at least 1");
    const double p = occupancy_probability(std::exp(model.eval_linear_predictor(lp, theta, site_point(model, r.site, i))));
    r.detections = std::binomial_distribution<int>(r.visits, p)(rng);
  }
  return out;
}

double regional_mean(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                     const Polygon& region) {
  const auto& mesh = model.mesh();
  const auto members = mesh.vertices_in(region);
  if (members.empty()) {
    const auto c = centroid(region);
    if (!mesh.contains(c)) throw DataError("region lies outside the domain");
    return area(region) * std::exp(model.eval_linear_predictor(lp, theta, model.at_point(c)));
  }
  double mu = 0.0;
  for (auto v : members) mu += mesh.dual_areas()[v] * std::exp(model.eval_linear_predictor(lp, theta, model.at_vertex(v)));
  return mu;
}

RegionalListDataset simulate_regional(const ProcessModel& model, const LinearPredictor& lp, std::span<const double> theta,
                                      const RegionalListDataset& design, std::mt19937_64& rng) {
  model.check(lp);
  RegionalListDataset out = design;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    double mu = 0.0;
    try {
      mu = regional_mean(model, lp, theta, out.records[i].region);
    } catch (const DataError& e) {
      throw DataError("design record " + std::to_string(i + 1) + ": " + e.what());
    }
    out.records[i].present = unif(rng) < occupancy_probability(mu);
  }
  return out;
}

SimulationOutput simulate(const SimulationConfig& config) {
  const auto& spec = config.model;
  if (config.truth.size() != static_cast<Eigen::Index>(spec.size()))
    throw SpecificationError("truth vector has " + std::to_string(config.truth.size()) + " entries, expected " +
                             std::to_string(spec.size()));
  if (!config.truth.allFinite()) throw SpecificationError("true parameters must be finite");
  std::mt19937_64 rng(config.seed);
  SimulationOutput out;
  out.truth = config.truth;

  const auto nv = static_cast<Eigen::Index>(spec.mesh->vertex_count());
  for (const auto& f : spec.fields) {
    const MaternParams mp{out.truth[static_cast<Eigen::Index>(f.log_tau)],
                          out.truth[static_cast<Eigen::Index>(f.log_kappa)]};
    const FieldPrior prior = spec.representation == FieldRepresentation::dense_covariance
                                 ? build_dense_covariance(*spec.mesh, mp, spec.dense_limit)
                                 : build_sparse_precision(*spec.mesh, mp);
    out.truth.segment(static_cast<Eigen::Index>(f.offset), nv) = sample_field(prior, rng());
  }

  const ProcessModel model = spec.process_model();
  const std::span<const double> th(out.truth.data(), static_cast<std::size_t>(out.truth.size()));
  for (const auto& d : config.datasets) {
    Dataset result = std::visit(
        [&](const auto& design) -> Dataset {
          using T = std::decay_t<decltype(design)>;
          if constexpr (std::is_same_v<T, PresenceOnlyDataset>) {
            const auto pattern = simulate_lgcp(model, d.process, th, rng, config.safety_factor);
            model.check(d.thinning);
            if (d.thinning.terms.empty()) return PresenceOnlyDataset{pattern};
            const auto q = [&](Point2D p) { return std::exp(model.eval_linear_predictor(d.thinning, th, p)); };
            return PresenceOnlyDataset{thin_pattern(pattern, q, rng)};
          } else {
            LinearPredictor lp = d.process;
            lp.terms.insert(lp.terms.end(), d.thinning.terms.begin(), d.thinning.terms.end());
            if constexpr (std::is_same_v<T, CountDataset>) return simulate_counts(model, lp, th, design, rng, d.noise_sd);
            else if constexpr (std::is_same_v<T, OccupancyDataset>) return simulate_occupancy(model, lp, th, design, rng);
            else return simulate_regional(model, lp, th, design, rng);
          }
        },
        d.design);
    out.datasets.emplace_back(d.name, std::move(result));
  }
  return out;
}

std::vector<SimulationOutput> simulate_replicates(const SimulationConfig& config, std::size_t replicates,
                                                  unsigned threads) {
  std::vector<SimulationOutput> out(replicates);
  const auto run = [&](std::size_t r) {
    SimulationConfig c = config;
    c.seed = replicate_seed(config.seed, r);
    out[r] = simulate(c);
  };
  threads = std::max(1u, threads);
  for (std::size_t start = 0; start < replicates; start += threads) {
    std::vector<std::future<void>> jobs;
    for (std::size_t r = start; r < std::min(replicates, start + threads); ++r)
      jobs.push_back(std::async(threads > 1 ? std::launch::async : std::launch::deferred, run, r));
    for (auto& j : jobs) j.get();
  }
  return out;
}

}  // namespace isdm
