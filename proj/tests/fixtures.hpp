#pragma once

#include <random>

#include "helpers.hpp"
#include "isdm/inference.hpp"
#include "isdm/simulate.hpp"

namespace isdm::test {

inline CovariateField wave_covariate(const TriangulatedDomain& m, const std::string& name = "x", double freq = 1.0) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(m.vertex_count()));
  for (std::size_t v = 0; v < m.vertex_count(); ++v) {
    const auto p = m.vertices()[v];
    x[static_cast<Eigen::Index>(v)] = std::sin(2.0 * M_PI * freq * p.x) * std::cos(2.0 * M_PI * freq * p.y);
  }
  return {name, x};
}

inline CovariateField linear_covariate(const TriangulatedDomain& m, const std::string& name, double ax, double ay) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(m.vertex_count()));
  for (std::size_t v = 0; v < m.vertex_count(); ++v)
    x[static_cast<Eigen::Index>(v)] = ax * (m.vertices()[v].x - 0.5) + ay * (m.vertices()[v].y - 0.5);
  return {name, x};
}

/// Every dataset kind at once, with a field, a range map, thinning and
/// overdispersed counts. Records are random but deterministic in `seed`.
inline ModelSpec four_type_spec(std::shared_ptr<const TriangulatedDomain> mesh, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.03, 0.97);
  ModelBuilder b(mesh);
  b.add_covariate(wave_covariate(*mesh));
  b.add_covariate(linear_covariate(*mesh, "effort", 1.0, -0.5));
  b.add_range_map("expert", {square(0.0, 0.0, 0.6, 0.6)});
  b.add_field("xi");

  const auto process = [&](const std::string& alpha) {
    return LinearPredictor{{b.intercept(alpha), b.covariate("x", "beta.x"), b.field("xi"), b.range("expert")}};
  };

  PresenceOnlyDataset po;
  for (int i = 0; i < 30; ++i) po.points.push_back({u(rng), u(rng)});
  auto lp = process("alpha.po");
  lp.terms.push_back(b.thinning(ThinningKind::sampling, "po", {"effort"}));
  b.add_dataset("po", po, lp);

  CountDataset counts;
  counts.overdispersion = true;
  for (int i = 0; i < 8; ++i)
    counts.records.push_back({{u(rng), u(rng)}, i % 5, i % 2 ? std::optional<double>(0.5 + 0.25 * i) : std::nullopt});
  lp = process("alpha.count");
  lp.terms.push_back(b.thinning(ThinningKind::reporting, "count", {}));
  b.add_dataset("count", counts, lp);

  OccupancyDataset occ;
  for (int i = 0; i < 12; ++i) occ.records.push_back({{u(rng), u(rng)}, 1 + i % 3, (i % 3) % 2});
  lp = process("alpha.occ");
  lp.terms.push_back(b.thinning(ThinningKind::detection, "occ", {"effort"}));
  b.add_dataset("occ", occ, lp);

  RegionalListDataset reg;
  for (int i = 0; i < 6; ++i) {
    const double x = 0.6 * u(rng), y = 0.6 * u(rng), w = 0.15 + 0.2 * u(rng);
    reg.records.push_back({square(x, y, x + w, y + w), i % 2 == 0});
  }
  b.add_dataset("regional", reg, process("alpha.reg"));
  return b.build();
}

/// Random point near the prior: latents and every coordinate jittered.
inline Eigen::VectorXd jittered(const ModelSpec& spec, std::uint64_t seed, double sd = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Eigen::VectorXd theta = spec.initial();
  for (auto& t : theta) t += n(rng);
  return theta;
}

/// Largest componentwise relative error of the analytic gradient against
/// central differences with a relative step of 1e-5. Errors are relative to
/// max(|fd|, 1).
inline double gradient_error(const JointObjective& obj, const Eigen::VectorXd& theta) {
  Eigen::VectorXd g;
  obj.value_and_gradient(theta, g);
  double worst = 0.0;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    if (!obj.spec().parameters[static_cast<std::size_t>(j)].used) continue;
    const double h = 1e-5 * std::max(1.0, std::abs(theta[j]));
    Eigen::VectorXd tp = theta, tm = theta;
    tp[j] += h;
    tm[j] -= h;
    const double fd = (obj.value(tp) - obj.value(tm)) / (2.0 * h);
    worst = std::max(worst, std::abs(g[j] - fd) / std::max(std::abs(fd), 1.0));
  }
  return worst;
}

}  // namespace isdm::test
