#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "fixtures.hpp"

using namespace isdm;
using namespace isdm::test;

namespace {

PresenceOnlyDataset homogeneous_points(double lambda, std::uint64_t seed) {
  auto mesh = square_mesh(0.25);
  std::mt19937_64 rng(seed);
  return PresenceOnlyDataset{simulate_lgcp(*mesh, [&](Point2D) { return lambda; }, rng)};
}

ModelSpec intercept_only_po(const PresenceOnlyDataset& ds, double h = 0.25) {
  ModelBuilder b(square_mesh(h));
  b.add_dataset("po", ds, LinearPredictor{{b.intercept("alpha")}});
  b.add_target("lambda", LinearPredictor{{b.intercept("alpha")}});
  b.set_prior("alpha", std::nullopt);
  return b.build();
}

// Counts and occupancy with one covariate: a strictly convex toy posterior.
ModelSpec convex_toy(bool reversed = false) {
  auto mesh = square_mesh(0.25);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  ModelBuilder b(mesh);
  b.add_covariate(wave_covariate(*mesh));
  CountDataset counts;
  for (int i = 0; i < 40; ++i) counts.records.push_back({{u(rng), u(rng)}, i % 6, {}});
  OccupancyDataset occ;
  for (int i = 0; i < 40; ++i) occ.records.push_back({{u(rng), u(rng)}, 3, i % 4 == 0 ? 0 : 1 + i % 3});
  PresenceOnlyDataset po;
  for (int i = 0; i < 30; ++i) po.points.push_back({u(rng), u(rng)});
  const auto add = [&](int k) {
    if (k == 0) b.add_dataset("count", counts, {{b.intercept("a.count"), b.covariate("x", "beta")}});
    if (k == 1) b.add_dataset("occ", occ, {{b.intercept("a.occ"), b.covariate("x", "beta")}});
    if (k == 2) b.add_dataset("po", po, {{b.intercept("a.po"), b.covariate("x", "beta")}});
  };
  // parameters are created in the same order either way
  b.parameter("a.count");
  b.parameter("a.occ");
  b.parameter("a.po");
  b.parameter("beta");
  if (reversed)
    for (int k : {2, 1, 0}) add(k);
  else
    for (int k : {0, 1, 2}) add(k);
  return b.build();
}

}  // namespace

TEST_CASE("parameter layout") {
  const auto spec = four_type_spec(square_mesh(0.25), 1);
  // block order
  for (std::size_t i = 1; i < spec.size(); ++i)
    CHECK(static_cast<int>(spec.parameters[i - 1].block) <= static_cast<int>(spec.parameters[i].block));
  // name bijection
  const Eigen::VectorXd theta = jittered(spec, 2);
  const auto names = flatten_names(spec, theta);
  CHECK(names.size() == spec.size());
  CHECK(unflatten_names(spec, names) == theta);
  auto missing = names;
  missing.erase(missing.begin());
  CHECK_THROWS_AS(unflatten_names(spec, missing), SpecificationError);
  auto extra = names;
  extra["nope"] = 1.0;
  CHECK_THROWS_AS(unflatten_names(spec, extra), SpecificationError);
  CHECK_THROWS_AS(spec.index("nope"), SpecificationError);
  CHECK(spec.parameters[spec.index("u.xi[0]")].block == ParameterBlock::field_latent);
  CHECK(spec.parameters[spec.index("eps.count[3]")].block == ParameterBlock::noise_latent);
  CHECK(spec.parameters[spec.index("thin.po.sampling.effort")].block == ParameterBlock::observation);
}

TEST_CASE("decomposition") {
  auto mesh = square_mesh(0.25);
  ModelBuilder b(mesh);
  b.add_covariate(wave_covariate(*mesh));
  b.add_field("xi");
  const PresenceOnlyDataset po{{{0.2, 0.3}, {0.7, 0.1}, {0.5, 0.5}, {0.9, 0.8}}};
  b.add_dataset("po", po, {{b.intercept("alpha"), b.covariate("x", "beta"), b.field("xi")}});
  const auto spec = b.build();
  const JointObjective obj(spec);
  const Eigen::VectorXd theta = jittered(spec, 3);

  // independently summed parts
  double priors = 0.0;
  for (std::size_t i = 0; i < spec.size(); ++i)
    if (spec.parameters[i].prior) priors += spec.parameters[i].prior->log_density(theta[static_cast<Eigen::Index>(i)]);
  const auto& f = spec.fields[0];
  const MaternParams mp{theta[static_cast<Eigen::Index>(f.log_tau)], theta[static_cast<Eigen::Index>(f.log_kappa)]};
  const double field = field_log_density(theta.segment(static_cast<Eigen::Index>(f.offset), mesh->vertex_count()),
                                         build_sparse_precision(*mesh, mp));
  const std::vector<double> th(theta.data(), theta.data() + theta.size());
  const double data = po_loglik_quadrature(po, spec.process_model(), spec.datasets[0].binding, th);
  const double total = -(priors + field + data);
  CHECK(obj.value(theta) == doctest::Approx(total).epsilon(1e-12));

  const auto parts = obj.decompose(theta);
  CHECK(parts.datasets.at(0).second == doctest::Approx(data).epsilon(1e-12));
  CHECK(parts.fields.at(0).second == doctest::Approx(field).epsilon(1e-12));
  CHECK(parts.priors == doctest::Approx(priors).epsilon(1e-12));
  CHECK(parts.neg_log_posterior == obj.value(theta));
}

TEST_CASE("empty datasets") {
  auto mesh = square_mesh(0.25);
  const auto make = [&](bool with_empty_counts) {
    ModelBuilder b(mesh);
    b.add_field("xi");
    b.add_dataset("occ", OccupancyDataset{}, {{b.intercept("alpha"), b.field("xi")}});
    if (with_empty_counts) b.add_dataset("count", CountDataset{}, {{b.intercept("alpha"), b.field("xi")}});
    return b.build();
  };
  const auto spec = make(false), spec2 = make(true);
  const Eigen::VectorXd theta = jittered(spec, 4);
  const JointObjective obj(spec), obj2(spec2);
  // no records: field and prior terms alone
  const auto parts = obj.decompose(theta);
  CHECK(parts.datasets.at(0).second == 0.0);
  CHECK(obj.value(theta) == doctest::Approx(-(parts.priors + parts.fields.at(0).second)).epsilon(1e-14));
  CHECK(obj2.value(theta) == obj.value(theta));
}

TEST_CASE("gradient against finite differences on every dataset kind") {
  const auto spec = four_type_spec(square_mesh(0.25), 7);
  const JointObjective obj(spec);
  for (std::uint64_t s = 0; s < 3; ++s) CHECK(gradient_error(obj, jittered(spec, 10 + s)) < 1e-6);

  SUBCASE("dense representation") {
    auto dense = spec;
    dense.representation = FieldRepresentation::dense_covariance;
    const JointObjective d(dense);
    CHECK(gradient_error(d, jittered(dense, 20)) < 1e-6);
  }
  SUBCASE("threads give identical values") {
    const JointObjective par(spec, 4);
    const Eigen::VectorXd theta = jittered(spec, 30);
    Eigen::VectorXd g1, g4;
    CHECK(obj.value_and_gradient(theta, g1) == par.value_and_gradient(theta, g4));
    CHECK(g1 == g4);
  }
}

TEST_CASE("dead parameters") {
  auto mesh = square_mesh(0.25);
  ModelBuilder b(mesh);
  b.add_range_map("unused_map", {square(0.0, 0.0, 0.5, 0.5)});
  b.range("unused_map");  // creates log_gamma.unused_map without using it
  b.add_dataset("po", homogeneous_points(50.0, 3), {{b.intercept("alpha")}});
  const auto spec = b.build();
  const std::size_t g = spec.index("log_gamma.unused_map");
  CHECK_FALSE(spec.parameters[g].used);
  const JointObjective obj(spec);
  Eigen::VectorXd theta = spec.initial(), grad;
  theta[static_cast<Eigen::Index>(g)] = 0.7;
  obj.value_and_gradient(theta, grad);
  CHECK(grad[static_cast<Eigen::Index>(g)] == 0.0);
  const double v = obj.value(theta);
  theta[static_cast<Eigen::Index>(g)] = -3.0;
  CHECK(obj.value(theta) == v);

  const auto fit = fit_map(obj);
  CHECK(fit.converged);
  CHECK_FALSE(fit.standard_errors[g].has_value());
  CHECK(fit.standard_errors[spec.index("alpha")].has_value());
}

TEST_CASE("closed-form intercept MLE and standard error") {
  const auto ds = homogeneous_points(500.0, 11);
  const double n = static_cast<double>(ds.points.size());
  const auto spec = intercept_only_po(ds);
  const auto fit = fit_map(spec);
  REQUIRE(fit.converged);
  CHECK(std::abs(fit.optimum[0] - std::log(n / 1.0)) < 1e-4);
  REQUIRE(fit.standard_errors[0].has_value());
  CHECK(std::abs(*fit.standard_errors[0] * std::sqrt(n) - 1.0) < 0.05);
}

TEST_CASE("standard errors shrink with sample size") {
  std::vector<double> ses;
  for (double lambda : {100.0, 400.0, 1600.0}) {
    const auto fit = fit_map(intercept_only_po(homogeneous_points(lambda, 17)));
    REQUIRE(fit.standard_errors[0].has_value());
    ses.push_back(*fit.standard_errors[0]);
  }
  CHECK(ses[1] < ses[0]);
  CHECK(ses[2] < ses[1]);
}

TEST_CASE("convex fits are deterministic across starts") {
  const auto spec = convex_toy();
  const JointObjective obj(spec);
  const auto a = fit_map(obj, {}, spec.initial());
  const auto b = fit_map(obj, {}, jittered(spec, 9, 1.0));
  REQUIRE(a.converged);
  REQUIRE(b.converged);
  CHECK((a.optimum - b.optimum).lpNorm<Eigen::Infinity>() < 1e-6);
  CHECK(a.gradient_norm < 1e-6 * (1.0 + std::abs(a.neg_log_posterior)));
}

TEST_CASE("dataset order does not matter") {
  const auto s1 = convex_toy(false), s2 = convex_toy(true);
  REQUIRE(s1.datasets.front().name != s2.datasets.front().name);
  const JointObjective o1(s1), o2(s2);
  for (std::uint64_t k = 0; k < 5; ++k) {
    const Eigen::VectorXd theta = jittered(s1, 40 + k);
    CHECK(std::abs(o1.value(theta) - o2.value(theta)) <= 1e-12 * std::max(1.0, std::abs(o1.value(theta))));
  }
  const auto f1 = fit_map(o1), f2 = fit_map(o2);
  CHECK((f1.optimum - f2.optimum).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("non-convergence is reported") {
  FitOptions opt;
  opt.max_iterations = 1;
  opt.newton_polish_limit = 0;
  const auto fit = fit_map(convex_toy(), opt);
  CHECK_FALSE(fit.converged);
  CHECK_FALSE(fit.diagnostic.empty());
}

TEST_CASE("optimizer descends monotonically") {
  const Objective rosenbrock = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    g.resize(2);
    g[0] = -2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] * x[0]);
    g[1] = 200 * (x[1] - x[0] * x[0]);
    return (1 - x[0]) * (1 - x[0]) + 100 * (x[1] - x[0] * x[0]) * (x[1] - x[0] * x[0]);
  };
  LbfgsOptions opt;
  opt.tolerance = 1e-10;
  opt.max_iterations = 2000;
  const auto r = minimize_lbfgs(rosenbrock, Eigen::Vector2d(-1.2, 1.0), opt);
  CHECK(r.converged);
  CHECK(r.monotone);
  CHECK(std::abs(r.x[0] - 1.0) < 1e-6);
  CHECK(std::abs(r.x[1] - 1.0) < 1e-6);
}

TEST_CASE("presence-only intercept confounding") {
  auto mesh = square_mesh(0.2);
  const auto po = homogeneous_points(80.0, 21);
  const auto make = [&](bool with_pa) {
    ModelBuilder b(mesh);
    b.add_covariate(wave_covariate(*mesh));
    b.add_dataset("po", po, {{b.intercept("alpha"), b.covariate("x", "beta"), b.intercept("alpha_bias")}});
    if (with_pa) {
      OccupancyDataset pa;
      for (int i = 0; i < 20; ++i) pa.records.push_back({{0.05 + 0.045 * i, 0.5}, 1, i % 2});
      b.add_dataset("pa", pa, {{b.intercept("alpha"), b.covariate("x", "beta")}});
    }
    return b.build();
  };
  const auto only = make(false), both = make(true);
  const JointObjective o1(only), o2(both);
  Eigen::VectorXd theta = only.initial();
  theta[static_cast<Eigen::Index>(only.index("alpha"))] = 3.5;
  theta[static_cast<Eigen::Index>(only.index("alpha_bias"))] = 0.75;
  theta[static_cast<Eigen::Index>(only.index("beta"))] = 0.3;
  const std::vector<double> th(theta.data(), theta.data() + theta.size());
  const auto& binding = only.datasets[0].binding;
  const double base = po_loglik_quadrature(po, only.process_model(), binding, th);
  for (double c : {0.25, -0.5, 1.125}) {
    auto moved = th;
    moved[only.index("alpha")] += c;
    moved[only.index("alpha_bias")] -= c;
    CHECK(po_loglik_quadrature(po, only.process_model(), binding, moved) == base);
  }
  CHECK(confounding_curvature(o1, theta, "alpha", "alpha_bias") == 0.0);
  Eigen::VectorXd theta2 = both.initial();
  for (const auto* name : {"alpha", "alpha_bias", "beta"})
    theta2[static_cast<Eigen::Index>(both.index(name))] = theta[static_cast<Eigen::Index>(only.index(name))];
  CHECK(confounding_curvature(o2, theta2, "alpha", "alpha_bias") > 1e-3);
}

TEST_CASE("fit modes") {
  auto mesh = square_mesh(0.2);
  std::mt19937_64 rng(8);
  ModelBuilder b(mesh);
  b.add_covariate(wave_covariate(*mesh));
  b.add_field("xi");
  PresenceOnlyDataset po;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 120; ++i) po.points.push_back({u(rng), std::pow(u(rng), 1.5)});
  b.add_dataset("po", po, {{b.intercept("alpha"), b.covariate("x", "beta"), b.field("xi")}});

  SUBCASE("laplace equals joint when hyperparameters are fixed") {
    b.fix("log_tau.xi", 0.5);
    b.fix("log_kappa.xi", std::log(5.0));
    const JointObjective obj(b.build());
    FitOptions joint, laplace;
    joint.mode = FitMode::joint;
    laplace.mode = FitMode::laplace;
    CHECK(resolve_fit_mode(obj, FitOptions{}) == FitMode::joint);
    const auto fj = fit_map(obj, joint), fl = fit_map(obj, laplace);
    REQUIRE(fj.converged);
    REQUIRE(fl.converged);
    CHECK((fj.optimum - fl.optimum).lpNorm<Eigen::Infinity>() < 1e-5);
    const std::size_t beta = obj.spec().index("beta");
    REQUIRE(fj.standard_errors[beta].has_value());
    REQUIRE(fl.standard_errors[beta].has_value());
    CHECK(*fl.standard_errors[beta] == doctest::Approx(*fj.standard_errors[beta]).epsilon(1e-3));
  }
  SUBCASE("free hyperparameters select the profiled fit") {
    b.fix("log_kappa.xi", std::log(5.0));
    const JointObjective obj(b.build());
    CHECK(resolve_fit_mode(obj, FitOptions{}) == FitMode::laplace);
    const auto fit = fit_map(obj);
    CHECK(fit.mode == FitMode::laplace);
    CHECK(fit.converged);
    // the reported optimum is an inner optimum
    Eigen::VectorXd g;
    obj.value_and_gradient(fit.optimum, g);
    for (auto i : obj.linear_free()) CHECK(std::abs(g[static_cast<Eigen::Index>(i)]) < 1e-5);
    CHECK(fit.standard_errors[obj.spec().index("log_tau.xi")].has_value());
    CHECK_FALSE(fit.standard_errors[obj.spec().index("u.xi[0]")].has_value());
  }
  CHECK(parse_fit_mode("laplace") == FitMode::laplace);
  CHECK_THROWS(parse_fit_mode("bayes"));
}

TEST_CASE("prediction grid") {
  SUBCASE("constant model is flat") {
    const auto spec = intercept_only_po(homogeneous_points(200.0, 12));
    const JointObjective obj(spec);
    const auto fit = fit_map(obj);
    const auto grid = predict_grid(obj, fit, PredictOptions{0.1, false, {}});
    REQUIRE(grid.layers.size() == 1);
    CHECK(grid.layers[0].points.size() == 100);
    CHECK(grid.dropped == 0);
    for (const auto& p : grid.layers[0].points) {
      CHECK(p.mean == fit.optimum[0]);
      CHECK(p.se == doctest::Approx(*fit.standard_errors[0]).epsilon(1e-12));
    }
    // grid integral of exp(eta) against region_mean
    double sum = 0.0;
    for (const auto& p : grid.layers[0].points) sum += std::exp(p.mean) * 0.01;
    const std::vector<double> th(fit.optimum.data(), fit.optimum.data() + fit.optimum.size());
    CHECK(sum == doctest::Approx(obj.model().region_mean(spec.datasets[0].binding.predictor, th)).epsilon(1e-9));
  }
  SUBCASE("points outside are dropped") {
    auto mesh = std::make_shared<const TriangulatedDomain>(
        build_mesh(make_polygon({{0, 0}, {1, 0}, {1, 0.5}, {0.5, 0.5}, {0.5, 1}, {0, 1}}), 0.2));
    ModelBuilder b(mesh);
    b.add_dataset("po", PresenceOnlyDataset{{{0.2, 0.2}, {0.3, 0.8}}}, {{b.intercept("alpha")}});
    b.add_target("lambda", {{b.intercept("alpha")}});
    const JointObjective obj(b.build());
    const auto grid = predict_grid(obj, fit_map(obj), PredictOptions{0.1, false, {}});
    CHECK(grid.dropped == 25);
    CHECK(grid.layers[0].points.size() == 75);
  }
  SUBCASE("no targets") {
    ModelBuilder b(square_mesh(0.5));
    b.add_dataset("po", PresenceOnlyDataset{{{0.2, 0.2}}}, {{b.intercept("alpha")}});
    const JointObjective obj(b.build());
    CHECK_THROWS_AS(predict_grid(obj, fit_map(obj), PredictOptions{}), SpecificationError);
  }
}

TEST_CASE("case-study composition") {
  auto mesh = square_mesh(0.25);
  const auto covs = std::vector<CovariateField>{wave_covariate(*mesh)};
  OccupancyDataset pa;
  for (int i = 0; i < 10; ++i) pa.records.push_back({{0.05 + 0.09 * i, 0.3}, 1, i % 2});
  const PresenceOnlyDataset po{{{0.2, 0.2}, {0.6, 0.7}, {0.4, 0.9}}};

  const auto one = compose_case_study_spec(mesh, {SpeciesData{"a", pa, std::nullopt}}, covs);
  CHECK(one.fields.size() == 1);
  CHECK(one.datasets.size() == 1);
  CHECK_FALSE(one.find("xi_bias").has_value());
  CHECK_FALSE(one.find("log_tau.xi_bias").has_value());

  const auto two = compose_case_study_spec(mesh, {SpeciesData{"a", pa, po}, SpeciesData{"b", std::nullopt, po}}, covs);
  CHECK(two.fields.size() == 3);
  CHECK(two.datasets.size() == 3);
  CHECK(two.targets.size() == 2);
  CHECK(two.find("beta.a.x").has_value());
  CHECK(two.find("beta.b.x").has_value());
  CHECK(two.find("alpha.pa.a").has_value());
  CHECK(two.find("alpha.po.b").has_value());
  CHECK_FALSE(two.find("alpha.pa.b").has_value());
  // the bias field only in presence-only predictors
  const std::size_t bias = static_cast<std::size_t>(
      std::find_if(two.fields.begin(), two.fields.end(), [](const auto& f) { return f.bias; }) - two.fields.begin());
  for (const auto& d : two.datasets) {
    const bool has_bias = std::any_of(d.binding.predictor.terms.begin(), d.binding.predictor.terms.end(), [&](const Term& t) {
      const auto* f = std::get_if<FieldTerm>(&t);
      return f && f->component == bias;
    });
    CHECK(has_bias == (d.data.index() == 2));
  }
  CHECK_THROWS_AS(compose_case_study_spec(mesh, {SpeciesData{"c", std::nullopt, std::nullopt}}, covs),
                  SpecificationError);
  CHECK_THROWS_AS(compose_case_study_spec(mesh, {}, covs), SpecificationError);
}

TEST_CASE("default intercepts") {
  CHECK(default_intercept(PresenceOnlyDataset{{{0, 0}, {0, 0}, {0, 0}, {0, 0}}}, 2.0) == doctest::Approx(std::log(2.0)));
  CHECK(default_intercept(CountDataset{{{{0, 0}, 4, 2.0}, {{0, 0}, 2, {}}}}, 1.0) == doctest::Approx(std::log(2.0)));
  const double p = 0.25;
  CHECK(default_intercept(OccupancyDataset{{{{0, 0}, 4, 1}}}, 1.0) == doctest::Approx(std::log(-std::log(1 - p))));
}

TEST_CASE("errors carry dataset context") {
  auto mesh = square_mesh(0.25);
  ModelBuilder b(mesh);
  b.add_dataset("survey", CountDataset{{{{0.5, 0.5}, 1, {}}, {{4.0, 0.5}, 2, {}}}}, {{b.intercept("alpha")}});
  CHECK_THROWS_WITH_AS(JointObjective(b.build()), doctest::Contains("dataset 'survey': record 2"), DataError);
}
