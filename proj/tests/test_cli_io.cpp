#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "isdm/cli_io.hpp"

using namespace isdm;
namespace fs = std::filesystem;

namespace {

/// Fresh scratch directory per test case.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("isdm_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  fs::path write(const std::string& name, const std::string& text) const {
    write_text(dir / name, text);
    return dir / name;
  }
  fs::path write_json(const std::string& name, const Json& j) const { return write(name, j.dump(2)); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kUnitSquare = R"({"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]})";

Json po_terms() { return Json::array({{{"intercept", "alpha"}}}); }

/// Intercept-only presence-only model with a flat prior on alpha.
Json intercept_only_config(const std::string& data_file) {
  return Json{{"domain", {{"file", "domain.geojson"}, {"max_edge", 0.25}}},
              {"parameters", {{"alpha", {{"prior", nullptr}}}}},
              {"datasets", Json::array({{{"name", "po"}, {"type", "presence_only"}, {"file", data_file}, {"predictor", po_terms()}}})},
              {"targets", Json::array({{{"name", "lambda"}, {"ecological", po_terms()}}})},
              {"fit", {{"mode", "joint"}}},
              {"predict", {{"resolution", 0.25}}}};
}

std::string po_csv(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::string s = "x,y\n";
  for (std::size_t i = 0; i < n; ++i) s += format_coordinate(u(rng)) + "," + format_coordinate(u(rng)) + "\n";
  return s;
}

struct Run {
  int code;
  std::string out, err;
};

template <class F>
Run guarded(F&& f) {
  std::ostringstream out, err;
  const int code = run_guarded([&] { return f(CommandIo{out, err}); }, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("number formatting") {
  CHECK(format_number(1.0 / 3.0) == "0.333333333");
  CHECK(format_number(2.0) == "2");
  CHECK(format_number(-1.5e-12) == "-1.5e-12");
  CHECK(format_coordinate(0.1) == "0.1");
  CHECK(std::stod(format_coordinate(0.1 + 0.2)) == 0.1 + 0.2);
}

TEST_CASE("configuration schema rejects unknown keys at every level") {
  Scratch s("schema");
  s.write("domain.geojson", kUnitSquare);
  Json good = intercept_only_config("po.csv");
  CHECK_NOTHROW(parse_config(good, s.dir));

  Json top = good;
  top["colour"] = "blue";
  CHECK_THROWS_AS(parse_config(top, s.dir), ConfigError);
  Json nested = good;
  nested["datasets"][0]["weight"] = 2;
  CHECK_THROWS_WITH_AS(parse_config(nested, s.dir), doctest::Contains("unknown key 'weight'"), ConfigError);
  Json term = good;
  term["datasets"][0]["predictor"][0]["slope"] = 1;
  CHECK_THROWS_AS(parse_config(term, s.dir), ConfigError);
  Json prior = good;
  prior["parameters"]["alpha"]["prior"] = {{"mean", 0}, {"sd", 1}, {"shape", 2}};
  CHECK_THROWS_AS(parse_config(prior, s.dir), ConfigError);

  Json bad_type = good;
  bad_type["datasets"][0]["type"] = "sightings";
  CHECK_THROWS_AS(parse_config(bad_type, s.dir), ConfigError);
  Json bad_edge = good;
  bad_edge["domain"]["max_edge"] = -1;
  CHECK_THROWS_AS(parse_config(bad_edge, s.dir), ConfigError);
  Json bad_mode = good;
  bad_mode["fit"]["mode"] = "fast";
  CHECK_THROWS_AS(parse_config(bad_mode, s.dir), ConfigError);

  const auto path = s.write_json("bad.json", top);
  const Run r = guarded([&](CommandIo io) { return cmd_validate({path, std::nullopt}, io); });
  CHECK(r.code == exit_config);
  const Json err = Json::parse(r.err);
  CHECK(err["error"]["code"] == 2);
  CHECK(err["error"]["kind"] == "config");
}

TEST_CASE("unknown parameter overrides are configuration errors") {
  Scratch s("override");
  s.write("domain.geojson", kUnitSquare);
  s.write("po.csv", po_csv(5, 1));
  Json c = intercept_only_config("po.csv");
  c["parameters"]["gamma"] = {{"init", 1.0}};
  const auto path = s.write_json("run.json", c);
  const Run r = guarded([&](CommandIo io) { return cmd_validate({path, std::nullopt}, io); });
  CHECK(r.code == exit_config);
  CHECK(r.err.find("gamma") != std::string::npos);
}

TEST_CASE("dataset files") {
  Scratch s("datasets");
  SUBCASE("malformed rows are rejected with their line number") {
    const auto p = s.write("counts.csv", "x,y,count\n0.1,0.2,3\n0.3,abc,1\n");
    CHECK_THROWS_WITH_AS(read_dataset(DatasetKind::count, p), doctest::Contains("line 3"), DataError);
    const auto q = s.write("short.csv", "x,y,count\n0.1,0.2,3\n0.3,0.4\n");
    CHECK_THROWS_WITH_AS(read_dataset(DatasetKind::count, q), doctest::Contains("line 3"), DataError);
    const auto neg = s.write("neg.csv", "x,y,count\n0.1,0.2,-3\n");
    CHECK_THROWS_WITH_AS(read_dataset(DatasetKind::count, neg), doctest::Contains("line 2"), DataError);
    const auto occ = s.write("occ.csv", "x,y,visits,detections\n0.1,0.2,2,3\n");
    CHECK_THROWS_WITH_AS(read_dataset(DatasetKind::occupancy, occ), doctest::Contains("line 2"), DataError);
  }
  SUBCASE("columns in any order, extra columns rejected") {
    const auto p = s.write("counts.csv", "count,y,x,duration\n4,0.25,0.5,2\n0,0.75,0.5,\n");
    const auto d = std::get<CountDataset>(read_dataset(DatasetKind::count, p));
    REQUIRE(d.records.size() == 2);
    CHECK(d.records[0].site.x == 0.5);
    CHECK(d.records[0].count == 4);
    CHECK(*d.records[0].duration == 2.0);
    CHECK_FALSE(d.records[1].duration.has_value());
    const auto extra = s.write("extra.csv", "x,y,count,colour\n0.5,0.5,1,red\n");
    CHECK_THROWS_AS(read_dataset(DatasetKind::count, extra), DataError);
    const auto missing = s.write("missing.csv", "x,y\n0.5,0.5\n");
    CHECK_THROWS_AS(read_dataset(DatasetKind::count, missing), DataError);
    CHECK_NOTHROW(read_dataset(DatasetKind::count, missing, true));
  }
  SUBCASE("round trip through the writers") {
    CountDataset c;
    c.records = {{{0.1, 0.2}, 3, 1.5}, {{0.3, 0.4}, 0, std::nullopt}};
    write_dataset(c, s.dir / "c.csv");
    const auto c2 = std::get<CountDataset>(read_dataset(DatasetKind::count, s.dir / "c.csv"));
    CHECK(c2.records[0].site.x == 0.1);
    CHECK(c2.records[0].count == 3);
    CHECK(*c2.records[0].duration == 1.5);
    CHECK_FALSE(c2.records[1].duration);

    RegionalListDataset r;
    r.records = {{test::square(0.1, 0.1, 0.3, 0.3), true}, {test::square(0.5, 0.5, 0.6, 0.7), false}};
    write_dataset(r, s.dir / "r.geojson");
    const auto r2 = std::get<RegionalListDataset>(read_dataset(DatasetKind::regional, s.dir / "r.geojson"));
    REQUIRE(r2.records.size() == 2);
    CHECK(r2.records[0].present);
    CHECK_FALSE(r2.records[1].present);
    CHECK(area(r2.records[1].region) == doctest::Approx(0.02).epsilon(1e-12));

    OccupancyDataset o;
    o.records = {{{0.25, 0.75}, 3, 2}};
    write_dataset(o, s.dir / "o.csv");
    const auto o2 = std::get<OccupancyDataset>(read_dataset(DatasetKind::occupancy, s.dir / "o.csv"));
    CHECK(o2.records[0].visits == 3);
    CHECK(o2.records[0].detections == 2);
  }
  SUBCASE("regional lists need a presence flag unless read as a design") {
    const auto p = s.write("r.geojson", R"({"type":"FeatureCollection","features":[{"type":"Feature","properties":{},
      "geometry":{"type":"Polygon","coordinates":[[[0,0],[0.2,0],[0.2,0.2],[0,0.2],[0,0]]]}}]})");
    CHECK_THROWS_WITH_AS(read_dataset(DatasetKind::regional, p), doctest::Contains("feature 1"), DataError);
    CHECK(record_count(read_dataset(DatasetKind::regional, p, true)) == 1);
  }
  SUBCASE("domain polygons") {
    const auto holes = s.write("holes.geojson", R"({"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]],
      [[0.4,0.4],[0.6,0.4],[0.6,0.6],[0.4,0.6],[0.4,0.4]]]})");
    CHECK_THROWS_WITH_AS(read_domain_geojson(holes), doctest::Contains("holes"), DataError);
    const auto two = s.write("two.geojson", R"({"type":"MultiPolygon","coordinates":[[[[0,0],[1,0],[1,1],[0,0]]],
      [[[2,0],[3,0],[3,1],[2,0]]]]})");
    CHECK_THROWS_AS(read_domain_geojson(two), DataError);
    const auto feature = s.write("f.geojson", std::string(R"({"type":"Feature","properties":{},"geometry":)") + kUnitSquare + "}");
    CHECK(area(read_domain_geojson(feature)) == doctest::Approx(1.0));
  }
}

TEST_CASE("covariates are projected onto mesh vertices") {
  Scratch s("covariate");
  const auto mesh = test::square_mesh(0.25);
  std::string csv = "x,y,value\n";
  for (int i = 0; i <= 20; ++i)
    for (int j = 0; j <= 20; ++j) csv += std::to_string(i / 20.0) + "," + std::to_string(j / 20.0) + "," + std::to_string(i / 20.0) + "\n";
  const auto c = read_covariate_csv(*mesh, "east", s.write("east.csv", csv));
  CHECK(c.name == "east");
  for (std::size_t v = 0; v < mesh->vertex_count(); ++v)
    CHECK(c.values[static_cast<Eigen::Index>(v)] == doctest::Approx(mesh->vertices()[v].x).epsilon(0.026));
  CHECK_THROWS_AS(read_covariate_csv(*mesh, "e", s.write("empty.csv", "x,y,value\n")), DataError);
}

TEST_CASE("mesh command: area check and cache") {
  Scratch s("mesh");
  s.write("domain.geojson", kUnitSquare);
  const auto cfg = s.write_json("run.json", {{"domain", {{"file", "domain.geojson"}, {"max_edge", 0.1}, {"cache", "mesh.json"}}},
                                             {"datasets", Json::array()}});
  const Run first = guarded([&](CommandIo io) { return cmd_mesh({cfg, std::nullopt}, io); });
  CHECK(first.code == exit_ok);
  CHECK(first.out.find("area ok") != std::string::npos);
  CHECK(first.out.find("cache written") != std::string::npos);
  const std::string artifact = slurp(s.dir / "mesh.json");
  CHECK(Json::parse(artifact)["format"] == "isdm-mesh");

  const Run second = guarded([&](CommandIo io) { return cmd_mesh({cfg, std::nullopt}, io); });
  CHECK(second.code == exit_ok);
  CHECK(second.out.find("cache hit") != std::string::npos);
  CHECK(slurp(s.dir / "mesh.json") == artifact);

  const auto cached = mesh_from_json(Json::parse(artifact));
  const auto fresh = build_mesh(test::unit_square(), 0.1);
  CHECK(cached.vertex_count() == fresh.vertex_count());
  CHECK(cached.triangle_count() == fresh.triangle_count());
  CHECK(cached.area() == doctest::Approx(1.0).epsilon(1e-12));

  // a different max_edge misses the cache and rewrites it
  const auto cfg2 = s.write_json("run2.json", {{"domain", {{"file", "domain.geojson"}, {"max_edge", 0.2}, {"cache", "mesh.json"}}}});
  const Run third = guarded([&](CommandIo io) { return cmd_mesh({cfg2, std::nullopt}, io); });
  CHECK(third.out.find("cache written") != std::string::npos);
  CHECK(slurp(s.dir / "mesh.json") != artifact);
}

TEST_CASE("mesh command: self-intersecting polygon") {
  Scratch s("bowtie");
  s.write("domain.geojson", R"({"type":"Polygon","coordinates":[[[0,0],[1,1],[1,0],[0,1],[0,0]]]})");
  const auto cfg = s.write_json("run.json", {{"domain", {{"file", "domain.geojson"}, {"max_edge", 0.1}}}});
  const Run r = guarded([&](CommandIo io) { return cmd_mesh({cfg, std::nullopt}, io); });
  CHECK(r.code == exit_data);
  const Json err = Json::parse(r.err);
  CHECK(err["error"]["kind"] == "data");
  CHECK_FALSE(err["error"]["message"].get<std::string>().empty());
}

TEST_CASE("simulate command") {
  Scratch s("simulate");
  s.write("domain.geojson", kUnitSquare);
  s.write("sites.csv", "x,y,visits\n0.2,0.2,2\n0.8,0.3,1\n0.5,0.9,3\n");
  Json c = intercept_only_config("po.csv");
  c["datasets"] = Json::array();
  c["simulate"] = {{"seed", 42},
                   {"truth", {{"alpha", 4.0}}},
                   {"datasets", Json::array({{{"name", "po"}, {"type", "presence_only"}, {"process", po_terms()}},
                                             {{"name", "occ"}, {"type", "occupancy"}, {"design", "sites.csv"}, {"process", po_terms()}}})}};
  const auto cfg = s.write_json("run.json", c);

  SUBCASE("fixed seed gives identical files") {
    for (const char* d : {"a", "b"}) {
      const Run r = guarded([&](CommandIo io) { return cmd_simulate({cfg, s.dir / d, std::nullopt, 1}, io); });
      REQUIRE(r.code == exit_ok);
    }
    for (const char* f : {"po.csv", "occ.csv", "truth.json"}) CHECK(slurp(s.dir / "a" / f) == slurp(s.dir / "b" / f));
    CHECK(record_count(read_dataset(DatasetKind::presence_only, s.dir / "a" / "po.csv")) > 20);
    const Json truth = read_json(s.dir / "a" / "truth.json");
    CHECK(truth["seed"] == 42);
    CHECK(truth["parameters"]["alpha"] == 4.0);

    const Run other = guarded([&](CommandIo io) { return cmd_simulate({cfg, s.dir / "c", std::uint64_t{43}, 1}, io); });
    REQUIRE(other.code == exit_ok);
    CHECK(slurp(s.dir / "c" / "po.csv") != slurp(s.dir / "a" / "po.csv"));
  }
  SUBCASE("zero intensity gives a header-only presence file") {
    Json z = c;
    z["simulate"]["truth"]["alpha"] = -1000.0;
    const auto zc = s.write_json("zero.json", z);
    const Run r = guarded([&](CommandIo io) { return cmd_simulate({zc, s.dir / "z", std::nullopt, 1}, io); });
    REQUIRE(r.code == exit_ok);
    CHECK(slurp(s.dir / "z" / "po.csv") == "x,y\n");
  }
  SUBCASE("replicates go to numbered directories with derived seeds") {
    Json rep = c;
    rep["simulate"]["replicates"] = 3;
    const auto rc = s.write_json("rep.json", rep);
    const Run r = guarded([&](CommandIo io) { return cmd_simulate({rc, s.dir / "reps", std::nullopt, 2}, io); });
    REQUIRE(r.code == exit_ok);
    for (std::uint64_t k = 0; k < 3; ++k) {
      char name[16];
      std::snprintf(name, sizeof name, "rep_%03d", static_cast<int>(k));
      CHECK(read_json(s.dir / "reps" / name / "truth.json")["seed"] == replicate_seed(42, k));
    }
  }
  SUBCASE("design points outside the domain are data errors") {
    s.write("sites.csv", "x,y,visits\n0.2,0.2,2\n1.8,0.3,1\n");
    const Run r = guarded([&](CommandIo io) { return cmd_simulate({cfg, s.dir / "o", std::nullopt, 1}, io); });
    CHECK(r.code == exit_data);
  }
  SUBCASE("truth for an unknown parameter is a configuration error") {
    Json u = c;
    u["simulate"]["truth"]["delta"] = 1.0;
    const auto uc = s.write_json("u.json", u);
    CHECK(guarded([&](CommandIo io) { return cmd_simulate({uc, s.dir / "u", std::nullopt, 1}, io); }).code == exit_config);
  }
}

TEST_CASE("fit command: closed-form intercept") {
  Scratch s("fit");
  s.write("domain.geojson", kUnitSquare);
  const std::size_t n = 200;
  s.write("po.csv", po_csv(n, 9));
  const auto cfg = s.write_json("run.json", intercept_only_config("po.csv"));
  const Run r = guarded([&](CommandIo io) { return cmd_fit({cfg, std::nullopt, s.dir / "fit.json", 1}, io); });
  REQUIRE(r.code == exit_ok);
  const Json fit = read_json(s.dir / "fit.json");
  CHECK(fit["converged"] == true);
  CHECK(fit["mode"] == "joint");
  CHECK(fit["estimates"]["alpha"]["estimate"].get<double>() == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-4));
  CHECK(fit["estimates"]["alpha"]["se"].get<double>() == doctest::Approx(1.0 / std::sqrt(static_cast<double>(n))).epsilon(0.05));
  CHECK(fit["decomposition"]["datasets"].contains("po"));

  SUBCASE("summary restores the optimum") {
    const auto mesh = obtain_mesh(load_config(cfg)).mesh;
    const ModelSpec spec = build_model(load_config(cfg), mesh);
    const FitResult back = fit_from_summary(spec, fit);
    CHECK(back.optimum[0] == fit["optimum"]["values"][0].get<double>());
    CHECK(*back.standard_errors[0] == fit["estimates"]["alpha"]["se"].get<double>());
  }
  SUBCASE("data directory override") {
    fs::create_directories(s.dir / "elsewhere");
    write_text(s.dir / "elsewhere" / "po.csv", po_csv(50, 3));
    const Run o = guarded([&](CommandIo io) { return cmd_fit({cfg, s.dir / "elsewhere", s.dir / "fit2.json", 1}, io); });
    REQUIRE(o.code == exit_ok);
    CHECK(read_json(s.dir / "fit2.json")["estimates"]["alpha"]["estimate"].get<double>() ==
          doctest::Approx(std::log(50.0)).epsilon(1e-4));
  }
  SUBCASE("empty dataset gives a flagged prior-only fit") {
    s.write("empty.csv", "x,y\n");
    Json c = intercept_only_config("empty.csv");
    c["parameters"]["alpha"]["prior"] = {{"mean", 0.0}, {"sd", 1.0}};
    const auto ec = s.write_json("empty.json", c);
    const Run e = guarded([&](CommandIo io) { return cmd_fit({ec, std::nullopt, s.dir / "prior.json", 1}, io); });
    CHECK(e.code == exit_ok);
    const Json pf = read_json(s.dir / "prior.json");
    CHECK(pf["flags"].dump().find("prior-only") != std::string::npos);
    CHECK(e.err.find("prior-only") != std::string::npos);
  }
  SUBCASE("non-convergence has its own exit code and still writes the summary") {
    Json c = intercept_only_config("po.csv");
    c["fit"]["max_iterations"] = 1;
    c["fit"]["newton_polish_limit"] = 0;
    c["parameters"]["alpha"]["init"] = -5.0;
    const auto nc = s.write_json("nc.json", c);
    const Run e = guarded([&](CommandIo io) { return cmd_fit({nc, std::nullopt, s.dir / "nc_fit.json", 1}, io); });
    CHECK(e.code == exit_not_converged);
    CHECK(read_json(s.dir / "nc_fit.json")["converged"] == false);
    CHECK(Json::parse(e.err.substr(e.err.find('{')))["error"]["code"] == 4);
  }
  SUBCASE("malformed data row") {
    s.write("po.csv", "x,y\n0.1,0.1\n0.2\n");
    const Run e = guarded([&](CommandIo io) { return cmd_fit({cfg, std::nullopt, s.dir / "bad.json", 1}, io); });
    CHECK(e.code == exit_data);
    CHECK(e.err.find("line 3") != std::string::npos);
  }
  SUBCASE("records outside the domain") {
    s.write("po.csv", "x,y\n0.1,0.1\n1.5,0.2\n");
    const Run e = guarded([&](CommandIo io) { return cmd_fit({cfg, std::nullopt, s.dir / "bad.json", 1}, io); });
    CHECK(e.code == exit_data);
  }
}

TEST_CASE("predict command") {
  Scratch s("predict");
  s.write("domain.geojson", kUnitSquare);
  s.write("po.csv", po_csv(100, 4));
  const auto cfg = s.write_json("run.json", intercept_only_config("po.csv"));
  REQUIRE(guarded([&](CommandIo io) { return cmd_fit({cfg, std::nullopt, s.dir / "fit.json", 1}, io); }).code == exit_ok);

  SUBCASE("constant model gives a constant mean column") {
    const Run r = guarded([&](CommandIo io) {
      return cmd_predict({cfg, s.dir / "fit.json", std::nullopt, s.dir / "grid.csv", std::nullopt, std::nullopt, 1}, io);
    });
    REQUIRE(r.code == exit_ok);
    std::istringstream in(slurp(s.dir / "grid.csv"));
    std::string line;
    std::getline(in, line);
    CHECK(line == "x,y,mean,se");
    std::set<std::string> means;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      std::vector<std::string> cells;
      std::stringstream ls(line);
      for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
      REQUIRE(cells.size() == 4);
      means.insert(cells[2]);
    }
    CHECK(rows == 16);
    CHECK(means.size() == 1);
    CHECK(*means.begin() == format_number(std::log(100.0)));
    CHECK(r.err.find("0 outside") != std::string::npos);
  }
  SUBCASE("grid points outside an L-shaped domain are reported") {
    s.write("domain.geojson", R"({"type":"Polygon","coordinates":[[[0,0],[1,0],[1,0.5],[0.5,0.5],[0.5,1],[0,1],[0,0]]]})");
    s.write("po.csv", "x,y\n0.1,0.1\n0.2,0.7\n0.7,0.2\n");
    REQUIRE(guarded([&](CommandIo io) { return cmd_fit({cfg, std::nullopt, s.dir / "fitL.json", 1}, io); }).code == exit_ok);
    const Run r = guarded([&](CommandIo io) {
      return cmd_predict({cfg, s.dir / "fitL.json", std::nullopt, s.dir / "gridL.csv", 0.1, std::nullopt, 1}, io);
    });
    REQUIRE(r.code == exit_ok);
    CHECK(r.err.find("25 outside") != std::string::npos);
  }
  SUBCASE("a summary from a different model is rejected") {
    Json other = intercept_only_config("po.csv");
    other["datasets"][0]["predictor"] = Json::array({{{"intercept", "a0"}}});
    other["targets"][0]["ecological"] = Json::array({{{"intercept", "a0"}}});
    other["parameters"] = Json::object();
    const auto oc = s.write_json("other.json", other);
    const Run r = guarded([&](CommandIo io) {
      return cmd_predict({oc, s.dir / "fit.json", std::nullopt, s.dir / "g.csv", std::nullopt, std::nullopt, 1}, io);
    });
    CHECK(r.code == exit_data);
  }
}

TEST_CASE("predict command: bias terms on request") {
  Scratch s("bias");
  s.write("domain.geojson", kUnitSquare);
  s.write("effort.csv", "x,y,value\n0,0,-1\n1,0,1\n0,1,-1\n1,1,1\n0.5,0.5,0\n0.5,0,0\n0.5,1,0\n");
  s.write("po.csv", po_csv(60, 5));
  const Json ecological = po_terms();
  const Json thinning = Json::array({{{"thinning", "sampling"}, {"covariates", {"effort"}}}});
  Json predictor = ecological;
  predictor.push_back(thinning[0]);
  Json c = intercept_only_config("po.csv");
  c["covariates"] = Json::array({{{"name", "effort"}, {"file", "effort.csv"}}});
  c["datasets"][0]["predictor"] = predictor;
  c["parameters"]["thin.po.sampling.intercept"] = {{"fixed", true}};
  c["parameters"]["thin.po.sampling.effort"] = {{"init", 0.7}, {"fixed", true}};
  c["targets"][0]["bias"] = Json::array({{{"thinning", "sampling"}, {"dataset", "po"}, {"covariates", {"effort"}}}});
  const auto cfg = s.write_json("run.json", c);
  REQUIRE(guarded([&](CommandIo io) { return cmd_fit({cfg, std::nullopt, s.dir / "fit.json", 1}, io); }).code == exit_ok);

  const auto predict = [&](std::optional<bool> bias, const std::string& out) {
    return guarded([&](CommandIo io) {
      return cmd_predict({cfg, s.dir / "fit.json", std::nullopt, s.dir / out, 0.25, bias, 1}, io);
    });
  };
  REQUIRE(predict(false, "eco.csv").code == exit_ok);
  REQUIRE(predict(true, "full.csv").code == exit_ok);
  const auto mesh = obtain_mesh(load_config(cfg)).mesh;
  const auto effort = read_covariate_csv(*mesh, "effort", s.dir / "effort.csv");
  std::istringstream a(slurp(s.dir / "eco.csv")), b(slurp(s.dir / "full.csv"));
  std::string la, lb;
  std::getline(a, la);
  std::getline(b, lb);
  std::size_t rows = 0;
  double worst = 0.0;
  while (std::getline(a, la) && std::getline(b, lb)) {
    ++rows;
    double xa, ya, ma, sa, xb, yb, mb, sb;
    char comma;
    std::istringstream(la) >> xa >> comma >> ya >> comma >> ma >> comma >> sa;
    std::istringstream(lb) >> xb >> comma >> yb >> comma >> mb >> comma >> sb;
    CHECK(xa == xb);
    const std::span<const double> values(effort.values.data(), static_cast<std::size_t>(effort.values.size()));
    const double e = mesh->interpolate(values, Point2D{xa, ya});
    worst = std::max(worst, std::abs(mb - ma + std::log1p(std::exp(-0.7 * e))));
  }
  CHECK(rows == 16);
  CHECK(worst < 1e-7);
}

TEST_CASE("score") {
  const Json truth{{"seed", 1}, {"parameters", {{"alpha", 2.0}, {"beta", -1.0}}}, {"fields", Json::object()}};
  const auto summary = [](double a, double sa, double b, double sb) {
    return Json{{"converged", true},
                {"estimates",
                 {{"alpha", {{"estimate", a}, {"se", sa}, {"fixed", false}, {"used", true}}},
                  {"beta", {{"estimate", b}, {"se", sb}, {"fixed", false}, {"used", true}}}}}};
  };
  SUBCASE("estimate equal to truth") {
    const Json r = score_fit(truth, summary(2.0, 0.1, -1.0, 0.3));
    CHECK(r["parameters"]["alpha"]["bias"] == 0.0);
    CHECK(r["parameters"]["alpha"]["z"] == 0.0);
    CHECK(r["parameters"]["beta"]["covered"] == true);
  }
  SUBCASE("z scores and coverage") {
    const Json r = score_fit(truth, summary(2.5, 0.1, -1.3, 0.3));
    CHECK(r["parameters"]["alpha"]["z"].get<double>() == doctest::Approx(5.0));
    CHECK(r["parameters"]["alpha"]["covered"] == false);
    CHECK(r["parameters"]["beta"]["z"].get<double>() == doctest::Approx(-1.0));
    CHECK(r["parameters"]["beta"]["covered"] == true);
  }
  SUBCASE("missing truth key") {
    Json t = truth;
    t["parameters"].erase("beta");
    CHECK_THROWS_WITH_AS(score_fit(t, summary(2.0, 0.1, -1.0, 0.3)), doctest::Contains("'beta'"), DataError);
    Scratch s("score_missing");
    const auto tp = s.write_json("truth.json", t), fp = s.write_json("fit.json", summary(2.0, 0.1, -1.0, 0.3));
    const Run r = guarded([&](CommandIo io) { return cmd_score({tp, fp, std::nullopt, std::nullopt}, io); });
    CHECK(r.code == exit_data);
  }
  SUBCASE("replicate sweep") {
    Scratch s("score_sweep");
    const double alphas[] = {2.05, 1.6, 2.1, 1.98};
    for (int k = 0; k < 4; ++k) {
      const auto d = "rep_00" + std::to_string(k);
      s.write_json(d + "/truth.json", truth);
      s.write_json(d + "/fit.json", summary(alphas[k], 0.1, -1.0, 0.3));
    }
    const Json r = score_replicates(s.dir);
    CHECK(r["replicates"] == 4);
    const auto& a = r["parameters"]["alpha"];
    CHECK(a["coverage"].get<double>() == doctest::Approx(0.75));
    CHECK(a["coverage"].get<double>() >= 0.0);
    CHECK(a["coverage"].get<double>() <= 1.0);
    CHECK(a["mean_bias"].get<double>() == doctest::Approx((0.05 - 0.4 + 0.1 - 0.02) / 4));
    CHECK(r["parameters"]["beta"]["coverage"] == 1.0);
    CHECK_THROWS_AS(score_replicates(s.dir / "rep_000" / "nothing"), DataError);
  }
}

TEST_CASE("simulate, fit and score round trip") {
  Scratch s("roundtrip");
  s.write("domain.geojson", kUnitSquare);
  Json c = intercept_only_config("po.csv");
  c["simulate"] = {{"seed", 7},
                   {"replicates", 3},
                   {"truth", {{"alpha", 5.0}}},
                   {"datasets", Json::array({{{"name", "po"}, {"type", "presence_only"}, {"process", po_terms()}}})}};
  const auto cfg = s.write_json("run.json", c);
  REQUIRE(guarded([&](CommandIo io) { return cmd_simulate({cfg, s.dir / "reps", std::nullopt, 1}, io); }).code == exit_ok);
  for (const char* rep : {"rep_000", "rep_001", "rep_002"}) {
    const auto d = s.dir / "reps" / rep;
    REQUIRE(guarded([&](CommandIo io) { return cmd_fit({cfg, d, d / "fit.json", 1}, io); }).code == exit_ok);
    const std::size_t n = record_count(read_dataset(DatasetKind::presence_only, d / "po.csv"));
    CHECK(read_json(d / "fit.json")["estimates"]["alpha"]["estimate"].get<double>() ==
          doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-4));
  }
  const Run r = guarded([&](CommandIo io) {
    return cmd_score({std::nullopt, std::nullopt, s.dir / "reps", s.dir / "score.json"}, io);
  });
  REQUIRE(r.code == exit_ok);
  const Json score = read_json(s.dir / "score.json");
  CHECK(score["replicates"] == 3);
  CHECK(score["converged"] == 3);
  const double cov = score["parameters"]["alpha"]["coverage"].get<double>();
  CHECK(cov >= 0.0);
  CHECK(cov <= 1.0);
}

TEST_CASE("validate command") {
  Scratch s("validate");
  s.write("domain.geojson", kUnitSquare);
  s.write("po.csv", po_csv(10, 2));
  const auto cfg = s.write_json("run.json", intercept_only_config("po.csv"));
  const Run r = guarded([&](CommandIo io) { return cmd_validate({cfg, std::nullopt}, io); });
  CHECK(r.code == exit_ok);
  CHECK(r.out.rfind("ok: 1 datasets, 10 records", 0) == 0);
  const Run missing = guarded([&](CommandIo io) { return cmd_validate({s.dir / "nope.json", std::nullopt}, io); });
  CHECK(missing.code == exit_config);
}

TEST_CASE("unexpected failures map to the internal exit code") {
  std::ostringstream err;
  CHECK(run_guarded([]() -> int { throw std::logic_error("boom"); }, err) == exit_internal);
  CHECK(Json::parse(err.str())["error"]["message"] == "boom");
}
