#include "isdm/cli_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

namespace isdm {

namespace fs = std::filesystem;

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

std::string format_coordinate(double x) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

namespace {

// ---------------------------------------------------------------------------
// text helpers

std::string read_file(const fs::path& path, bool data) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    const std::string msg = "cannot read " + path.string();
    if (data) throw DataError(msg);
    throw ConfigError(msg);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json parse_json_text(const std::string& text, const fs::path& path, bool data) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    const std::string msg = path.string() + ": invalid JSON: " + e.what();
    if (data) throw DataError(msg);
    throw ConfigError(msg);
  }
}

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return std::string(s.substr(a, b - a));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;  // line number, cells
};

CsvTable read_csv(const fs::path& path) {
  std::istringstream in(read_file(path, true));
  CsvTable t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw DataError(path.string() + ": line " + std::to_string(line_no) + ": expected " +
                      std::to_string(t.header.size()) + " fields, found " + std::to_string(cells.size()));
    t.rows.emplace_back(line_no, std::move(cells));
  }
  if (t.header.empty()) throw DataError(path.string() + ": missing header row");
  return t;
}

/// Column positions by name; required columns must exist and nothing else may.
std::map<std::string, std::size_t> columns(const CsvTable& t, const fs::path& path, const std::vector<std::string>& required,
                                           const std::vector<std::string>& optional) {
  std::map<std::string, std::size_t> at;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    const auto& h = t.header[i];
    const bool known = std::find(required.begin(), required.end(), h) != required.end() ||
                       std::find(optional.begin(), optional.end(), h) != optional.end();
    if (!known) throw DataError(path.string() + ": unexpected column '" + h + "'");
    if (!at.emplace(h, i).second) throw DataError(path.string() + ": duplicate column '" + h + "'");
  }
  for (const auto& r : required)
    if (!at.contains(r)) throw DataError(path.string() + ": missing column '" + r + "'");
  return at;
}

double parse_double(const std::string& s, const fs::path& path, std::size_t line, const std::string& column) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (s.empty() || r.ec != std::errc() || r.ptr != end || !std::isfinite(v))
    throw DataError(path.string() + ": line " + std::to_string(line) + ": " + column + " '" + s + "' is not a finite number");
  return v;
}

std::int64_t parse_integer(const std::string& s, const fs::path& path, std::size_t line, const std::string& column) {
  std::int64_t v = 0;
  const char* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (s.empty() || r.ec != std::errc() || r.ptr != end)
    throw DataError(path.string() + ": line " + std::to_string(line) + ": " + column + " '" + s + "' is not an integer");
  return v;
}

// ---------------------------------------------------------------------------
// GeoJSON

Polygon ring_polygon(const Json& coords, const std::string& where) {
  if (!coords.is_array() || coords.empty()) throw DataError(where + ": polygon has no rings");
  if (coords.size() > 1) throw DataError(where + ": polygon holes are not supported");
  std::vector<Point2D> ring;
  for (const auto& c : coords[0]) {
    if (!c.is_array() || c.size() < 2 || !c[0].is_number() || !c[1].is_number())
      throw DataError(where + ": coordinates must be [x, y] number pairs");
    ring.push_back({c[0].get<double>(), c[1].get<double>()});
  }
  Polygon p = make_polygon(std::move(ring));
  try {
    validate_polygon(p);
  } catch (const GeometryError& e) {
    throw DataError(where + ": " + e.what());
  }
  return p;
}

void collect_polygons(const Json& g, const std::string& where, std::vector<Polygon>& out) {
  if (!g.is_object() || !g.contains("type") || !g["type"].is_string()) throw DataError(where + ": missing GeoJSON type");
  const auto type = g["type"].get<std::string>();
  if (type == "FeatureCollection") {
    if (!g.contains("features") || !g["features"].is_array()) throw DataError(where + ": features must be an array");
    for (std::size_t i = 0; i < g["features"].size(); ++i)
      collect_polygons(g["features"][i], where + ": feature " + std::to_string(i + 1), out);
  } else if (type == "Feature") {
    if (!g.contains("geometry")) throw DataError(where + ": feature without geometry");
    collect_polygons(g["geometry"], where, out);
  } else if (type == "Polygon") {
    out.push_back(ring_polygon(g.value("coordinates", Json()), where));
  } else if (type == "MultiPolygon") {
    for (const auto& part : g.value("coordinates", Json::array())) out.push_back(ring_polygon(part, where));
  } else {
    throw DataError(where + ": unsupported geometry type '" + type + "'");
  }
}

Json polygon_json(const Polygon& p) {
  Json ring = Json::array();
  for (const auto& v : p.ring) ring.push_back({v.x, v.y});
  ring.push_back({p.ring.front().x, p.ring.front().y});
  return Json{{"type", "Polygon"}, {"coordinates", Json::array({ring})}};
}

// ---------------------------------------------------------------------------
// schema checks

[[noreturn]] void config_fail(const std::string& where, const std::string& what) { throw ConfigError(where + ": " + what); }

void expect_object(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) config_fail(where, "expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) config_fail(where, "unknown key '" + key + "'");
  }
}

const Json& member(const Json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) config_fail(where, std::string("missing key '") + key + "'");
  return j[key];
}

std::string as_string(const Json& j, const std::string& where) {
  if (!j.is_string()) config_fail(where, "expected a string");
  return j.get<std::string>();
}

double as_number(const Json& j, const std::string& where) {
  if (!j.is_number() || !std::isfinite(j.get<double>())) config_fail(where, "expected a finite number");
  return j.get<double>();
}

bool as_bool(const Json& j, const std::string& where) {
  if (!j.is_boolean()) config_fail(where, "expected true or false");
  return j.get<bool>();
}

std::int64_t as_integer(const Json& j, const std::string& where) {
  if (!j.is_number_integer()) config_fail(where, "expected an integer");
  return j.get<std::int64_t>();
}

std::uint64_t as_unsigned(const Json& j, const std::string& where) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
    config_fail(where, "expected a nonnegative integer");
  return j.get<std::uint64_t>();
}

template <class F>
void each(const Json& j, const std::string& where, F&& f) {
  if (!j.is_array()) config_fail(where, "expected an array");
  for (std::size_t i = 0; i < j.size(); ++i) f(j[i], where + "[" + std::to_string(i) + "]");
}

void check_terms(const Json& terms, const std::string& where, bool allow_thinning) {
  each(terms, where, [&](const Json& t, const std::string& w) {
    if (!t.is_object()) config_fail(w, "expected a term object");
    if (t.contains("intercept")) {
      expect_object(t, w, {"intercept"});
      as_string(t["intercept"], w + ".intercept");
    } else if (t.contains("covariate")) {
      expect_object(t, w, {"covariate", "coefficient"});
      as_string(t["covariate"], w + ".covariate");
      as_string(member(t, "coefficient", w), w + ".coefficient");
    } else if (t.contains("field")) {
      expect_object(t, w, {"field"});
      as_string(t["field"], w + ".field");
    } else if (t.contains("range")) {
      expect_object(t, w, {"range"});
      as_string(t["range"], w + ".range");
    } else if (t.contains("thinning")) {
      expect_object(t, w, {"thinning", "dataset", "covariates"});
      if (t.contains("dataset")) as_string(t["dataset"], w + ".dataset");
      else if (!allow_thinning) config_fail(w, "thinning terms outside a dataset must name their dataset");
      const auto kind = as_string(t["thinning"], w + ".thinning");
      if (kind != "sampling" && kind != "detection" && kind != "reporting")
        config_fail(w + ".thinning", "expected sampling, detection or reporting");
      if (t.contains("covariates"))
        each(t["covariates"], w + ".covariates", [](const Json& c, const std::string& cw) { as_string(c, cw); });
    } else {
      config_fail(w, "term needs one of intercept, covariate, field, range, thinning");
    }
  });
}

void check_dataset_block(const Json& d, const std::string& w, bool simulation) {
  if (simulation)
    expect_object(d, w, {"name", "type", "design", "process", "thinning", "noise_sd", "duration_offset"});
  else
    expect_object(d, w,
                  {"name", "type", "file", "predictor", "duration_offset", "overdispersion", "po_data_weight",
                   "small_region_factor"});
  as_string(member(d, "name", w), w + ".name");
  const auto type = as_string(member(d, "type", w), w + ".type");
  try {
    parse_dataset_kind(type);
  } catch (const ConfigError& e) {
    config_fail(w + ".type", e.what());
  }
  if (simulation) {
    if (d.contains("design")) as_string(d["design"], w + ".design");
    else if (type != "presence_only") config_fail(w, "missing key 'design'");
    check_terms(member(d, "process", w), w + ".process", false);
    if (d.contains("thinning")) check_terms(d["thinning"], w + ".thinning", true);
    if (d.contains("noise_sd") && !(as_number(d["noise_sd"], w + ".noise_sd") >= 0.0))
      config_fail(w + ".noise_sd", "must be nonnegative");
  } else {
    as_string(member(d, "file", w), w + ".file");
    check_terms(member(d, "predictor", w), w + ".predictor", true);
    if (d.contains("overdispersion")) as_bool(d["overdispersion"], w + ".overdispersion");
    if (d.contains("po_data_weight") && !(as_number(d["po_data_weight"], w + ".po_data_weight") >= 0.0))
      config_fail(w + ".po_data_weight", "must be nonnegative");
    if (d.contains("small_region_factor") && !(as_number(d["small_region_factor"], w + ".small_region_factor") > 0.0))
      config_fail(w + ".small_region_factor", "must be positive");
  }
  if (d.contains("duration_offset")) as_bool(d["duration_offset"], w + ".duration_offset");
}

void check_config(const Json& j) {
  const std::string top = "config";
  expect_object(j, top,
                {"domain", "representation", "dense_limit", "covariates", "range_maps", "fields", "parameters", "datasets",
                 "targets", "fit", "predict", "simulate"});
  const auto& dom = member(j, "domain", top);
  expect_object(dom, "domain", {"file", "max_edge", "cache"});
  as_string(member(dom, "file", "domain"), "domain.file");
  if (!(as_number(member(dom, "max_edge", "domain"), "domain.max_edge") > 0.0))
    config_fail("domain.max_edge", "must be positive");
  if (dom.contains("cache")) as_string(dom["cache"], "domain.cache");
  if (j.contains("representation")) {
    const auto r = as_string(j["representation"], "representation");
    if (r != "sparse" && r != "dense") config_fail("representation", "expected sparse or dense");
  }
  if (j.contains("dense_limit") && as_integer(j["dense_limit"], "dense_limit") < 1) config_fail("dense_limit", "must be positive");
  if (j.contains("covariates"))
    each(j["covariates"], "covariates", [](const Json& c, const std::string& w) {
      expect_object(c, w, {"name", "file"});
      as_string(member(c, "name", w), w + ".name");
      as_string(member(c, "file", w), w + ".file");
    });
  if (j.contains("range_maps"))
    each(j["range_maps"], "range_maps", [](const Json& c, const std::string& w) {
      expect_object(c, w, {"name", "file"});
      as_string(member(c, "name", w), w + ".name");
      as_string(member(c, "file", w), w + ".file");
    });
  if (j.contains("fields"))
    each(j["fields"], "fields", [](const Json& f, const std::string& w) {
      expect_object(f, w, {"name", "bias", "zero_integral"});
      as_string(member(f, "name", w), w + ".name");
      if (f.contains("bias")) as_bool(f["bias"], w + ".bias");
      if (f.contains("zero_integral")) as_bool(f["zero_integral"], w + ".zero_integral");
    });
  if (j.contains("parameters")) {
    const auto& ps = j["parameters"];
    if (!ps.is_object()) config_fail("parameters", "expected an object keyed by parameter name");
    for (const auto& [name, p] : ps.items()) {
      const std::string w = "parameters." + name;
      expect_object(p, w, {"init", "prior", "fixed"});
      if (p.contains("init")) as_number(p["init"], w + ".init");
      if (p.contains("fixed")) as_bool(p["fixed"], w + ".fixed");
      if (p.contains("prior") && !p["prior"].is_null()) {
        expect_object(p["prior"], w + ".prior", {"mean", "sd"});
        as_number(member(p["prior"], "mean", w + ".prior"), w + ".prior.mean");
        if (!(as_number(member(p["prior"], "sd", w + ".prior"), w + ".prior.sd") > 0.0))
          config_fail(w + ".prior.sd", "must be positive");
      }
    }
  }
  if (j.contains("datasets"))
    each(j["datasets"], "datasets", [](const Json& d, const std::string& w) { check_dataset_block(d, w, false); });
  if (j.contains("targets"))
    each(j["targets"], "targets", [](const Json& t, const std::string& w) {
      expect_object(t, w, {"name", "ecological", "bias"});
      as_string(member(t, "name", w), w + ".name");
      check_terms(member(t, "ecological", w), w + ".ecological", false);
      if (t.contains("bias")) check_terms(t["bias"], w + ".bias", false);
    });
  if (j.contains("fit")) {
    const auto& f = j["fit"];
    expect_object(f, "fit",
                  {"mode", "max_iterations", "tolerance", "memory", "newton_polish_limit", "inner_max_iterations",
                   "outer_step", "laplace_vertex_threshold", "standard_errors"});
    if (f.contains("mode")) {
      try {
        parse_fit_mode(as_string(f["mode"], "fit.mode"));
      } catch (const SpecificationError& e) {
        config_fail("fit.mode", e.what());
      }
    }
    for (const char* k : {"max_iterations", "memory", "inner_max_iterations"})
      if (f.contains(k) && as_integer(f[k], std::string("fit.") + k) < 1) config_fail(std::string("fit.") + k, "must be positive");
    for (const char* k : {"newton_polish_limit", "laplace_vertex_threshold"})
      if (f.contains(k)) as_unsigned(f[k], std::string("fit.") + k);
    for (const char* k : {"tolerance", "outer_step"})
      if (f.contains(k) && !(as_number(f[k], std::string("fit.") + k) > 0.0)) config_fail(std::string("fit.") + k, "must be positive");
    if (f.contains("standard_errors")) as_bool(f["standard_errors"], "fit.standard_errors");
  }
  if (j.contains("predict")) {
    const auto& p = j["predict"];
    expect_object(p, "predict", {"resolution", "include_bias", "targets"});
    if (p.contains("resolution") && !(as_number(p["resolution"], "predict.resolution") > 0.0))
      config_fail("predict.resolution", "must be positive");
    if (p.contains("include_bias")) as_bool(p["include_bias"], "predict.include_bias");
    if (p.contains("targets"))
      each(p["targets"], "predict.targets", [](const Json& t, const std::string& w) { as_string(t, w); });
  }
  if (j.contains("simulate")) {
    const auto& s = j["simulate"];
    expect_object(s, "simulate", {"seed", "replicates", "safety_factor", "representation", "truth", "fields", "datasets"});
    as_unsigned(member(s, "seed", "simulate"), "simulate.seed");
    if (s.contains("replicates") && as_unsigned(s["replicates"], "simulate.replicates") < 1)
      config_fail("simulate.replicates", "must be at least 1");
    if (s.contains("safety_factor") && !(as_number(s["safety_factor"], "simulate.safety_factor") >= 1.0))
      config_fail("simulate.safety_factor", "must be at least 1");
    if (s.contains("representation")) {
      const auto r = as_string(s["representation"], "simulate.representation");
      if (r != "sparse" && r != "dense") config_fail("simulate.representation", "expected sparse or dense");
    }
    if (s.contains("truth")) {
      if (!s["truth"].is_object()) config_fail("simulate.truth", "expected an object keyed by parameter name");
      for (const auto& [name, v] : s["truth"].items()) as_number(v, "simulate.truth." + name);
    }
    if (s.contains("fields")) {
      if (!s["fields"].is_object()) config_fail("simulate.fields", "expected an object keyed by field name");
      for (const auto& [name, f] : s["fields"].items()) {
        const std::string w = "simulate.fields." + name;
        expect_object(f, w, {"range", "sd"});
        if (!(as_number(member(f, "range", w), w + ".range") > 0.0)) config_fail(w + ".range", "must be positive");
        if (!(as_number(member(f, "sd", w), w + ".sd") > 0.0)) config_fail(w + ".sd", "must be positive");
      }
    }
    each(member(s, "datasets", "simulate"), "simulate.datasets",
         [](const Json& d, const std::string& w) { check_dataset_block(d, w, true); });
  }
}

FieldRepresentation parse_representation(const std::string& s) {
  return s == "dense" ? FieldRepresentation::dense_covariance : FieldRepresentation::sparse_precision;
}

ThinningKind parse_thinning(const std::string& s) {
  if (s == "detection") return ThinningKind::detection;
  if (s == "reporting") return ThinningKind::reporting;
  return ThinningKind::sampling;
}

LinearPredictor parse_terms(const Json& terms, ModelBuilder& b, const std::string& dataset) {
  LinearPredictor lp;
  for (const auto& t : terms) {
    if (t.contains("intercept")) {
      lp.terms.push_back(b.intercept(t["intercept"].get<std::string>()));
    } else if (t.contains("covariate")) {
      lp.terms.push_back(b.covariate(t["covariate"].get<std::string>(), t["coefficient"].get<std::string>()));
    } else if (t.contains("field")) {
      lp.terms.push_back(b.field(t["field"].get<std::string>()));
    } else if (t.contains("range")) {
      lp.terms.push_back(b.range(t["range"].get<std::string>()));
    } else {
      std::vector<std::string> covs;
      if (t.contains("covariates"))
        for (const auto& c : t["covariates"]) covs.push_back(c.get<std::string>());
      lp.terms.push_back(b.thinning(parse_thinning(t["thinning"].get<std::string>()),
                                    t.contains("dataset") ? t["dataset"].get<std::string>() : dataset, covs));
    }
  }
  return lp;
}

/// Mesh-independent model parts shared by fitting and simulation.
void add_common(const RunConfig& c, ModelBuilder& b, FieldRepresentation representation) {
  const auto& j = c.raw;
  b.set_representation(representation, j.contains("dense_limit") ? j["dense_limit"].get<std::size_t>() : kDefaultDenseLimit);
  for (const auto& cov : j.value("covariates", Json::array()))
    b.add_covariate(read_covariate_csv(b.mesh(), cov["name"].get<std::string>(), c.resolve(cov["file"].get<std::string>())));
  for (const auto& r : j.value("range_maps", Json::array()))
    b.add_range_map(r["name"].get<std::string>(), read_polygons_geojson(c.resolve(r["file"].get<std::string>())));
  for (const auto& f : j.value("fields", Json::array())) {
    const auto name = f["name"].get<std::string>();
    b.add_field(name, f.value("bias", false));
    b.set_zero_integral(name, f.value("zero_integral", false));
  }
}

void apply_parameter_overrides(const Json& j, ModelBuilder& b) {
  const Json params = j.value("parameters", Json::object());
  for (const auto& [name, p] : params.items()) {
    if (!b.has_parameter(name)) throw ConfigError("parameters." + name + ": no such parameter in the model");
    if (p.contains("init")) b.set_init(name, p["init"].get<double>());
    if (p.contains("prior")) {
      if (p["prior"].is_null()) b.set_prior(name, std::nullopt);
      else b.set_prior(name, NormalPrior{p["prior"]["mean"].get<double>(), p["prior"]["sd"].get<double>()});
    }
    if (p.value("fixed", false)) b.fix(name);
  }
}

void apply_dataset_flags(const Json& d, Dataset& data) {
  if (auto* c = std::get_if<CountDataset>(&data)) {
    c->duration_offset = d.value("duration_offset", true);
    c->overdispersion = d.value("overdispersion", false);
  }
}

bool is_latent(ParameterBlock b) { return b == ParameterBlock::field_latent || b == ParameterBlock::noise_latent; }

Json nullable(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

}  // namespace

// ---------------------------------------------------------------------------
// file formats

Polygon read_domain_geojson(const fs::path& path) {
  const auto polys = read_polygons_geojson(path);
  if (polys.size() != 1)
    throw DataError(path.string() + ": domain must contain exactly one polygon, found " + std::to_string(polys.size()));
  return polys.front();
}

std::vector<Polygon> read_polygons_geojson(const fs::path& path) {
  std::vector<Polygon> out;
  collect_polygons(parse_json_text(read_file(path, true), path, true), path.string(), out);
  return out;
}

DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "count") return DatasetKind::count;
  if (s == "occupancy") return DatasetKind::occupancy;
  if (s == "presence_only") return DatasetKind::presence_only;
  if (s == "regional") return DatasetKind::regional;
  throw ConfigError("unknown dataset type '" + s + "' (expected count, occupancy, presence_only or regional)");
}

const char* to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::count: return "count";
    case DatasetKind::occupancy: return "occupancy";
    case DatasetKind::presence_only: return "presence_only";
    case DatasetKind::regional: return "regional";
  }
  return "?";
}

std::string dataset_extension(DatasetKind kind) { return kind == DatasetKind::regional ? ".geojson" : ".csv"; }

Dataset read_dataset(DatasetKind kind, const fs::path& path, bool design) {
  if (kind == DatasetKind::regional) {
    const Json j = parse_json_text(read_file(path, true), path, true);
    if (j.value("type", "") != "FeatureCollection" || !j.contains("features") || !j["features"].is_array())
      throw DataError(path.string() + ": regional lists must be a GeoJSON FeatureCollection");
    RegionalListDataset ds;
    for (std::size_t i = 0; i < j["features"].size(); ++i) {
      const auto& f = j["features"][i];
      const std::string where = path.string() + ": feature " + std::to_string(i + 1);
      std::vector<Polygon> polys;
      collect_polygons(f, where, polys);
      if (polys.size() != 1) throw DataError(where + ": expected one polygon per feature");
      bool present = false;
      const Json props = f.value("properties", Json::object());
      if (props.is_object() && props.contains("present")) {
        if (!props["present"].is_boolean()) throw DataError(where + ": property 'present' must be true or false");
        present = props["present"].get<bool>();
      } else if (!design) {
        throw DataError(where + ": missing boolean property 'present'");
      }
      ds.records.push_back({polys.front(), present});
    }
    return ds;
  }

  const CsvTable t = read_csv(path);
  const auto point = [&](const std::vector<std::string>& row, std::size_t line, const std::map<std::string, std::size_t>& at) {
    return Point2D{parse_double(row[at.at("x")], path, line, "x"), parse_double(row[at.at("y")], path, line, "y")};
  };
  const auto fail = [&](std::size_t line, const std::string& what) {
    throw DataError(path.string() + ": line " + std::to_string(line) + ": " + what);
  };
  switch (kind) {
    case DatasetKind::count: {
      const auto at = design ? columns(t, path, {"x", "y"}, {"count", "duration"})
                             : columns(t, path, {"x", "y", "count"}, {"duration"});
      CountDataset ds;
      for (const auto& [line, row] : t.rows) {
        CountRecord r;
        r.site = point(row, line, at);
        if (at.contains("count")) {
          r.count = parse_integer(row[at.at("count")], path, line, "count");
          if (r.count < 0) fail(line, "count must be nonnegative");
        }
        if (at.contains("duration") && !row[at.at("duration")].empty()) {
          r.duration = parse_double(row[at.at("duration")], path, line, "duration");
          if (!(*r.duration > 0.0)) fail(line, "duration must be positive");
        }
        ds.records.push_back(r);
      }
      return ds;
    }
    case DatasetKind::occupancy: {
      const auto at = design ? columns(t, path, {"x", "y", "visits"}, {"detections"})
                             : columns(t, path, {"x", "y", "visits", "detections"}, {});
      OccupancyDataset ds;
      for (const auto& [line, row] : t.rows) {
        OccupancyRecord r;
        r.site = point(row, line, at);
        const auto visits = parse_integer(row[at.at("visits")], path, line, "visits");
        if (visits < 1 || visits > 1000000) fail(line, "visits must be between 1 and 1000000");
        r.visits = static_cast<int>(visits);
        if (at.contains("detections")) {
          const auto n = parse_integer(row[at.at("detections")], path, line, "detections");
          if (n < 0 || n > visits) fail(line, "detections must lie in [0, visits]");
          r.detections = static_cast<int>(n);
        }
        ds.records.push_back(r);
      }
      return ds;
    }
    default: {
      const auto at = columns(t, path, {"x", "y"}, {});
      PresenceOnlyDataset ds;
      for (const auto& [line, row] : t.rows) ds.points.push_back(point(row, line, at));
      return ds;
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_dataset(const Dataset& ds, const fs::path& path) {
  std::ostringstream out;
  std::visit(
      [&](const auto& d) {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, CountDataset>) {
          bool durations = false;
          for (const auto& r : d.records) durations = durations || r.duration.has_value();
          out << (durations ? "x,y,count,duration\n" : "x,y,count\n");
          for (const auto& r : d.records) {
            out << format_coordinate(r.site.x) << ',' << format_coordinate(r.site.y) << ',' << r.count;
            if (durations) out << ',' << (r.duration ? format_coordinate(*r.duration) : "");
            out << '\n';
          }
        } else if constexpr (std::is_same_v<T, OccupancyDataset>) {
          out << "x,y,visits,detections\n";
          for (const auto& r : d.records)
            out << format_coordinate(r.site.x) << ',' << format_coordinate(r.site.y) << ',' << r.visits << ','
                << r.detections << '\n';
        } else if constexpr (std::is_same_v<T, PresenceOnlyDataset>) {
          out << "x,y\n";
          for (const auto& p : d.points) out << format_coordinate(p.x) << ',' << format_coordinate(p.y) << '\n';
        } else {
          Json fc{{"type", "FeatureCollection"}, {"features", Json::array()}};
          for (const auto& r : d.records)
            fc["features"].push_back(
                Json{{"type", "Feature"}, {"properties", {{"present", r.present}}}, {"geometry", polygon_json(r.region)}});
          out << fc.dump(1) << '\n';
        }
      },
      ds);
  write_text(path, out.str());
}

CovariateField read_covariate_csv(const TriangulatedDomain& mesh, const std::string& name, const fs::path& path) {
  const CsvTable t = read_csv(path);
  const auto at = columns(t, path, {"x", "y", "value"}, {});
  if (t.rows.empty()) throw DataError(path.string() + ": covariate file has no rows");
  std::vector<Point2D> pts;
  std::vector<double> vals;
  for (const auto& [line, row] : t.rows) {
    pts.push_back({parse_double(row[at.at("x")], path, line, "x"), parse_double(row[at.at("y")], path, line, "y")});
    vals.push_back(parse_double(row[at.at("value")], path, line, "value"));
  }
  return project_covariate(mesh, name, pts, vals);
}

// ---------------------------------------------------------------------------
// mesh artifact

std::string mesh_cache_key(const Polygon& boundary, double max_edge) {
  std::string text = "isdm-mesh/1;" + format_coordinate(max_edge);
  for (const auto& p : boundary.ring) text += ";" + format_coordinate(p.x) + "," + format_coordinate(p.y);
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Json mesh_to_json(const TriangulatedDomain& mesh, const std::string& key) {
  Json boundary = Json::array(), vertices = Json::array(), triangles = Json::array();
  for (const auto& p : mesh.boundary().ring) boundary.push_back({p.x, p.y});
  for (const auto& p : mesh.vertices()) vertices.push_back({p.x, p.y});
  for (const auto& t : mesh.triangles()) triangles.push_back({t[0], t[1], t[2]});
  return Json{{"format", "isdm-mesh"}, {"version", 1},          {"key", key},
              {"max_edge", mesh.max_edge()}, {"boundary", boundary}, {"vertices", vertices},
              {"triangles", triangles}};
}

TriangulatedDomain mesh_from_json(const Json& j) {
  try {
    if (j.at("format") != "isdm-mesh" || j.at("version") != 1) throw DataError("not an isdm mesh file");
    std::vector<Point2D> boundary, vertices;
    for (const auto& p : j.at("boundary")) boundary.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    for (const auto& p : j.at("vertices")) vertices.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    std::vector<Triangle> triangles;
    for (const auto& t : j.at("triangles"))
      triangles.push_back({t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>(), t.at(2).get<std::size_t>()});
    return TriangulatedDomain(std::move(vertices), std::move(triangles), Polygon{std::move(boundary)},
                              j.at("max_edge").get<double>());
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed mesh file: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// configuration

fs::path RunConfig::resolve(const std::string& p) const {
  const fs::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

fs::path RunConfig::resolve_data(const std::string& p) const {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  return data_dir ? *data_dir / path : base_dir / path;
}

RunConfig parse_config(const Json& j, const fs::path& base_dir) {
  check_config(j);
  return RunConfig{j, base_dir, std::nullopt};
}

RunConfig load_config(const fs::path& path) {
  return parse_config(parse_json_text(read_file(path, false), path, false), path.parent_path());
}

MeshArtifact obtain_mesh(const RunConfig& config) {
  const auto& dom = config.raw["domain"];
  MeshArtifact a;
  const Polygon boundary = read_domain_geojson(config.resolve(dom["file"].get<std::string>()));
  const double max_edge = dom["max_edge"].get<double>();
  a.polygon_area = area(boundary);
  const std::string key = mesh_cache_key(boundary, max_edge);
  if (dom.contains("cache")) a.cache = config.resolve(dom["cache"].get<std::string>());
  if (a.cache && fs::exists(*a.cache)) {
    const Json j = parse_json_text(read_file(*a.cache, true), *a.cache, true);
    if (j.is_object() && j.value("key", "") == key) {
      a.mesh = std::make_shared<const TriangulatedDomain>(mesh_from_json(j));
      a.cache_hit = true;
      return a;
    }
  }
  a.mesh = std::make_shared<const TriangulatedDomain>(build_mesh(boundary, max_edge));
  if (a.cache) write_text(*a.cache, mesh_to_json(*a.mesh, key).dump() + "\n");
  return a;
}

ModelSpec build_model(const RunConfig& config, std::shared_ptr<const TriangulatedDomain> mesh,
                      std::vector<std::string>* flags) {
  const auto& j = config.raw;
  ModelBuilder b(mesh);
  add_common(config, b, parse_representation(j.value("representation", "sparse")));
  if (!j.contains("datasets") || j["datasets"].empty()) throw ConfigError("datasets: at least one dataset is required");

  std::set<std::string> initialised;
  std::size_t records = 0;
  for (const auto& d : j["datasets"]) {
    const auto name = d["name"].get<std::string>();
    const auto kind = parse_dataset_kind(d["type"].get<std::string>());
    Dataset data = read_dataset(kind, config.resolve_data(d["file"].get<std::string>()));
    apply_dataset_flags(d, data);
    const std::size_t n = record_count(data);
    records += n;
    if (n == 0 && flags) flags->push_back("dataset '" + name + "' has no records");
    LinearPredictor lp = parse_terms(d["predictor"], b, name);
    // start value from the first intercept of each dataset, unless an earlier dataset set it
    std::optional<std::string> intercept;
    for (const auto& t : d["predictor"])
      if (t.contains("intercept")) {
        intercept = t["intercept"].get<std::string>();
        break;
      }
    if (intercept && initialised.insert(*intercept).second)
      b.set_init(*intercept, default_intercept(data, mesh->area()));
    ModelBuilder::DatasetOptions opt;
    opt.po_data_weight = d.value("po_data_weight", 0.0);
    opt.small_region_factor = d.value("small_region_factor", 3.0);
    b.add_dataset(name, std::move(data), std::move(lp), opt);
  }
  if (records == 0 && flags) flags->push_back("prior-only fit: no dataset has records");
  for (const auto& t : j.value("targets", Json::array()))
    b.add_target(t["name"].get<std::string>(), parse_terms(t["ecological"], b, ""),
                 t.contains("bias") ? parse_terms(t["bias"], b, "") : LinearPredictor{});
  apply_parameter_overrides(j, b);
  return b.build();
}

FitOptions fit_options(const RunConfig& config) {
  FitOptions o;
  const Json f = config.raw.value("fit", Json::object());
  if (f.contains("mode")) o.mode = parse_fit_mode(f["mode"].get<std::string>());
  o.max_iterations = f.value("max_iterations", o.max_iterations);
  o.tolerance = f.value("tolerance", o.tolerance);
  o.memory = f.value("memory", o.memory);
  o.newton_polish_limit = f.value("newton_polish_limit", o.newton_polish_limit);
  o.inner_max_iterations = f.value("inner_max_iterations", o.inner_max_iterations);
  o.outer_step = f.value("outer_step", o.outer_step);
  o.laplace_vertex_threshold = f.value("laplace_vertex_threshold", o.laplace_vertex_threshold);
  o.standard_errors = f.value("standard_errors", o.standard_errors);
  return o;
}

PredictOptions predict_options(const RunConfig& config) {
  PredictOptions o;
  const Json p = config.raw.value("predict", Json::object());
  o.resolution = p.value("resolution", o.resolution);
  o.include_bias = p.value("include_bias", o.include_bias);
  for (const auto& t : p.value("targets", Json::array())) o.targets.push_back(t.get<std::string>());
  return o;
}

std::size_t simulation_replicates(const RunConfig& config) {
  if (!config.raw.contains("simulate")) throw ConfigError("simulate: section missing");
  return config.raw["simulate"].value("replicates", std::size_t{1});
}

SimulationConfig simulation_config(const RunConfig& config, std::shared_ptr<const TriangulatedDomain> mesh) {
  const auto& j = config.raw;
  if (!j.contains("simulate")) throw ConfigError("simulate: section missing");
  const auto& s = j["simulate"];
  ModelBuilder b(mesh);
  add_common(config, b,
             parse_representation(s.value("representation", j.value("representation", std::string("sparse")))));
  for (const auto& d : s["datasets"]) {
    const auto name = d["name"].get<std::string>();
    const auto kind = parse_dataset_kind(d["type"].get<std::string>());
    Dataset design = d.contains("design") ? read_dataset(kind, config.resolve(d["design"].get<std::string>()), true)
                                          : Dataset{PresenceOnlyDataset{}};
    if (kind == DatasetKind::presence_only && d.contains("design"))
      throw ConfigError("simulate.datasets: presence-only data takes no design file");
    if (auto* c = std::get_if<CountDataset>(&design)) c->duration_offset = d.value("duration_offset", true);
    LinearPredictor process = parse_terms(d["process"], b, name);
    LinearPredictor thinning = d.contains("thinning") ? parse_terms(d["thinning"], b, name) : LinearPredictor{};
    LinearPredictor joint = process;
    joint.terms.insert(joint.terms.end(), thinning.terms.begin(), thinning.terms.end());
    b.add_dataset(name, design, joint);
    // targets are remapped with the parameters, which is all we need here
    b.add_target(name, std::move(process), std::move(thinning));
  }
  apply_parameter_overrides(j, b);
  ModelSpec spec = b.build();

  SimulationConfig out;
  out.truth = spec.initial();
  const Json truth = s.value("truth", Json::object()), field_truth = s.value("fields", Json::object());
  for (const auto& [name, v] : truth.items()) {
    const auto i = spec.find(name);
    if (!i) throw ConfigError("simulate.truth." + name + ": no such parameter in the simulation model");
    out.truth[static_cast<Eigen::Index>(*i)] = v.get<double>();
  }
  for (const auto& [name, f] : field_truth.items()) {
    if (!spec.find("log_kappa." + name)) throw ConfigError("simulate.fields." + name + ": no such field");
    const double kappa = kappa_for_range(f["range"].get<double>());
    const double sd = f["sd"].get<double>();
    out.truth[static_cast<Eigen::Index>(spec.index("log_kappa." + name))] = std::log(kappa);
    out.truth[static_cast<Eigen::Index>(spec.index("log_tau." + name))] = log_tau_from_variance(sd * sd, kappa);
  }
  const auto& ds = s["datasets"];
  for (std::size_t k = 0; k < spec.datasets.size(); ++k) {
    SimulationDataset sd;
    sd.name = spec.datasets[k].name;
    sd.design = spec.datasets[k].data;
    sd.process = spec.targets[k].ecological;
    sd.thinning = spec.targets[k].bias;
    if (ds[k].contains("noise_sd")) sd.noise_sd = ds[k]["noise_sd"].get<double>();
    out.datasets.push_back(std::move(sd));
  }
  spec.targets.clear();
  out.model = std::move(spec);
  out.seed = s["seed"].get<std::uint64_t>();
  out.safety_factor = s.value("safety_factor", 1.2);
  return out;
}

// ---------------------------------------------------------------------------
// results

Json fit_summary(const JointObjective& objective, const FitResult& fit, const std::vector<std::string>& flags) {
  const auto& spec = objective.spec();
  Json estimates = Json::object();
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& p = spec.parameters[i];
    if (is_latent(p.block)) continue;
    Json se = nullptr;
    if (fit.standard_errors.size() == spec.size() && fit.standard_errors[i]) se = *fit.standard_errors[i];
    estimates[p.name] = Json{{"estimate", fit.optimum[static_cast<Eigen::Index>(i)]},
                             {"se", se},
                             {"block", to_string(p.block)},
                             {"fixed", p.fixed},
                             {"used", p.used}};
  }
  const auto parts = objective.decompose(fit.optimum);
  Json datasets = Json::object(), fields = Json::object();
  for (const auto& [name, v] : parts.datasets) datasets[name] = nullable(v);
  for (const auto& [name, v] : parts.fields) fields[name] = nullable(v);

  Json names = Json::array(), values = Json::array();
  for (std::size_t i = 0; i < spec.size(); ++i) {
    names.push_back(spec.parameters[i].name);
    values.push_back(fit.optimum[static_cast<Eigen::Index>(i)]);
  }
  Json cov_names = Json::array(), cov = Json::array();
  for (auto i : fit.covariance_index) cov_names.push_back(spec.parameters[i].name);
  for (Eigen::Index r = 0; r < fit.covariance.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < fit.covariance.cols(); ++c) row.push_back(fit.covariance(r, c));
    cov.push_back(row);
  }
  Json all_flags = Json::array();
  for (const auto& f : flags) all_flags.push_back(f);
  if (!fit.converged) all_flags.push_back("not converged");
  if (!fit.curvature_ok && !fit.curvature_diagnostic.empty()) all_flags.push_back(fit.curvature_diagnostic);

  return Json{{"format", "isdm-fit"},
              {"version", 1},
              {"converged", fit.converged},
              {"mode", to_string(fit.mode)},
              {"neg_log_posterior", nullable(fit.neg_log_posterior)},
              {"objective", nullable(fit.objective)},
              {"gradient_norm", nullable(fit.gradient_norm)},
              {"iterations", fit.iterations},
              {"line_search_failures", fit.line_search_failures},
              {"diagnostic", fit.diagnostic},
              {"curvature_ok", fit.curvature_ok},
              {"clamp_events", objective.clamp_events()},
              {"flags", all_flags},
              {"estimates", estimates},
              {"decomposition", {{"datasets", datasets}, {"fields", fields}, {"priors", nullable(parts.priors)}}},
              {"optimum", {{"names", names}, {"values", values}}},
              {"covariance", {{"names", cov_names}, {"matrix", cov}}}};
}

FitResult fit_from_summary(const ModelSpec& spec, const Json& summary) {
  try {
    if (summary.at("format") != "isdm-fit") throw DataError("not an isdm fit summary");
    FitResult fit;
    const auto& names = summary.at("optimum").at("names");
    const auto& values = summary.at("optimum").at("values");
    if (names.size() != values.size()) throw DataError("fit summary optimum names and values differ in length");
    std::map<std::string, double> named;
    for (std::size_t i = 0; i < names.size(); ++i) named[names[i].get<std::string>()] = values[i].get<double>();
    try {
      fit.optimum = unflatten_names(spec, named);
    } catch (const SpecificationError& e) {
      throw DataError(std::string("fit summary does not match the model: ") + e.what());
    }
    fit.converged = summary.at("converged").get<bool>();
    fit.mode = parse_fit_mode(summary.at("mode").get<std::string>());
    fit.curvature_ok = summary.at("curvature_ok").get<bool>();
    fit.neg_log_posterior = summary.at("neg_log_posterior").is_null() ? NAN : summary.at("neg_log_posterior").get<double>();
    fit.standard_errors.assign(spec.size(), std::nullopt);
    for (const auto& [name, e] : summary.at("estimates").items())
      if (auto i = spec.find(name); i && !e.at("se").is_null()) fit.standard_errors[*i] = e.at("se").get<double>();
    const auto& cn = summary.at("covariance").at("names");
    const auto& cm = summary.at("covariance").at("matrix");
    fit.covariance.resize(static_cast<Eigen::Index>(cn.size()), static_cast<Eigen::Index>(cn.size()));
    if (cm.size() != cn.size()) throw DataError("fit summary covariance has the wrong shape");
    for (std::size_t r = 0; r < cn.size(); ++r) {
      fit.covariance_index.push_back(spec.index(cn[r].get<std::string>()));
      if (cm[r].size() != cn.size()) throw DataError("fit summary covariance has the wrong shape");
      for (std::size_t c = 0; c < cn.size(); ++c)
        fit.covariance(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = cm[r][c].get<double>();
    }
    return fit;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed fit summary: ") + e.what());
  }
}

void write_prediction_csv(const PredictionGrid& grid, std::ostream& out) {
  const bool species = grid.layers.size() > 1;
  out << (species ? "x,y,mean,se,species\n" : "x,y,mean,se\n");
  for (const auto& layer : grid.layers)
    for (const auto& p : layer.points) {
      out << format_number(p.location.x) << ',' << format_number(p.location.y) << ',' << format_number(p.mean)
          << ',' << format_number(p.se);
      if (species) out << ',' << layer.target;
      out << '\n';
    }
}

Json truth_json(const ModelSpec& spec, const SimulationOutput& sim, std::uint64_t seed) {
  Json params = Json::object(), fields = Json::object();
  for (std::size_t i = 0; i < spec.size(); ++i)
    if (!is_latent(spec.parameters[i].block)) params[spec.parameters[i].name] = sim.truth[static_cast<Eigen::Index>(i)];
  for (const auto& f : spec.fields) {
    Json u = Json::array();
    for (std::size_t v = 0; v < spec.mesh->vertex_count(); ++v) u.push_back(sim.truth[static_cast<Eigen::Index>(f.offset + v)]);
    fields[f.name] = u;
  }
  return Json{{"format", "isdm-truth"}, {"version", 1}, {"seed", seed}, {"parameters", params}, {"fields", fields}};
}

Json score_fit(const Json& truth, const Json& summary) {
  try {
    const auto& t = truth.at("parameters");
    Json out = Json::object();
    for (const auto& [name, e] : summary.at("estimates").items()) {
      if (e.value("fixed", false) || !e.value("used", true)) continue;
      if (!t.contains(name)) throw DataError("truth has no value for parameter '" + name + "'");
      const double truth_v = t.at(name).get<double>(), est = e.at("estimate").get<double>();
      const double bias = est - truth_v;
      Json row{{"truth", truth_v}, {"estimate", est}, {"bias", bias}};
      if (e.at("se").is_null()) {
        row["se"] = nullptr;
        row["z"] = nullptr;
        row["covered"] = nullptr;
      } else {
        const double se = e.at("se").get<double>();
        row["se"] = se;
        row["z"] = bias / se;
        row["covered"] = std::abs(bias / se) <= 1.959963984540054;
      }
      out[name] = row;
    }
    return Json{{"converged", summary.at("converged").get<bool>()}, {"parameters", out}};
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed truth or fit file: ") + e.what());
  }
}

Json read_json(const fs::path& path) { return parse_json_text(read_file(path, true), path, true); }

Json score_replicates(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
  std::vector<fs::path> reps;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "truth.json") && fs::exists(e.path() / "fit.json")) reps.push_back(e.path());
  std::sort(reps.begin(), reps.end());
  if (reps.empty()) throw DataError(dir.string() + ": no replicate directories with truth.json and fit.json");

  struct Acc {
    std::size_t n = 0, with_se = 0, covered = 0;
    double bias = 0.0, abs_z = 0.0, max_abs_z = 0.0;
  };
  std::map<std::string, Acc> acc;
  std::vector<std::string> order;
  std::size_t converged = 0;
  Json names = Json::array();
  for (const auto& r : reps) {
    const Json s = score_fit(read_json(r / "truth.json"), read_json(r / "fit.json"));
    names.push_back(r.filename().string());
    converged += s["converged"].get<bool>() ? 1 : 0;
    for (const auto& [name, row] : s["parameters"].items()) {
      if (!acc.contains(name)) order.push_back(name);
      auto& a = acc[name];
      ++a.n;
      a.bias += row["bias"].get<double>();
      if (!row["z"].is_null()) {
        const double z = std::abs(row["z"].get<double>());
        ++a.with_se;
        a.abs_z += z;
        a.max_abs_z = std::max(a.max_abs_z, z);
        a.covered += row["covered"].get<bool>() ? 1 : 0;
      }
    }
  }
  Json params = Json::object();
  for (const auto& name : order) {
    const auto& a = acc[name];
    const bool se = a.with_se > 0;
    params[name] = Json{{"n", a.n},
                        {"mean_bias", a.bias / static_cast<double>(a.n)},
                        {"mean_abs_z", se ? Json(a.abs_z / static_cast<double>(a.with_se)) : Json(nullptr)},
                        {"max_abs_z", se ? Json(a.max_abs_z) : Json(nullptr)},
                        {"coverage", se ? Json(static_cast<double>(a.covered) / static_cast<double>(a.with_se)) : Json(nullptr)}};
  }
  return Json{{"replicates", reps.size()}, {"converged", converged}, {"directories", names}, {"parameters", params}};
}

// ---------------------------------------------------------------------------
// commands

namespace {

RunConfig config_with_data(const fs::path& path, const std::optional<fs::path>& data_dir) {
  RunConfig c = load_config(path);
  c.data_dir = data_dir;
  return c;
}

}  // namespace

int cmd_mesh(const MeshArgs& args, CommandIo io) {
  RunConfig config = load_config(args.config);
  if (args.out) config.raw["domain"]["cache"] = fs::absolute(*args.out).string();
  const auto a = obtain_mesh(config);
  const double mesh_area = a.mesh->area();
  const bool ok = std::abs(mesh_area - a.polygon_area) <= 1e-9 * std::max(1.0, a.polygon_area);
  io.out << "vertices " << a.mesh->vertex_count() << "\n";
  io.out << "triangles " << a.mesh->triangle_count() << "\n";
  io.out << "longest edge " << format_number(a.mesh->longest_edge()) << "\n";
  io.out << "domain area " << format_number(a.polygon_area) << ", mesh area " << format_number(mesh_area) << "\n";
  if (!ok) throw DataError("mesh area does not match the domain polygon");
  io.out << "area ok\n";
  if (a.cache) io.out << (a.cache_hit ? "cache hit " : "cache written ") << a.cache->string() << "\n";
  return exit_ok;
}

int cmd_simulate(const SimulateArgs& args, CommandIo io) {
  const RunConfig config = load_config(args.config);
  const auto mesh = obtain_mesh(config).mesh;
  SimulationConfig sim = simulation_config(config, mesh);
  if (args.seed) sim.seed = *args.seed;
  const std::size_t n = simulation_replicates(config);

  const auto write = [&](const SimulationOutput& out, const fs::path& dir, std::uint64_t seed) {
    fs::create_directories(dir);
    for (std::size_t k = 0; k < out.datasets.size(); ++k) {
      const auto& [name, data] = out.datasets[k];
      const auto kind = static_cast<DatasetKind>(data.index());
      write_dataset(data, dir / (name + dataset_extension(kind)));
      io.out << dir.filename().string() << ": " << name << " " << record_count(data) << " records\n";
    }
    write_text(dir / "truth.json", truth_json(sim.model, out, seed).dump(2) + "\n");
  };
  if (n == 1) {
    write(simulate(sim), args.out_dir, sim.seed);
  } else {
    const auto outs = simulate_replicates(sim, n, args.threads);
    for (std::size_t r = 0; r < n; ++r) {
      char name[32];
      std::snprintf(name, sizeof name, "rep_%03zu", r);
      write(outs[r], args.out_dir / name, replicate_seed(sim.seed, r));
    }
  }
  return exit_ok;
}

int cmd_fit(const FitArgs& args, CommandIo io) {
  const RunConfig config = config_with_data(args.config, args.data_dir);
  const auto mesh = obtain_mesh(config).mesh;
  std::vector<std::string> flags;
  ModelSpec spec = build_model(config, mesh, &flags);
  FitOptions opt = fit_options(config);
  opt.threads = args.threads;
  const JointObjective obj(std::move(spec), args.threads);
  const FitResult fit = fit_map(obj, opt);
  write_text(args.out, fit_summary(obj, fit, flags).dump(2) + "\n");
  io.out << "mode " << to_string(fit.mode) << ", iterations " << fit.iterations << ", neg log posterior "
         << format_number(fit.neg_log_posterior) << ", " << (fit.converged ? "converged" : "NOT converged") << "\n";
  for (const auto& f : flags) io.err << "note: " << f << "\n";
  if (!fit.converged) {
    io.err << Json{{"error", {{"code", exit_not_converged}, {"kind", "not_converged"}, {"message", fit.diagnostic}}}}.dump()
           << "\n";
    return exit_not_converged;
  }
  return exit_ok;
}

int cmd_predict(const PredictArgs& args, CommandIo io) {
  const RunConfig config = config_with_data(args.config, args.data_dir);
  const auto mesh = obtain_mesh(config).mesh;
  const JointObjective obj(build_model(config, mesh), args.threads);
  const FitResult fit = fit_from_summary(obj.spec(), read_json(args.fit));
  PredictOptions opt = predict_options(config);
  if (args.resolution) opt.resolution = *args.resolution;
  if (args.include_bias) opt.include_bias = *args.include_bias;
  const PredictionGrid grid = predict_grid(obj, fit, opt);
  std::ostringstream csv;
  write_prediction_csv(grid, csv);
  write_text(args.out, csv.str());
  std::size_t written = 0;
  for (const auto& l : grid.layers) written += l.points.size();
  io.err << "grid: " << written << " points written, " << grid.dropped << " outside the domain dropped per layer\n";
  return exit_ok;
}

int cmd_score(const ScoreArgs& args, CommandIo io) {
  Json report;
  if (args.replicates) {
    report = score_replicates(*args.replicates);
  } else {
    if (!args.truth || !args.fit) throw ConfigError("score needs --truth and --fit, or --replicates");
    report = score_fit(read_json(*args.truth), read_json(*args.fit));
  }
  const std::string text = report.dump(2) + "\n";
  if (args.out) write_text(*args.out, text);
  else io.out << text;
  return exit_ok;
}

int cmd_validate(const ValidateArgs& args, CommandIo io) {
  const RunConfig config = config_with_data(args.config, args.data_dir);
  const auto mesh = obtain_mesh(config).mesh;
  std::vector<std::string> flags;
  const JointObjective obj(build_model(config, mesh, &flags));
  std::size_t records = 0;
  for (const auto& d : obj.spec().datasets) records += record_count(d.data);
  if (config.raw.contains("simulate")) simulation_config(config, mesh);
  io.out << "ok: " << obj.spec().datasets.size() << " datasets, " << records << " records, " << obj.size()
         << " parameters, mesh " << mesh->vertex_count() << " vertices\n";
  for (const auto& f : flags) io.err << "note: " << f << "\n";
  return exit_ok;
}

int run_guarded(const std::function<int()>& command, std::ostream& err) {
  const auto report = [&](int code, const char* kind, const std::string& message) {
    err << Json{{"error", {{"code", code}, {"kind", kind}, {"message", message}}}}.dump() << "\n";
    return code;
  };
  try {
    return command();
  } catch (const ConfigError& e) {
    return report(exit_config, "config", e.what());
  } catch (const SpecificationError& e) {
    return report(exit_config, "config", e.what());
  } catch (const DataError& e) {
    return report(exit_data, "data", e.what());
  } catch (const GeometryError& e) {
    return report(exit_data, "data", e.what());
  } catch (const InvalidPriorError& e) {
    return report(exit_config, "config", e.what());
  } catch (const OutsideDomainError& e) {
    return report(exit_data, "data", e.what());
  } catch (const std::exception& e) {
    return report(exit_internal, "internal", e.what());
  }
}

}  // namespace isdm
