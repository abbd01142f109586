#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "isdm/inference.hpp"
#include "isdm/simulate.hpp"

namespace isdm {

using Json = nlohmann::ordered_json;

/// Malformed or inconsistent run configuration (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { exit_ok = 0, exit_internal = 1, exit_config = 2, exit_data = 3, exit_not_converged = 4 };

/// 9 significant digits.
std::string format_number(double x);
/// Shortest representation that reads back to the same double.
std::string format_coordinate(double x);

// ---- file formats

/// GeoJSON Polygon, Feature or FeatureCollection with exactly one polygon.
Polygon read_domain_geojson(const std::filesystem::path& path);
/// Every Polygon / MultiPolygon part in a GeoJSON document.
std::vector<Polygon> read_polygons_geojson(const std::filesystem::path& path);

enum class DatasetKind { count, occupancy, presence_only, regional };
DatasetKind parse_dataset_kind(const std::string& s);
const char* to_string(DatasetKind kind);

/// CSV schemas (header row required, columns in any order, no others):
///   count:         x,y,count[,duration]
///   occupancy:     x,y,visits,detections
///   presence_only: x,y
/// Regional lists are GeoJSON polygon features with a boolean "present".
/// A design file (for simulation) may omit the response column
/// (count, detections, present).
Dataset read_dataset(DatasetKind kind, const std::filesystem::path& path, bool design = false);
void write_dataset(const Dataset& ds, const std::filesystem::path& path);
std::string dataset_extension(DatasetKind kind);

/// Covariate samples x,y,value projected onto mesh vertices by nearest neighbour.
CovariateField read_covariate_csv(const TriangulatedDomain& mesh, const std::string& name,
                                  const std::filesystem::path& path);

// ---- mesh artifact

std::string mesh_cache_key(const Polygon& boundary, double max_edge);
Json mesh_to_json(const TriangulatedDomain& mesh, const std::string& key);
TriangulatedDomain mesh_from_json(const Json& j);

// ---- run configuration

struct RunConfig {
  Json raw;
  std::filesystem::path base_dir;  // relative paths resolve here
  std::optional<std::filesystem::path> data_dir;  // overrides base_dir for dataset files

  std::filesystem::path resolve(const std::string& p) const;
  std::filesystem::path resolve_data(const std::string& p) const;
};

/// Parses and schema-checks the whole document; unknown keys are rejected.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const Json& j, const std::filesystem::path& base_dir);

struct MeshArtifact {
  std::shared_ptr<const TriangulatedDomain> mesh;
  bool cache_hit = false;
  std::optional<std::filesystem::path> cache;
  double polygon_area = 0.0;
};
/// Loads the cached mesh when its key matches the domain and max_edge,
/// otherwise builds it and writes the cache (when configured).
MeshArtifact obtain_mesh(const RunConfig& config);

/// Model from the config's covariates, range maps, fields, datasets, targets
/// and parameter overrides. Flags collects non-fatal notes (empty datasets).
ModelSpec build_model(const RunConfig& config, std::shared_ptr<const TriangulatedDomain> mesh,
                      std::vector<std::string>* flags = nullptr);
FitOptions fit_options(const RunConfig& config);
PredictOptions predict_options(const RunConfig& config);
SimulationConfig simulation_config(const RunConfig& config, std::shared_ptr<const TriangulatedDomain> mesh);
std::size_t simulation_replicates(const RunConfig& config);

// ---- results

Json fit_summary(const JointObjective& objective, const FitResult& fit, const std::vector<std::string>& flags);
/// Rebuilds optimum, standard errors and covariance from a summary.
FitResult fit_from_summary(const ModelSpec& spec, const Json& summary);
void write_prediction_csv(const PredictionGrid& grid, std::ostream& out);
Json truth_json(const ModelSpec& spec, const SimulationOutput& sim, std::uint64_t seed);

/// Per-parameter bias, z-score and 95% coverage of one fit against its truth.
Json score_fit(const Json& truth, const Json& summary);
/// Aggregates every <dir>/*/truth.json with a fit.json beside it.
Json score_replicates(const std::filesystem::path& dir);

Json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// ---- commands

struct CommandIo {
  std::ostream& out;
  std::ostream& err;
};

struct MeshArgs {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
};
struct SimulateArgs {
  std::filesystem::path config;
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
};
struct FitArgs {
  std::filesystem::path config;
  std::optional<std::filesystem::path> data_dir;
  std::filesystem::path out;
  unsigned threads = 1;
};
struct PredictArgs {
  std::filesystem::path config;
  std::filesystem::path fit;
  std::optional<std::filesystem::path> data_dir;
  std::filesystem::path out;
  std::optional<double> resolution;
  std::optional<bool> include_bias;
  unsigned threads = 1;
};
struct ScoreArgs {
  std::optional<std::filesystem::path> truth;
  std::optional<std::filesystem::path> fit;
  std::optional<std::filesystem::path> replicates;
  std::optional<std::filesystem::path> out;
};
struct ValidateArgs {
  std::filesystem::path config;
  std::optional<std::filesystem::path> data_dir;
};

int cmd_mesh(const MeshArgs& args, CommandIo io);
int cmd_simulate(const SimulateArgs& args, CommandIo io);
int cmd_fit(const FitArgs& args, CommandIo io);
int cmd_predict(const PredictArgs& args, CommandIo io);
int cmd_score(const ScoreArgs& args, CommandIo io);
int cmd_validate(const ValidateArgs& args, CommandIo io);

/// Runs a command, mapping exceptions to exit codes and a one-line JSON error
/// record on io.err: {"error":{"code":..,"kind":..,"message":..}}.
int run_guarded(const std::function<int()>& command, std::ostream& err);

}  // namespace isdm
