#include <iostream>

#include <CLI11.hpp>

#include "isdm/cli_io.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Integrated species distribution models: mesh, simulate, fit, predict, score"};
  app.require_subcommand(1);

  isdm::MeshArgs mesh_args;
  auto* mesh = app.add_subcommand("mesh", "Build (or load the cached) mesh and check its area");
  mesh->add_option("config", mesh_args.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  mesh->add_option("--out", mesh_args.out, "Write the mesh here instead of the configured cache");

  isdm::SimulateArgs sim_args;
  auto* sim = app.add_subcommand("simulate", "Simulate datasets from the configured truth");
  sim->add_option("config", sim_args.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", sim_args.out_dir, "Output directory")->required();
  sim->add_option("--seed", sim_args.seed, "Override the configured seed");
  sim->add_option("--threads", sim_args.threads, "Worker threads")->check(CLI::PositiveNumber);

  isdm::FitArgs fit_args;
  auto* fit = app.add_subcommand("fit", "Fit the joint model and write a JSON summary");
  fit->add_option("config", fit_args.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  fit->add_option("--data", fit_args.data_dir, "Directory dataset files are read from");
  fit->add_option("--out", fit_args.out, "Fit summary path")->required();
  fit->add_option("--threads", fit_args.threads, "Worker threads")->check(CLI::PositiveNumber);

  isdm::PredictArgs pred_args;
  bool with_bias = false, without_bias = false;
  auto* pred = app.add_subcommand("predict", "Predict log intensity on a grid from a fit summary");
  pred->add_option("config", pred_args.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  pred->add_option("--fit", pred_args.fit, "Fit summary")->required()->check(CLI::ExistingFile);
  pred->add_option("--data", pred_args.data_dir, "Directory dataset files are read from");
  pred->add_option("--out", pred_args.out, "Prediction CSV")->required();
  pred->add_option("--resolution", pred_args.resolution, "Grid spacing")->check(CLI::PositiveNumber);
  pred->add_flag("--include-bias", with_bias, "Add the targets' bias terms");
  pred->add_flag("--exclude-bias", without_bias, "Ecological terms only");
  pred->add_option("--threads", pred_args.threads, "Worker threads")->check(CLI::PositiveNumber);

  isdm::ScoreArgs score_args;
  auto* score = app.add_subcommand("score", "Compare fits with their simulation truth");
  score->add_option("--truth", score_args.truth, "truth.json of one simulation");
  score->add_option("--fit", score_args.fit, "Fit summary of one simulation");
  score->add_option("--replicates", score_args.replicates, "Directory of rep_* folders with truth.json and fit.json");
  score->add_option("--out", score_args.out, "Report path (default stdout)");

  isdm::ValidateArgs val_args;
  auto* val = app.add_subcommand("validate", "Check a configuration and its data without fitting");
  val->add_option("config", val_args.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  val->add_option("--data", val_args.data_dir, "Directory dataset files are read from");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return isdm::exit_config;
  }

  isdm::CommandIo io{std::cout, std::cerr};
  return isdm::run_guarded(
      [&]() -> int {
        if (*mesh) return isdm::cmd_mesh(mesh_args, io);
        if (*sim) return isdm::cmd_simulate(sim_args, io);
        if (*fit) return isdm::cmd_fit(fit_args, io);
        if (*pred) {
          if (with_bias && without_bias) throw isdm::ConfigError("--include-bias and --exclude-bias conflict");
          if (with_bias) pred_args.include_bias = true;
          if (without_bias) pred_args.include_bias = false;
          return isdm::cmd_predict(pred_args, io);
        }
        if (*score) return isdm::cmd_score(score_args, io);
        return isdm::cmd_validate(val_args, io);
      },
      std::cerr);
}
