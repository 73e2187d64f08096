#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "fsde/experiment.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw fsde::Error(fsde::ErrorCode::config, path + ": cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segment-process SDE experiments: simulation, change of measure, coupling and Harnack checks"};
  std::string scenario, config_path;
  std::optional<std::string> seed, paths, step, out, format, workers;
  app.add_option("scenario", scenario, "one of: " + fsde::detail::join(fsde::scenario_names()))->required();
  app.add_option("--config", config_path, "config file (key = value, see README)")->required();
  app.add_option("--seed", seed, "base seed");
  app.add_option("--paths", paths, "number of paths");
  app.add_option("--step", step, "grid step h");
  app.add_option("--out", out, "output directory");
  app.add_option("--format", format, "csv or json");
  app.add_option("--workers", workers, "worker threads (results do not depend on it)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 3;
  }

  try {
    auto cfg = fsde::parse_config_fields(read_file(config_path));
    if (!cfg.scenario.empty() && cfg.scenario != scenario) {
      throw fsde::Error(fsde::ErrorCode::config, fsde::detail::where(cfg, "scenario") + ": config is for '" + cfg.scenario +
                                                     "', command line asks for '" + scenario + "'");
    }
    fsde::set_config_value(cfg, "scenario", scenario, "scenario");
    if (seed) fsde::set_config_value(cfg, "seed", *seed, "--seed");
    if (paths) fsde::set_config_value(cfg, "paths", *paths, "--paths");
    if (step) {
      fsde::set_config_value(cfg, "solver.h", *step, "--step");
      cfg.lines.erase("solver.h");
    }
    if (out) fsde::set_config_value(cfg, "out", *out, "--out");
    if (format) fsde::set_config_value(cfg, "format", *format, "--format");
    if (workers) fsde::set_config_value(cfg, "workers", *workers, "--workers");
    fsde::validate_config(cfg);

    const auto result = fsde::run_scenario(cfg);
    fsde::write_results(result, cfg);
    for (const auto& n : result.notes) std::cerr << "note: " << n << '\n';
    std::cout << fsde::summary_line(result) << std::endl;
    return result.exit_code();
  } catch (const fsde::Error& e) {
    std::cerr << "error [" << fsde::to_string(e.code()) << "]: " << e.what() << '\n';
    return fsde::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
