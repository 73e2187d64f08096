#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fsde/delay_measure.hpp"
#include "fsde/error.hpp"
#include "fsde/mild_solver.hpp"
#include "fsde/model.hpp"

namespace fsde {

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names = {"simulate", "validate", "girsanov-check", "couple",
                                                 "harnack",  "gradient", "zvonkin",        "bihari"};
  return names;
}

inline const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names = {"zero", "ou", "linear-delay", "reference", "cubic", "tabulated"};
  return names;
}

struct ExperimentConfig {
  std::string scenario;
  std::uint64_t seed = 1;
  std::size_t paths = 1000;
  int workers = 1;
  std::string format = "csv";
  std::string out = ".";

  std::string model = "zero";
  CatalogParams params;

  MeasureDescriptor measure;
  double r0 = 1.0;

  SolverConfig solver;  // solver.T_end defaults to experiment.T

  std::vector<double> xi = {0.0};   // constant initial segment, one value per coordinate
  std::vector<double> eta;  // second initial segment (couple); empty: xi shifted by distances[0]
  std::vector<double> distances = {0.1, 0.2};  // C_nu distances along (1, ..., 1)

  double T = 1.0;
  std::vector<double> T_list = {0.25, 0.5, 1.0};
  std::string functional = "tanh2";
  double functional_param = 0.0;
  bool transform = false;      // run on the Zvonkin-transformed model
  double lambda = 2.0;         // resolvent parameter for the transform
  std::vector<double> lambdas = {2, 4, 8, 16, 32};
  double dx = 0.02;            // Kolmogorov grid spacing
  double ds = 1.0 / 256;       // Kolmogorov time step
  std::vector<int> halvings;   // step exponents for refinement studies (simulate, zvonkin)
  double eps = 0.05;
  std::optional<double> c_hat;
  std::size_t fit_paths = 2000;
  double coupling_threshold = 0.99;
  double apriori_threshold = 0.999;
  std::size_t validation_samples = 2000;

  bool T_end_set = false;
  std::map<std::string, int> lines;  // key -> line it was read from, for diagnostics

  std::optional<double> K;     // coupling constant; the transform measures one when unset
  std::string record = "full";  // simulate: full trajectories or terminal values
  bool export_u = false;

  // end time of plain simulations (simulate, validate, girsanov-check, bihari)
  double horizon() const { return T_end_set ? solver.T_end : T; }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string where(const ExperimentConfig& c, const std::string& key) {
  const auto it = c.lines.find(key);
  return it == c.lines.end() ? key : "line " + std::to_string(it->second) + ": " + key;
}

[[noreturn]] inline void config_fail(const std::string& where, const std::string& what) {
  throw Error(ErrorCode::config, where + ": " + what);
}

// Accepts decimal numbers, inf, and fractions a/b.
inline double parse_number(const std::string& text, const std::string& where) {
  const std::string s = trim(text);
  const auto slash = s.find('/');
  if (slash != std::string::npos) {
    const double a = parse_number(s.substr(0, slash), where);
    const double b = parse_number(s.substr(slash + 1), where);
    if (b == 0.0) config_fail(where, "division by zero in '" + s + "'");
    return a / b;
  }
  if (s == "inf") return std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || std::isnan(v)) config_fail(where, "expected a number, got '" + s + "'");
  return v;
}

inline std::vector<double> parse_list(const std::string& text, const std::string& where) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number(item, where));
  if (out.empty()) config_fail(where, "expected a comma-separated list");
  return out;
}

inline long parse_integer(const std::string& text, const std::string& where, long lo) {
  const double v = parse_number(text, where);
  if (v != std::floor(v) || v < static_cast<double>(lo) || v > 9.007199254740992e15)
    config_fail(where, "expected an integer >= " + std::to_string(lo) + ", got '" + trim(text) + "'");
  return static_cast<long>(v);
}

inline bool parse_bool(const std::string& text, const std::string& where) {
  const std::string s = trim(text);
  if (s == "true" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "no" || s == "0") return false;
  config_fail(where, "expected true or false, got '" + s + "'");
}

inline std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s;
}

}  // namespace detail

// Sets one key; keys are section-qualified ("solver.h") or top-level.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value, const std::string& where) {
  using namespace detail;
  auto num = [&] { return parse_number(value, where); };
  auto list = [&] { return parse_list(value, where); };
  const std::string v = trim(value);
  if (key == "scenario") {
    const auto& names = scenario_names();
    if (std::find(names.begin(), names.end(), v) == names.end())
      config_fail(where, "unknown scenario '" + v + "'; valid scenarios: " + join(names));
    c.scenario = v;
  } else if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(parse_integer(value, where, 0));
  } else if (key == "paths") {
    c.paths = static_cast<std::size_t>(parse_integer(value, where, 1));
  } else if (key == "workers") {
    c.workers = static_cast<int>(parse_integer(value, where, 1));
  } else if (key == "format") {
    if (v != "csv" && v != "json") config_fail(where, "format must be csv or json");
    c.format = v;
  } else if (key == "out") {
    c.out = v;
  } else if (key == "model.name") {
    const auto& names = model_names();
    if (std::find(names.begin(), names.end(), v) == names.end())
      config_fail(where, "unknown model '" + v + "'; valid models: " + join(names));
    c.model = v;
  } else if (key == "model.d") {
    c.params.d = static_cast<int>(parse_integer(value, where, 1));
  } else if (key == "model.lambda_a") {
    c.params.lambda_a = num();
  } else if (key == "model.sigma") {
    c.params.sigma = num();
  } else if (key == "model.beta") {
    c.params.beta = num();
  } else if (key == "model.q_mult") {
    c.params.q_mult = num();
  } else if (key == "model.b_const") {
    c.params.b_const = num();
  } else if (key == "model.table_x") {
    c.params.table_x = list();
  } else if (key == "model.table_b") {
    c.params.table_b = list();
  } else if (key == "measure.kind") {
    if (v == "exponential") c.measure.kind = MeasureKind::exponential;
    else if (v == "uniform") c.measure.kind = MeasureKind::uniform;
    else if (v == "atoms") c.measure.kind = MeasureKind::atoms;
    else if (v == "custom") c.measure.kind = MeasureKind::custom;
    else config_fail(where, "unknown measure kind '" + v + "'; valid kinds: exponential, uniform, atoms, custom");
  } else if (key == "measure.rate") {
    c.measure.rate = num();
  } else if (key == "measure.density") {
    c.measure.density = num();
  } else if (key == "measure.r0") {
    c.r0 = num();
  } else if (key == "measure.truncated_window") {
    c.measure.truncated_window = parse_bool(value, where);
  } else if (key == "measure.weights") {
    c.measure.weights = list();
  } else if (key == "measure.atoms") {
    // position:mass pairs
    c.measure.atoms.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) config_fail(where, "atoms are written position:mass");
      c.measure.atoms.emplace_back(parse_number(item.substr(0, colon), where), parse_number(item.substr(colon + 1), where));
    }
  } else if (key == "solver.scheme") {
    if (v == "exponential-euler") c.solver.scheme = Scheme::exponential_euler;
    else if (v == "euler-maruyama") c.solver.scheme = Scheme::euler_maruyama;
    else config_fail(where, "scheme must be exponential-euler or euler-maruyama");
  } else if (key == "solver.h") {
    c.solver.h = num();
  } else if (key == "solver.T_end") {
    c.solver.T_end = num();
    c.T_end_set = true;
  } else if (key == "solver.truncation") {
    c.solver.truncation = num();
  } else if (key == "solver.R_explode") {
    c.solver.R_explode = num();
  } else if (key == "initial.xi") {
    c.xi = list();
  } else if (key == "initial.eta") {
    c.eta = list();
  } else if (key == "initial.distances") {
    c.distances = list();
  } else if (key == "experiment.T") {
    c.T = num();
  } else if (key == "experiment.T_list") {
    c.T_list = list();
  } else if (key == "experiment.functional") {
    c.functional = v;
  } else if (key == "experiment.functional_param") {
    c.functional_param = num();
  } else if (key == "experiment.transform") {
    c.transform = parse_bool(value, where);
  } else if (key == "experiment.lambda") {
    c.lambda = num();
  } else if (key == "experiment.lambdas") {
    c.lambdas = list();
  } else if (key == "experiment.dx") {
    c.dx = num();
  } else if (key == "experiment.ds") {
    c.ds = num();
  } else if (key == "experiment.halvings") {
    c.halvings.clear();
    for (double e : list()) {
      if (e != std::floor(e) || e < 1 || e > 20) config_fail(where, "halvings are step exponents in 1..20");
      c.halvings.push_back(static_cast<int>(e));
    }
  } else if (key == "experiment.K") {
    c.K = num();
  } else if (key == "experiment.record") {
    if (v != "full" && v != "terminal") config_fail(where, "record must be full or terminal");
    c.record = v;
  } else if (key == "experiment.export_u") {
    c.export_u = parse_bool(value, where);
  } else if (key == "experiment.eps") {
    c.eps = num();
  } else if (key == "experiment.c_hat") {
    c.c_hat = num();
  } else if (key == "experiment.fit_paths") {
    c.fit_paths = static_cast<std::size_t>(parse_integer(value, where, 2));
  } else if (key == "experiment.coupling_threshold") {
    c.coupling_threshold = num();
  } else if (key == "experiment.apriori_threshold") {
    c.apriori_threshold = num();
  } else if (key == "experiment.validation_samples") {
    c.validation_samples = static_cast<std::size_t>(parse_integer(value, where, 1000));
  } else {
    config_fail(where, "unknown key '" + key + "'");
  }
}

// Cross-field checks; run after overrides are applied.
inline void validate_config(const ExperimentConfig& c) {
  using detail::config_fail;
  using detail::where;
  if (c.scenario.empty()) config_fail("scenario", "missing required field; valid scenarios: " + detail::join(scenario_names()));
  if (!(c.solver.h > 0.0)) config_fail(where(c, "solver.h"), "step must be positive");
  if (!(c.r0 > 0.0)) config_fail(where(c, "measure.r0"), "r0 must be positive");
  auto commensurate = [&](double a, const std::string& key, const char* name) {
    const double q = a / c.solver.h;
    if (!(q >= 0.5) || std::abs(q - std::round(q)) > 1e-9 * std::max(1.0, q))
      config_fail(where(c, "solver.h"), "h = " + std::to_string(c.solver.h) + " does not divide " + name + " = " +
                                            std::to_string(a) + " (" + key + ")");
  };
  commensurate(c.r0, "measure.r0", "r0");
  commensurate(c.T, "experiment.T", "T");
  commensurate(c.horizon(), "solver.T_end", "T_end");
  if (c.scenario == "harnack" || c.scenario == "gradient") {
    for (double t : c.T_list) {
      if (!(t > 0.0)) config_fail(where(c, "experiment.T_list"), "times must be positive");
      commensurate(t, "experiment.T_list", "T");
    }
  }
  if (!(c.T > 0.0)) config_fail(where(c, "experiment.T"), "T must be positive");
  if (c.xi.empty() || (c.xi.size() != 1 && static_cast<int>(c.xi.size()) != c.params.d))
    config_fail(where(c, "initial.xi"), "needs one value or one per coordinate (d = " + std::to_string(c.params.d) + ")");
  if (!c.eta.empty() && c.eta.size() != 1 && static_cast<int>(c.eta.size()) != c.params.d)
    config_fail(where(c, "initial.eta"), "needs one value or one per coordinate");
  if (c.distances.empty()) config_fail(where(c, "initial.distances"), "needs at least one distance");
  for (double d : c.distances)
    if (!(d >= 0.0)) config_fail(where(c, "initial.distances"), "distances must be non-negative");
  if (!(c.eps > 0.0)) config_fail(where(c, "experiment.eps"), "eps must be positive");
  if (c.paths < 1) config_fail(where(c, "paths"), "n must be at least 1");
  if (c.workers < 1) config_fail(where(c, "workers"), "workers must be at least 1");
}

// Flat "key = value" text; "[section]" lines prefix the keys that follow.
// '#' starts a comment. Reads fields only; see parse_config.
inline ExperimentConfig parse_config_fields(const std::string& text) {
  ExperimentConfig c;
  std::stringstream ss(text);
  std::string raw;
  std::string section;
  int line = 0;
  while (std::getline(ss, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    const std::string here = "line " + std::to_string(line);
    if (s.front() == '[') {
      if (s.back() != ']') detail::config_fail(here, "unterminated section header");
      section = detail::trim(s.substr(1, s.size() - 2));
      static const std::vector<std::string> sections = {"model", "measure", "solver", "initial", "experiment"};
      if (std::find(sections.begin(), sections.end(), section) == sections.end())
        detail::config_fail(here, "unknown section [" + section + "]; valid sections: " + detail::join(sections));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) detail::config_fail(here, "expected key = value");
    const std::string k = detail::trim(s.substr(0, eq));
    const std::string key = section.empty() ? k : section + "." + k;
    if (c.lines.count(key)) detail::config_fail(here + ": " + key, "duplicate key (first on line " + std::to_string(c.lines[key]) + ")");
    c.lines[key] = line;
    set_config_value(c, key, s.substr(eq + 1), here + ": " + key);
  }
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  auto c = parse_config_fields(text);
  validate_config(c);
  return c;
}

}  // namespace fsde
