#pragma once

// Experiment configuration: INI-style sections parsed with boost::property_tree,
// validated field by field, with unknown sections and keys rejected.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "graphgrad/errors.hpp"
#include "graphgrad/optimizer.hpp"

namespace graphgrad::cli {

enum class SystemKind { lorenz63, lorenz96, kuramoto, random };
enum class Method { graphgrad, graphgrad_subgrad, pmle, truemle };

inline std::string to_string(SystemKind s) {
  switch (s) {
    case SystemKind::lorenz63: return "lorenz63";
    case SystemKind::lorenz96: return "lorenz96";
    case SystemKind::kuramoto: return "kuramoto";
    case SystemKind::random: return "random";
  }
  return "?";
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::graphgrad: return "graphgrad";
    case Method::graphgrad_subgrad: return "graphgrad-subgrad";
    case Method::pmle: return "pmle";
    case Method::truemle: return "truemle";
  }
  return "?";
}

struct ExperimentConfig {
  // [system]
  SystemKind system = SystemKind::lorenz63;
  double dt = 0.025;
  long T = 100;
  double sigma2 = 1.0;
  double l63_sigma = 10.0;
  double l63_rho = 28.0;
  double l63_beta = 8.0 / 3.0;
  int n_x = 3;
  double forcing = 8.0;
  double coupling = 0.8;
  double eta_mean = 0.5;
  double eta_sd = 0.5;
  double burn_in = 10.0;
  double prior_var = 0.2;
  double sparsity = 0.75;

  // [fit]
  Method method = Method::graphgrad;
  int d = 2;
  int particles = 100;
  std::optional<int> batches;  // unset: ceil(T / 10)
  int steps = 100;
  double lr = 1e-3;
  std::optional<double> lambda;  // unset: tune
  double beta1 = 0.95;
  double beta2 = 0.25;
  MomentGroup moment_group = MomentGroup::matrix;
  int retries = 1;
  bool prefix_fallback = false;

  // [tune]
  long tune_T = 50;
  int tune_iterations = 10;
  double tune_log_lo = -5.0;
  double tune_log_hi = 2.0;

  // [degeneracy]
  std::vector<int> probe_particles{5, 10, 100, 1000};
  int probe_systems = 50;
  long probe_T = 200;

  // [evaluate] and [export]
  double zero_tol = kDefaultZeroTol;
  std::string graph_source = "fit";  // fit | truth | path to coefficient JSON
  bool per_monomial = false;

  // [run]
  int replicates = 10;
  std::uint64_t seed = 0;
  std::string out = "results";

  int effective_batches() const { return batches ? *batches : default_batches(T); }
  int state_dim() const {
    return system == SystemKind::lorenz63 ? 3 : n_x;
  }

  FitConfig fit_config(std::uint64_t replicate_seed, double lam) const {
    FitConfig f;
    f.batches = effective_batches();
    f.steps_per_batch = steps;
    f.lambda = lam;
    f.particles = particles;
    f.seed = replicate_seed;
    f.penalty = method == Method::graphgrad_subgrad ? PenaltyMode::subgradient
                : method == Method::graphgrad       ? PenaltyMode::prox
                                                    : PenaltyMode::none;
    f.novograd.lr = lr;
    f.novograd.beta1 = beta1;
    f.novograd.beta2 = beta2;
    f.novograd.group = moment_group;
    f.retries = retries;
    f.prefix_fallback = prefix_fallback;
    return f;
  }

  TuneConfig tune_config() const {
    TuneConfig t;
    t.n_x = state_dim();
    t.d = d;
    t.dt = dt;
    t.T = tune_T;
    t.iterations = tune_iterations;
    t.log_lo = tune_log_lo;
    t.log_hi = tune_log_hi;
    t.seed = seed;
    return t;
  }

  void validate() const {
    auto require = [](bool ok, const char* field, const char* what) {
      if (!ok) throw ConfigError(field, what);
    };
    require(dt > 0.0 && std::isfinite(dt), "system.dt", "must be positive");
    require(T >= 1, "system.T", "must be >= 1");
    require(sigma2 >= 0.0 && std::isfinite(sigma2), "system.sigma2", "must be >= 0");
    require(n_x >= 1, "system.n_x", "must be >= 1");
    if (system == SystemKind::lorenz96) require(n_x >= 4, "system.n_x", "lorenz96 needs n_x >= 4");
    if (system == SystemKind::kuramoto) {
      require(n_x >= 2, "system.n_x", "kuramoto needs n_x >= 2");
      require(eta_sd >= 0.0, "system.eta_sd", "must be >= 0");
      require(burn_in >= 0.0, "system.burn_in", "must be >= 0");
      require(prior_var > 0.0, "system.prior_var", "must be positive");
    }
    require(sparsity >= 0.0 && sparsity < 1.0, "system.sparsity", "must be in [0, 1)");
    require(d >= 1 && d <= 8, "fit.d", "must be in [1, 8]");
    require(particles >= 1, "fit.particles", "must be >= 1");
    require(!batches || (*batches >= 1 && *batches <= T), "fit.batches", "must be in [1, T]");
    require(steps >= 1, "fit.steps", "must be >= 1");
    require(lr > 0.0 && std::isfinite(lr), "fit.lr", "must be positive");
    require(!lambda || (*lambda >= 0.0 && std::isfinite(*lambda)), "fit.lambda", "must be >= 0 or 'tune'");
    require(beta1 >= 0.0 && beta1 < 1.0, "fit.beta1", "must be in [0, 1)");
    require(beta2 >= 0.0 && beta2 < 1.0, "fit.beta2", "must be in [0, 1)");
    require(retries >= 0, "fit.retries", "must be >= 0");
    require(method != Method::truemle || system == SystemKind::kuramoto, "fit.method",
            "truemle is only defined for the kuramoto system");
    require(tune_T >= 1, "tune.T", "must be >= 1");
    require(tune_iterations >= 0, "tune.iterations", "must be >= 0");
    require(tune_log_lo < tune_log_hi, "tune.log_lo", "must be below tune.log_hi");
    require(!probe_particles.empty(), "degeneracy.particles", "must list at least one value");
    for (int k : probe_particles) require(k >= 1, "degeneracy.particles", "values must be >= 1");
    require(probe_systems >= 1, "degeneracy.systems", "must be >= 1");
    require(probe_T >= 1, "degeneracy.T", "must be >= 1");
    require(zero_tol >= 0.0, "evaluate.zero_tol", "must be >= 0");
    require(replicates >= 1, "run.replicates", "must be >= 1");
    require(!out.empty(), "run.out", "must not be empty");
  }

  /// Canonical key=value listing of every field that affects results.
  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "system=" << to_string(system) << ";dt=" << dt << ";T=" << T << ";sigma2=" << sigma2
       << ";l63=" << l63_sigma << "," << l63_rho << "," << l63_beta << ";n_x=" << n_x << ";forcing=" << forcing
       << ";kuramoto=" << coupling << "," << eta_mean << "," << eta_sd << "," << burn_in << "," << prior_var
       << ";sparsity=" << sparsity << ";method=" << to_string(method) << ";d=" << d << ";K=" << particles
       << ";B=" << effective_batches() << ";S=" << steps << ";lr=" << lr << ";lambda=";
    if (lambda) os << *lambda;
    else os << "tune";
    os << ";beta=" << beta1 << "," << beta2
       << ";group=" << static_cast<int>(moment_group) << ";retries=" << retries << ";prefix=" << prefix_fallback
       << ";tune=" << tune_T << "," << tune_iterations << "," << tune_log_lo << "," << tune_log_hi
       << ";probe=";
    for (int k : probe_particles) os << k << ",";
    os << probe_systems << "," << probe_T << ";zero_tol=" << zero_tol << ";graph=" << graph_source << ","
       << per_monomial << ";replicates=" << replicates << ";seed=" << seed;
    return os.str();
  }
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(c.canonical());
  return os.str();
}

namespace detail {

inline const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"system",
       {"name", "dt", "T", "sigma2", "sigma", "rho", "beta", "n_x", "forcing", "coupling", "eta_mean", "eta_sd",
        "burn_in", "prior_var", "sparsity"}},
      {"fit",
       {"method", "d", "particles", "batches", "steps", "lr", "lambda", "beta1", "beta2", "moment_group", "retries",
        "prefix_fallback"}},
      {"tune", {"T", "iterations", "log_lo", "log_hi"}},
      {"degeneracy", {"particles", "systems", "T"}},
      {"evaluate", {"zero_tol"}},
      {"export", {"source", "per_monomial"}},
      {"run", {"replicates", "seed", "out"}},
  };
  return s;
}

template <class T>
T parse_value(const std::string& field, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (is.fail() || !(is >> std::ws).eof()) throw ConfigError(field, "cannot parse '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& field, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(field, "expected true or false, got '" + text + "'");
}

}  // namespace detail

/// Parses INI text. Sections and keys outside the schema are errors.
inline ExperimentConfig parse_config(std::istream& is) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  const auto& schema = detail::schema();
  for (const auto& [section, body] : tree) {
    const auto it = schema.find(section);
    if (it == schema.end()) {
      if (body.empty()) throw ConfigError(section, "keys must appear inside a section");
      throw ConfigError(section, "unknown section");
    }
    for (const auto& [key, value] : body)
      if (!it->second.contains(key)) throw ConfigError(section + "." + key, "unknown key");
  }

  ExperimentConfig c;
  auto get = [&](const std::string& path) -> std::optional<std::string> {
    if (auto v = tree.get_optional<std::string>(pt::ptree::path_type(path, '.'))) return *v;
    return std::nullopt;
  };
  auto num = [&]<class T>(const std::string& path, T& dst) {
    if (auto v = get(path)) dst = detail::parse_value<T>(path, *v);
  };

  if (auto v = get("system.name")) {
    if (*v == "lorenz63") c.system = SystemKind::lorenz63;
    else if (*v == "lorenz96") c.system = SystemKind::lorenz96;
    else if (*v == "kuramoto") c.system = SystemKind::kuramoto;
    else if (*v == "random") c.system = SystemKind::random;
    else throw ConfigError("system.name", "unknown system '" + *v + "'");
  }
  if (c.system == SystemKind::lorenz96) c.n_x = 20;
  if (c.system == SystemKind::kuramoto) {
    c.n_x = 20;
    c.dt = 0.05;
    c.sigma2 = 0.01;
  }
  num("system.dt", c.dt);
  num("system.T", c.T);
  num("system.sigma2", c.sigma2);
  num("system.sigma", c.l63_sigma);
  num("system.rho", c.l63_rho);
  num("system.beta", c.l63_beta);
  num("system.n_x", c.n_x);
  num("system.forcing", c.forcing);
  num("system.coupling", c.coupling);
  num("system.eta_mean", c.eta_mean);
  num("system.eta_sd", c.eta_sd);
  num("system.burn_in", c.burn_in);
  num("system.prior_var", c.prior_var);
  num("system.sparsity", c.sparsity);
  if (c.system == SystemKind::lorenz63 && get("system.n_x") && c.n_x != 3)
    throw ConfigError("system.n_x", "lorenz63 has n_x = 3");

  if (auto v = get("fit.method")) {
    if (*v == "graphgrad") c.method = Method::graphgrad;
    else if (*v == "graphgrad-subgrad") c.method = Method::graphgrad_subgrad;
    else if (*v == "pmle") c.method = Method::pmle;
    else if (*v == "truemle") c.method = Method::truemle;
    else throw ConfigError("fit.method", "unknown method '" + *v + "'");
  }
  num("fit.d", c.d);
  num("fit.particles", c.particles);
  if (auto v = get("fit.batches"); v && *v != "auto") c.batches = detail::parse_value<int>("fit.batches", *v);
  num("fit.steps", c.steps);
  num("fit.lr", c.lr);
  if (auto v = get("fit.lambda")) {
    if (*v == "tune") c.lambda.reset();
    else c.lambda = detail::parse_value<double>("fit.lambda", *v);
  }
  num("fit.beta1", c.beta1);
  num("fit.beta2", c.beta2);
  if (auto v = get("fit.moment_group")) {
    if (*v == "matrix") c.moment_group = MomentGroup::matrix;
    else if (*v == "column") c.moment_group = MomentGroup::column;
    else if (*v == "element") c.moment_group = MomentGroup::element;
    else throw ConfigError("fit.moment_group", "expected matrix, column or element");
  }
  num("fit.retries", c.retries);
  if (auto v = get("fit.prefix_fallback")) c.prefix_fallback = detail::parse_bool("fit.prefix_fallback", *v);

  num("tune.T", c.tune_T);
  num("tune.iterations", c.tune_iterations);
  num("tune.log_lo", c.tune_log_lo);
  num("tune.log_hi", c.tune_log_hi);

  if (auto v = get("degeneracy.particles")) {
    c.probe_particles.clear();
    std::istringstream ls(*v);
    std::string item;
    while (std::getline(ls, item, ',')) {
      const auto b = item.find_first_not_of(' '), e = item.find_last_not_of(' ');
      if (b == std::string::npos) throw ConfigError("degeneracy.particles", "empty list entry");
      c.probe_particles.push_back(detail::parse_value<int>("degeneracy.particles", item.substr(b, e - b + 1)));
    }
  }
  num("degeneracy.systems", c.probe_systems);
  num("degeneracy.T", c.probe_T);

  num("evaluate.zero_tol", c.zero_tol);
  if (auto v = get("export.source")) c.graph_source = *v;
  if (auto v = get("export.per_monomial")) c.per_monomial = detail::parse_bool("export.per_monomial", *v);

  num("run.replicates", c.replicates);
  num("run.seed", c.seed);
  if (auto v = get("run.out")) c.out = *v;

  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot open " + path.string());
  return parse_config(is);
}

}  // namespace graphgrad::cli
