#pragma once

// Subcommands of the graphgrad tool. Every output lives at a fixed path under
// the output directory and carries the config hash and seed; wall-clock
// timings go to separate timing.json files so all other payloads are
// byte-identical across reruns.
//
// Layout under <out>:
//   simulate/seed_<s>/{trajectory.csv, manifest.json}
//   tune/lambda.json
//   fit/<method>/seed_<s>/{coefficients.json, loss_trace.csv, report.json, manifest.json, timing.json}
//   fit/<method>/{lambda.json, timing.json}
//   evaluate/<method>/{metrics.csv, aggregate.csv, aggregate.json}
//   graph/{graph.dot, monomial_<j>.dot}
//   degeneracy/degeneracy.csv

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "graphgrad/cli/config.hpp"
#include "graphgrad/cli/experiment.hpp"

namespace graphgrad::cli {

namespace fs = std::filesystem;

/// Runtime failure of a command (missing artifacts, unreadable files).
class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunContext {
  ExperimentConfig config;
  std::string hash;
  int jobs = 1;
  fs::path out;

  static RunContext make(ExperimentConfig c, int jobs) {
    RunContext ctx;
    ctx.hash = config_hash(c);
    ctx.out = c.out;
    ctx.jobs = jobs < 1 ? 1 : jobs;
    ctx.config = std::move(c);
    return ctx;
  }

  fs::path seed_dir(const std::string& stage, std::uint64_t seed) const {
    return out / stage / ("seed_" + std::to_string(seed));
  }
  fs::path method_dir() const { return out / "fit" / to_string(config.method); }
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CommandError("cannot write " + path.string());
  os << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw CommandError("missing artifact " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw CommandError("cannot parse " + path.string() + ": " + e.what());
  }
}

inline std::string csv_stamp(const RunContext& ctx, std::uint64_t seed) {
  return "# config_hash=" + ctx.hash + " seed=" + std::to_string(seed) + "\n";
}

inline nlohmann::json stamp(const RunContext& ctx, std::uint64_t seed) {
  return {{"config_hash", ctx.hash}, {"seed", seed}};
}

inline std::vector<std::uint64_t> replicate_seeds(const ExperimentConfig& c) {
  std::vector<std::uint64_t> s;
  for (int r = 0; r < c.replicates; ++r) s.push_back(c.seed + static_cast<std::uint64_t>(r));
  return s;
}

/// The stored trajectory for `seed` if simulate has written one, else a fresh simulation.
inline Dataset load_or_make_dataset(const RunContext& ctx, std::uint64_t seed) {
  Dataset ds = make_dataset(ctx.config, seed);
  const fs::path p = ctx.seed_dir("simulate", seed) / "trajectory.csv";
  if (fs::exists(p)) {
    std::ifstream is(p);
    Trajectory stored = read_trajectory_csv(is);
    if (stored.observations.rows() != ds.trajectory.observations.rows() ||
        stored.observations.cols() != ds.trajectory.observations.cols())
      throw CommandError(p.string() + " does not match the configured system and T");
    stored.seed = seed;
    ds.trajectory = std::move(stored);
  }
  return ds;
}

inline nlohmann::json system_json(const Dataset& ds) {
  nlohmann::json j;
  j["state_dim"] = ds.spec.state_dim();
  j["dt"] = ds.spec.dt;
  j["redraws"] = ds.redraws;
  if (ds.spec.is_polynomial()) {
    j["truth"] = to_json(ds.spec.polynomial().coefficients, ds.spec.polynomial().degrees);
  } else {
    const auto& k = ds.spec.kuramoto();
    j["natural_frequencies"] = std::vector<double>(k.natural_frequencies.data(),
                                                   k.natural_frequencies.data() + k.natural_frequencies.size());
    j["coupling"] = k.coupling;
  }
  return j;
}

inline nlohmann::json theta_json(const FitOutcome& f) {
  if (f.degrees) return to_json(f.theta, *f.degrees);
  nlohmann::json j;
  j["kuramoto_theta"] = std::vector<double>(f.theta.data(), f.theta.data() + f.theta.size());
  return j;
}

inline std::optional<FitOutcome> read_fit(const RunContext& ctx, std::uint64_t seed) {
  const nlohmann::json j = read_json(ctx.seed_dir("fit/" + to_string(ctx.config.method), seed) / "coefficients.json");
  FitOutcome f;
  f.seed = seed;
  f.method = ctx.config.method;
  try {
    if (j.contains("kuramoto_theta")) {
      const auto v = j.at("kuramoto_theta").get<std::vector<double>>();
      f.theta = Eigen::Map<const Eigen::MatrixXd>(v.data(), static_cast<Index>(v.size()), 1);
    } else {
      PolynomialModel p = polynomial_from_json(j);
      f.theta = std::move(p.coefficients);
      f.degrees = std::move(p.degrees);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CommandError("malformed coefficient file for seed " + std::to_string(seed) + ": " + e.what());
  }
  return f;
}

}  // namespace detail

inline void cmd_simulate(const RunContext& ctx) {
  const auto seeds = detail::replicate_seeds(ctx.config);
  std::vector<Dataset> data(seeds.size());
  parallel_for(seeds.size(), ctx.jobs, [&](std::size_t i) { data[i] = make_dataset(ctx.config, seeds[i]); });
  for (const Dataset& ds : data) {
    const fs::path dir = ctx.seed_dir("simulate", ds.seed);
    std::ostringstream csv;
    csv << detail::csv_stamp(ctx, ds.seed);
    write_trajectory_csv(csv, ds.trajectory);
    detail::write_text(dir / "trajectory.csv", csv.str());
    nlohmann::json m = detail::stamp(ctx, ds.seed);
    m["command"] = "simulate";
    m["system"] = to_string(ctx.config.system);
    m["T"] = ds.trajectory.observations.rows();
    m["state_rows"] = ds.trajectory.states.rows();
    m["observation_rows"] = ds.trajectory.observations.rows();
    m["model"] = detail::system_json(ds);
    detail::write_json(dir / "manifest.json", m);
  }
}

inline TuneReport cmd_tune(const RunContext& ctx) {
  TuneReport t = tune_lambda(ctx.config.tune_config(), ctx.config.fit_config(ctx.config.seed, 0.0), ctx.jobs);
  nlohmann::json j = detail::stamp(ctx, ctx.config.seed);
  j["tune"] = to_json(t);
  detail::write_json(ctx.out / "tune" / "lambda.json", j);
  return t;
}

inline void cmd_fit(const RunContext& ctx) {
  const ExperimentConfig& c = ctx.config;
  double lambda = 0.0;
  const std::optional<TuneReport> tuned = resolve_lambda(c, ctx.jobs, lambda);
  const auto seeds = detail::replicate_seeds(c);
  std::vector<FitOutcome> fits(seeds.size());
  parallel_for(seeds.size(), ctx.jobs, [&](std::size_t i) {
    const Dataset ds = detail::load_or_make_dataset(ctx, seeds[i]);
    try {
      fits[i] = fit_dataset(c, ds, lambda);
    } catch (const DegeneracyError& e) {
      nlohmann::json log = detail::stamp(ctx, seeds[i]);
      log["error"] = e.what();
      const fs::path path = ctx.seed_dir("fit/" + to_string(c.method), seeds[i]) / "degeneracy.json";
      detail::write_json(path, log);
      throw CommandError(std::string("fit failed: ") + e.what() + "; degeneracy log: " + path.string());
    }
  });

  nlohmann::json lj = detail::stamp(ctx, c.seed);
  lj["method"] = to_string(c.method);
  lj["lambda"] = lambda;
  lj["tuned"] = tuned.has_value();
  if (tuned) lj["tune"] = to_json(*tuned);
  detail::write_json(ctx.method_dir() / "lambda.json", lj);

  nlohmann::json timing = nlohmann::json::object();
  for (const FitOutcome& f : fits) {
    const fs::path dir = ctx.seed_dir("fit/" + to_string(c.method), f.seed);
    nlohmann::json coef = detail::theta_json(f);
    coef["config_hash"] = ctx.hash;
    coef["seed"] = f.seed;
    detail::write_json(dir / "coefficients.json", coef);
    std::ostringstream trace;
    trace << detail::csv_stamp(ctx, f.seed);
    write_loss_trace_csv(trace, f.report);
    detail::write_text(dir / "loss_trace.csv", trace.str());
    nlohmann::json rep = detail::stamp(ctx, f.seed);
    rep["method"] = to_string(f.method);
    rep["lambda"] = f.lambda;
    rep["lambda_tuned"] = tuned.has_value();
    rep["report"] = to_json(f.report);
    detail::write_json(dir / "report.json", rep);
    nlohmann::json man = detail::stamp(ctx, f.seed);
    man["command"] = "fit";
    man["system"] = to_string(c.system);
    man["method"] = to_string(f.method);
    man["replicate_seeds"] = seeds;
    detail::write_json(dir / "manifest.json", man);
    detail::write_json(dir / "timing.json", {{"wall_seconds", f.report.wall_seconds}});
    timing[std::to_string(f.seed)] = f.report.wall_seconds;
  }
  detail::write_json(ctx.method_dir() / "timing.json", timing);
}

inline void cmd_evaluate(const RunContext& ctx) {
  const ExperimentConfig& c = ctx.config;
  const auto seeds = detail::replicate_seeds(c);
  std::vector<Evaluation> evals(seeds.size());
  std::vector<std::optional<FitOutcome>> fits(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) fits[i] = detail::read_fit(ctx, seeds[i]);
  parallel_for(seeds.size(), ctx.jobs, [&](std::size_t i) {
    const Dataset ds = detail::load_or_make_dataset(ctx, seeds[i]);
    evals[i] = evaluate_fit(c, ds, *fits[i]);
  });

  const fs::path dir = ctx.out / "evaluate" / to_string(c.method);
  std::ostringstream rows, agg;
  rows << detail::csv_stamp(ctx, c.seed);
  agg << detail::csv_stamp(ctx, c.seed);
  rows.precision(10);
  agg.precision(10);
  nlohmann::json aj = detail::stamp(ctx, c.seed);
  aj["method"] = to_string(c.method);
  aj["replicates"] = seeds.size();
  if (c.system == SystemKind::kuramoto) {
    rows << "seed,method,T,nrmse\n";
    std::vector<double> v;
    for (const Evaluation& e : evals) {
      rows << e.seed << "," << to_string(c.method) << "," << c.T << "," << *e.nrmse << "\n";
      v.push_back(*e.nrmse);
    }
    const Interval iv = aggregate(v);
    agg << "method,T,nrmse_mean,nrmse_half_width,n\n"
        << to_string(c.method) << "," << c.T << "," << iv.mean << "," << iv.half_width << "," << iv.n << "\n";
    aj["nrmse"] = to_json(iv);
  } else {
    rows << "seed," << metric_csv_header() << ",rmse_full\n";
    std::vector<SupportReport> reps;
    for (const Evaluation& e : evals) {
      std::ostringstream row;
      write_metric_row(row, {to_string(c.method), c.T, c.sigma2, c.d, *e.support});
      std::string line = row.str();
      line.pop_back();
      rows << e.seed << "," << line << "," << e.support->rmse_full << "\n";
      reps.push_back(*e.support);
    }
    const auto a = aggregate(reps);
    agg << "method,T,sigma2,d,n";
    for (const auto& [name, iv] : a) agg << "," << name << "_mean," << name << "_half_width";
    agg << "\n" << to_string(c.method) << "," << c.T << "," << c.sigma2 << "," << c.d << "," << reps.size();
    for (const auto& [name, iv] : a) agg << "," << iv.mean << "," << iv.half_width;
    agg << "\n";
    nlohmann::json m;
    for (const auto& [name, iv] : a) m[name] = to_json(iv);
    aj["metrics"] = m;
    aj["conventions"] = kMetricConventions;
  }
  detail::write_text(dir / "metrics.csv", rows.str());
  detail::write_text(dir / "aggregate.csv", agg.str());
  detail::write_json(dir / "aggregate.json", aj);
}

/// DOT graph of a coefficient matrix: the fit of the base seed, the truth of
/// the configured system, or a coefficient JSON file named by export.source.
inline void cmd_export_graph(const RunContext& ctx) {
  const ExperimentConfig& c = ctx.config;
  PolynomialModel model;
  if (c.graph_source == "fit") {
    const auto f = detail::read_fit(ctx, c.seed);
    if (!f->degrees) throw CommandError("export-graph needs a polynomial fit");
    model = {f->theta, *f->degrees};
  } else if (c.graph_source == "truth") {
    const Dataset ds = make_dataset(c, c.seed, 1);
    const auto t = truth_model(ds);
    if (!t) throw CommandError("the configured system has no polynomial truth");
    model = *t;
  } else {
    const nlohmann::json j = detail::read_json(c.graph_source);
    try {
      model = polynomial_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw CommandError("malformed coefficient file " + c.graph_source + ": " + e.what());
    } catch (const UsageError& e) {
      throw CommandError("malformed coefficient file " + c.graph_source + ": " + e.what());
    }
  }
  const fs::path dir = ctx.out / "graph";
  const std::string head = "// config_hash=" + ctx.hash + " seed=" + std::to_string(c.seed) + "\n";
  const AdjacencyMatrix A = adjacency(model.coefficients, model.degrees, c.zero_tol);
  detail::write_text(dir / "graph.dot", head + to_dot(A));
  if (c.per_monomial) {
    const auto graphs = per_monomial_graphs(model.coefficients, model.degrees, c.zero_tol);
    for (std::size_t j = 0; j < graphs.size(); ++j)
      detail::write_text(dir / ("monomial_" + std::to_string(j + 1) + ".dot"),
                         head + "// monomial " + model.degrees.label(static_cast<Index>(j)) + "\n" +
                             to_dot(graphs[j], "M" + std::to_string(j + 1)));
  }
}

inline std::vector<ProbeRow> cmd_degeneracy(const RunContext& ctx) {
  const auto rows = degeneracy_sweep(ctx.config, ctx.jobs);
  std::ostringstream os;
  os << detail::csv_stamp(ctx, ctx.config.seed);
  os.precision(10);
  os << "K,mean_steps,n\n";
  for (const auto& r : rows) os << r.particles << "," << r.mean_steps << "," << r.n << "\n";
  detail::write_text(ctx.out / "degeneracy" / "degeneracy.csv", os.str());
  return rows;
}

}  // namespace graphgrad::cli
