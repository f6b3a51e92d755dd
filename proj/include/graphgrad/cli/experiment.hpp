#pragma once

// Replicate-level experiment pipeline shared by the command-line tool and the
// acceptance suite: dataset generation, fitting, evaluation and the
// degeneracy probe. Replicate r of a run with base seed s uses seed s + r.

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "graphgrad/cli/config.hpp"
#include "graphgrad/filter.hpp"
#include "graphgrad/metrics.hpp"
#include "graphgrad/optimizer.hpp"
#include "graphgrad/parallel.hpp"
#include "graphgrad/polymodel.hpp"
#include "graphgrad/systems.hpp"

namespace graphgrad::cli {

struct Dataset {
  SsmSpec spec;            // generating model
  Trajectory trajectory;
  std::uint64_t seed = 0;
  int redraws = 0;         // discarded divergent simulations
};

/// Polynomial ground truth in the degree-d basis (empty for Kuramoto, whose
/// dynamics are not polynomial).
inline std::optional<PolynomialModel> truth_model(const Dataset& ds) {
  if (!ds.spec.is_polynomial()) return std::nullopt;
  return ds.spec.polynomial();
}

inline Dataset make_dataset(const ExperimentConfig& c, std::uint64_t seed, std::optional<long> T_override = {}) {
  const long T = T_override ? *T_override : c.T;
  Dataset ds;
  ds.seed = seed;
  switch (c.system) {
    case SystemKind::lorenz63:
    case SystemKind::lorenz96: {
      const PolynomialModel truth = c.system == SystemKind::lorenz63
                                        ? lorenz63_truth({c.l63_sigma, c.l63_rho, c.l63_beta}, c.dt, c.d)
                                        : lorenz96_truth(c.n_x, c.forcing, c.dt, c.d);
      ds.spec = polynomial_ssm(truth.coefficients, truth.degrees, c.dt, c.sigma2, unit_first(c.state_dim()));
      StableTrajectory st = simulate_stable(ds.spec, T, seed);
      ds.trajectory = std::move(st.trajectory);
      ds.redraws = st.redraws;
      break;
    }
    case SystemKind::random: {
      Rng sys_rng = make_stream(seed, Stream::system);
      for (int r = 0;; ++r) {
        if (r > 1000) throw SimulationError("no stable random system after redraws", T);
        RandomSystem sys = random_sparse_system(c.n_x, c.d, c.sparsity, c.dt, sys_rng);
        Rng sim = make_stream(seed, Stream::simulation, 0, static_cast<std::uint64_t>(r));
        try {
          ds.trajectory = simulate(sys.spec, T, sim, seed);
          ds.spec = std::move(sys.spec);
          ds.redraws = r;
          break;
        } catch (const SimulationError&) {
        }
      }
      break;
    }
    case SystemKind::kuramoto: {
      KuramotoParams p;
      p.n_x = c.n_x;
      p.coupling = c.coupling;
      p.eta_mean = c.eta_mean;
      p.eta_sd = c.eta_sd;
      p.dt = c.dt;
      p.sigma = std::sqrt(c.sigma2);
      p.burn_in_time = c.burn_in;
      p.prior_var = c.prior_var;
      Rng rng = make_stream(seed, Stream::simulation);
      KuramotoRun run = kuramoto_simulate(p, T, rng, seed);
      ds.spec = std::move(run.spec);
      ds.trajectory = std::move(run.trajectory);
      break;
    }
  }
  return ds;
}

struct FitOutcome {
  std::uint64_t seed = 0;
  Method method = Method::graphgrad;
  double lambda = 0.0;
  Eigen::MatrixXd theta;              // C for polynomial fits, [eta; K] for truemle
  std::optional<DegreeMatrix> degrees;
  FitReport report;
};

/// Fits one replicate. pmle and truemle ignore lambda.
inline FitOutcome fit_dataset(const ExperimentConfig& c, const Dataset& ds, double lambda) {
  const FilterModel model = FilterModel::from_spec(ds.spec);
  FitOutcome out;
  out.seed = ds.seed;
  out.method = c.method;
  FitConfig fc = c.fit_config(ds.seed, lambda);
  const Eigen::MatrixXd& y = ds.trajectory.observations;
  if (c.method == Method::truemle) {
    fc.penalty = PenaltyMode::none;
    fc.lambda = 0.0;
    const KuramotoTransition tr{ds.spec.dt};
    Rng rng = make_stream(ds.seed, Stream::coefficients);
    const Eigen::MatrixXd theta0 = init_coefficients(ds.spec.state_dim() + 1, 1, rng);
    out.report = b_graphgrad(tr, theta0, model, y, fc);
  } else {
    const int n_x = static_cast<int>(ds.spec.state_dim());
    out.report = c.method == Method::pmle ? pmle(model, y, n_x, c.d, fc) : fit_polynomial(model, y, n_x, c.d, fc);
    out.degrees = generate_degree_matrix(n_x, c.d);
  }
  out.lambda = fc.lambda;
  out.theta = out.report.theta;
  return out;
}

/// Tunes lambda when the config asks for it and the method uses a penalty.
inline std::optional<TuneReport> resolve_lambda(const ExperimentConfig& c, int jobs, double& lambda) {
  if (c.method == Method::pmle || c.method == Method::truemle) {
    lambda = 0.0;
    return std::nullopt;
  }
  if (c.lambda) {
    lambda = *c.lambda;
    return std::nullopt;
  }
  TuneReport t = tune_lambda(c.tune_config(), c.fit_config(c.seed, 0.0), jobs);
  lambda = t.lambda;
  return t;
}

struct Evaluation {
  std::uint64_t seed = 0;
  std::optional<SupportReport> support;  // polynomial truth
  std::optional<double> nrmse;           // Kuramoto
};

/// Posterior-mean path of a filter run, or nullopt if the filter collapses.
template <Transition Tr>
std::optional<Eigen::MatrixXd> filter_means(const Tr& tr, const Eigen::MatrixXd& theta, const FilterModel& m,
                                            const Eigen::MatrixXd& y, int K, std::uint64_t seed) {
  FilterStreams rng = FilterStreams::make(seed, 0, 0);
  try {
    return sir_filter(tr, theta, m, y, FilterOptions{K, false}, rng).posterior_means;
  } catch (const DegeneracyError&) {
    return std::nullopt;
  }
}

/// Normalised state-recovery error of a Kuramoto fit: circular RMSE of the
/// fitted model's posterior means against the latent phases, divided by that
/// of the generating model. A collapsed filter scores +inf.
inline double kuramoto_nrmse(const ExperimentConfig& c, const Dataset& ds, const FitOutcome& fit) {
  const FilterModel model = FilterModel::from_spec(ds.spec);
  const Eigen::MatrixXd& y = ds.trajectory.observations;
  const Eigen::MatrixXd truth = ds.trajectory.states.bottomRows(y.rows());
  const KuramotoTransition kt{ds.spec.dt};
  const auto ref = filter_means(kt, ds.spec.kuramoto().theta(), model, y, c.particles, ds.seed);
  if (!ref) throw DegeneracyError("reference filter collapsed", y.rows());
  std::optional<Eigen::MatrixXd> est;
  if (fit.degrees) est = filter_means(PolynomialTransition{*fit.degrees}, fit.theta, model, y, c.particles, ds.seed);
  else est = filter_means(kt, fit.theta, model, y, c.particles, ds.seed);
  if (!est) return std::numeric_limits<double>::infinity();
  return nrmse(*est, *ref, truth, /*circular=*/true);
}

inline Evaluation evaluate_fit(const ExperimentConfig& c, const Dataset& ds, const FitOutcome& fit) {
  Evaluation e;
  e.seed = ds.seed;
  if (const auto truth = truth_model(ds)) {
    e.support = support_metrics(fit.theta, truth->coefficients, c.zero_tol);
  } else {
    e.nrmse = kuramoto_nrmse(c, ds, fit);
  }
  return e;
}

struct ReplicateResult {
  Dataset dataset;
  FitOutcome fit;
  Evaluation evaluation;
};

/// Simulate, fit and evaluate every replicate; results are ordered by seed.
inline std::vector<ReplicateResult> run_replicates(const ExperimentConfig& c, double lambda, int jobs) {
  std::vector<ReplicateResult> out(static_cast<std::size_t>(c.replicates));
  parallel_for(out.size(), jobs, [&](std::size_t r) {
    ReplicateResult& res = out[r];
    res.dataset = make_dataset(c, c.seed + r);
    res.fit = fit_dataset(c, res.dataset, lambda);
    res.evaluation = evaluate_fit(c, res.dataset, res.fit);
  });
  return out;
}

struct ProbeRow {
  int particles = 0;
  double mean_steps = 0.0;
  std::size_t n = 0;
};

/// Steps before the per-step likelihood reaches the single-precision floor,
/// for a uniformly random C in the degree-d basis, on the system drawn from `seed`.
inline long degeneracy_probe(const ExperimentConfig& c, std::uint64_t seed, int K) {
  const Dataset ds = make_dataset(c, seed, c.probe_T);
  const FilterModel model = FilterModel::from_spec(ds.spec);
  const int n_x = static_cast<int>(ds.spec.state_dim());
  const PolynomialTransition tr{generate_degree_matrix(n_x, c.d)};
  Rng rng = make_stream(seed, Stream::probe);
  const CoefficientMatrix C = init_coefficients(n_x, tr.degrees.monomial_count(), rng);
  FilterStreams fs = FilterStreams::make(seed, static_cast<std::uint64_t>(K), 0);
  return steps_before_degeneracy(tr, C, model, ds.trajectory.observations, K, fs);
}

/// Mean probe count over probe_systems systems (seeds s, s+1, ...) for each K.
inline std::vector<ProbeRow> degeneracy_sweep(const ExperimentConfig& c, int jobs) {
  std::vector<ProbeRow> rows;
  for (int K : c.probe_particles) {
    std::vector<long> steps(static_cast<std::size_t>(c.probe_systems));
    parallel_for(steps.size(), jobs, [&](std::size_t i) { steps[i] = degeneracy_probe(c, c.seed + i, K); });
    double sum = 0.0;
    for (long s : steps) sum += static_cast<double>(s);
    rows.push_back({K, sum / static_cast<double>(steps.size()), steps.size()});
  }
  return rows;
}

}  // namespace graphgrad::cli
