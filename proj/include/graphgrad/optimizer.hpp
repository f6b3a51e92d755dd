#pragma once

// Penalised maximum-likelihood fitting of transition parameters: Novograd
// updates on the negative particle-filter log-likelihood, L1 handled by a
// proximal soft-threshold or by a subgradient, over telescoping batches.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "graphgrad/errors.hpp"
#include "graphgrad/filter.hpp"
#include "graphgrad/metrics.hpp"
#include "graphgrad/parallel.hpp"
#include "graphgrad/polymodel.hpp"
#include "graphgrad/random.hpp"
#include "graphgrad/systems.hpp"

namespace graphgrad {

/// Elementwise sgn(c) max(|c| - alpha, 0).
inline Eigen::MatrixXd soft_threshold(const Eigen::MatrixXd& C, double alpha) {
  if (!(alpha >= 0.0)) throw UsageError("soft_threshold: alpha must be >= 0");
  return C.unaryExpr([alpha](double c) {
    const double m = std::abs(c) - alpha;
    return m > 0.0 ? std::copysign(m, c) : 0.0;
  });
}

inline Eigen::MatrixXd sign(const Eigen::MatrixXd& C) {
  return C.unaryExpr([](double c) { return c > 0.0 ? 1.0 : (c < 0.0 ? -1.0 : 0.0); });
}

/// Grouping over which the second moment is shared: one group for the whole
/// matrix, one per column (monomial), or one per entry.
enum class MomentGroup { matrix, column, element };

struct NovogradParams {
  double lr = 1e-3;
  double beta1 = 0.95;
  double beta2 = 0.25;
  double eps = 1e-8;
  double weight_decay = 0.0;
  MomentGroup group = MomentGroup::matrix;
};

/// The second moment is stored as its square root so that gradients near the
/// overflow threshold do not turn it into inf.
struct OptimizerState {
  Eigen::MatrixXd root_second_moment;  // sqrt(v) per entry, constant within a group
  Eigen::MatrixXd first_moment;
  long steps = 0;
  bool initialised = false;

  Eigen::MatrixXd second_moment() const { return root_second_moment.array().square().matrix(); }
};

namespace detail {

/// Per-entry group norm |g|_group, computed without overflow.
inline Eigen::MatrixXd grouped_norm(const Eigen::MatrixXd& g, MomentGroup group) {
  switch (group) {
    case MomentGroup::matrix: return Eigen::MatrixXd::Constant(g.rows(), g.cols(), g.stableNorm());
    case MomentGroup::column: {
      Eigen::RowVectorXd n(g.cols());
      for (Index j = 0; j < g.cols(); ++j) n(j) = g.col(j).stableNorm();
      return n.replicate(g.rows(), 1);
    }
    case MomentGroup::element: return g.cwiseAbs();
  }
  return {};
}

}  // namespace detail

/// One Novograd update on gradient `grad` of the loss being minimised, with
/// the second moment v shared within each group:
///   v = |g|^2 on the first nonzero gradient, then b2 v + (1 - b2) |g|^2
///   m = b1 m + g / (sqrt(v) + eps) + wd C
///   C <- C - lr m
/// The first moment is not damped by (1 - b1), so the first step is lr g / |g|.
/// A zero gradient before the first nonzero one leaves everything unchanged.
inline Eigen::MatrixXd novograd_step(OptimizerState& state, const Eigen::MatrixXd& C, const Eigen::MatrixXd& grad,
                                     const NovogradParams& p) {
  if (C.rows() != grad.rows() || C.cols() != grad.cols()) throw UsageError("novograd_step: shape mismatch");
  if (!grad.allFinite()) throw DomainError("novograd_step: non-finite gradient");
  if (!(p.lr > 0.0)) throw UsageError("novograd_step: learning rate must be positive");
  const Eigen::MatrixXd n = detail::grouped_norm(grad, p.group);
  if (!state.initialised) {
    if (grad.isZero(0.0)) return C;
    state.root_second_moment = n;
    state.first_moment = Eigen::MatrixXd::Zero(C.rows(), C.cols());
    state.initialised = true;
  } else {
    const double a = std::sqrt(p.beta2), b = std::sqrt(1.0 - p.beta2);
    state.root_second_moment = state.root_second_moment.binaryExpr(
        n, [a, b](double r, double x) { return std::hypot(a * r, b * x); });
  }
  Eigen::MatrixXd u = grad.array() / (state.root_second_moment.array() + p.eps);
  if (p.weight_decay != 0.0) u += p.weight_decay * C;
  state.first_moment = p.beta1 * state.first_moment + u;
  ++state.steps;
  return C - p.lr * state.first_moment;
}

/// Novograd applied to grad + lambda sgn(C).
inline Eigen::MatrixXd subgradient_step(OptimizerState& state, const Eigen::MatrixXd& C, const Eigen::MatrixXd& grad,
                                        const NovogradParams& p, double lambda) {
  if (!(lambda >= 0.0)) throw UsageError("subgradient_step: lambda must be >= 0");
  if (lambda == 0.0) return novograd_step(state, C, grad, p);
  return novograd_step(state, C, grad + lambda * sign(C), p);
}

enum class PenaltyMode { prox, subgradient, none };

inline std::string to_string(PenaltyMode m) {
  switch (m) {
    case PenaltyMode::prox: return "prox";
    case PenaltyMode::subgradient: return "subgradient";
    case PenaltyMode::none: return "none";
  }
  return "?";
}

inline PenaltyMode penalty_mode_from_string(const std::string& s) {
  if (s == "prox") return PenaltyMode::prox;
  if (s == "subgradient") return PenaltyMode::subgradient;
  if (s == "none") return PenaltyMode::none;
  throw UsageError("unknown penalty mode: " + s);
}

struct FitConfig {
  int batches = 1;          // B
  int steps_per_batch = 1;  // S
  double lambda = 0.0;
  int particles = 100;      // K
  std::uint64_t seed = 0;
  PenaltyMode penalty = PenaltyMode::prox;
  NovogradParams novograd;
  int retries = 1;               // fresh-substream retries per step
  bool prefix_fallback = false;  // after retries, fit on the longest finite prefix instead of abandoning the batch
  bool reset_optimizer_per_batch = false;
  // A step whose per-step log-likelihood falls to this floor counts as degenerate.
  double log_floor = -std::numeric_limits<double>::infinity();

  void validate() const {
    if (batches < 1) throw UsageError("B must be >= 1");
    if (steps_per_batch < 1) throw UsageError("S must be >= 1");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw UsageError("lambda must be finite and >= 0");
    if (!(novograd.lr > 0.0)) throw UsageError("learning rate must be positive");
    if (particles < 1) throw UsageError("K must be >= 1");
    if (retries < 0) throw UsageError("retries must be >= 0");
  }
};

inline int default_batches(long T) { return static_cast<int>((T + 9) / 10); }

/// Observation prefix length ceil(b T / B) for 1-based batch b.
inline long batch_length(long T, int B, int b) {
  return static_cast<long>((static_cast<std::int64_t>(b) * T + B - 1) / B);
}

struct DegeneracyEvent {
  int batch = 0;  // 1-based
  int step = 0;   // 1-based within the batch
  int attempt = 0;
  long t = 0;     // time index at which the filter collapsed
  std::string action;  // "retry", "prefix", "abort"
  std::string message;
};

struct FitReport {
  Eigen::MatrixXd theta;
  std::vector<double> loss_trace;  // negative log-likelihood per completed step
  std::vector<long> trace_lengths; // observations used for each trace entry
  std::vector<Eigen::MatrixXd> batch_snapshots;
  std::vector<DegeneracyEvent> events;
  std::vector<int> aborted_batches;
  double wall_seconds = 0.0;
  long steps_completed = 0;
};

namespace detail {

struct StepOutcome {
  bool ok = false;
  double nll = 0.0;
  long used = 0;
  Eigen::MatrixXd grad;
};

/// Value and gradient for one optimisation step, following the retry and
/// prefix-fallback policy. Records events; returns ok=false if no prefix works.
template <Transition Tr>
StepOutcome robust_gradient(const Tr& tr, const Eigen::MatrixXd& theta, const FilterModel& model,
                            const Eigen::MatrixXd& y, const FitConfig& cfg, std::uint64_t run, int batch, int step,
                            std::vector<DegeneracyEvent>& events) {
  const FilterOptions opt{cfg.particles, false};
  long len = y.rows();
  long last_t = len;
  for (int attempt = 0;; ++attempt) {
    FilterStreams rng = FilterStreams::make(cfg.seed, run, static_cast<std::uint64_t>(attempt));
    try {
      auto vg = value_and_gradient(tr, theta, model, y.topRows(len), opt, rng);
      for (Index t = 0; t < vg.step_log_likelihood.size(); ++t)
        if (!(vg.step_log_likelihood(t) > cfg.log_floor))
          throw DegeneracyError("per-step likelihood below floor", static_cast<long>(t + 1));
      return {true, -vg.log_likelihood, len, -vg.gradient};
    } catch (const DegeneracyError& e) {
      last_t = std::clamp<long>(e.step(), 1, len);
      const bool gradient_only = std::string(e.what()).rfind("non-finite gradient", 0) == 0;
      std::string action;
      if (attempt < cfg.retries) {
        action = "retry";
      } else if (cfg.prefix_fallback) {
        // Longest prefix that stayed finite; halve when only the gradient blew up.
        const long next = gradient_only ? len / 2 : std::min(len - 1, last_t - 1);
        if (next >= 1) {
          action = "prefix";
          len = next;
        } else {
          action = "abort";
        }
      } else {
        action = "abort";
      }
      events.push_back({batch, step, attempt, last_t, action, e.what()});
      if (action == "abort") return {};
    }
  }
}

}  // namespace detail

/// Optional per-step observer: (batch, step, nll).
using StepCallback = std::function<void(int, int, double)>;

/// S steps of {filter gradient -> update -> penalty} on one observation block,
/// continuing from `theta` and `state`. Returns false if a step had to be abandoned.
template <Transition Tr>
bool s_graphgrad(const Tr& tr, Eigen::MatrixXd& theta, OptimizerState& state, const FilterModel& model,
                 const Eigen::MatrixXd& y, const FitConfig& cfg, int batch, FitReport& report,
                 const StepCallback& cb = {}) {
  const double lr = cfg.novograd.lr;
  for (int s = 1; s <= cfg.steps_per_batch; ++s) {
    const auto run = static_cast<std::uint64_t>(batch - 1) * static_cast<std::uint64_t>(cfg.steps_per_batch) +
                     static_cast<std::uint64_t>(s - 1);
    auto out = detail::robust_gradient(tr, theta, model, y, cfg, run, batch, s, report.events);
    if (!out.ok) return false;
    switch (cfg.penalty) {
      case PenaltyMode::prox:
        theta = soft_threshold(novograd_step(state, theta, out.grad, cfg.novograd), lr * cfg.lambda);
        break;
      case PenaltyMode::subgradient:
        theta = subgradient_step(state, theta, out.grad, cfg.novograd, cfg.lambda);
        break;
      case PenaltyMode::none:
        theta = novograd_step(state, theta, out.grad, cfg.novograd);
        break;
    }
    report.loss_trace.push_back(out.nll);
    report.trace_lengths.push_back(out.used);
    ++report.steps_completed;
    if (cb) cb(batch, s, out.nll);
  }
  return true;
}

/// Telescoping-batch fit from theta0: batch b uses y_{1:ceil(bT/B)} and warm
/// starts from the previous batch's estimate. Throws DegeneracyError if every
/// batch is abandoned.
template <Transition Tr>
FitReport b_graphgrad(const Tr& tr, const Eigen::MatrixXd& theta0, const FilterModel& model,
                      const Eigen::MatrixXd& y, const FitConfig& cfg, const StepCallback& cb = {}) {
  cfg.validate();
  const long T = y.rows();
  if (T < cfg.batches) throw UsageError("b_graphgrad: T must be >= B");
  const auto start = std::chrono::steady_clock::now();
  FitReport report;
  Eigen::MatrixXd theta = theta0;
  OptimizerState state;
  for (int b = 1; b <= cfg.batches; ++b) {
    if (cfg.reset_optimizer_per_batch) state = OptimizerState{};
    const long len = batch_length(T, cfg.batches, b);
    // An abandoned batch keeps the last iterate that completed a step.
    if (!s_graphgrad(tr, theta, state, model, y.topRows(len), cfg, b, report, cb)) report.aborted_batches.push_back(b);
    report.batch_snapshots.push_back(theta);
  }
  report.theta = theta;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (static_cast<int>(report.aborted_batches.size()) == cfg.batches)
    throw DegeneracyError("every batch was abandoned", report.events.empty() ? 0 : report.events.back().t);
  return report;
}

/// B-GraphGrad over the deg-lex polynomial basis with C0 ~ U(-1, 1) drawn from
/// the coefficient stream of cfg.seed.
inline FitReport fit_polynomial(const FilterModel& model, const Eigen::MatrixXd& y, int n_x, int d,
                                const FitConfig& cfg, const StepCallback& cb = {}) {
  const PolynomialTransition tr{generate_degree_matrix(n_x, d)};
  Rng rng = make_stream(cfg.seed, Stream::coefficients);
  const CoefficientMatrix C0 = init_coefficients(n_x, tr.degrees.monomial_count(), rng);
  return b_graphgrad(tr, C0, model, y, cfg, cb);
}

/// Penalty-free variant of fit_polynomial; lambda is ignored.
inline FitReport pmle(const FilterModel& model, const Eigen::MatrixXd& y, int n_x, int d, FitConfig cfg,
                      const StepCallback& cb = {}) {
  cfg.penalty = PenaltyMode::none;
  cfg.lambda = 0.0;
  return fit_polynomial(model, y, n_x, d, cfg, cb);
}

struct TuneConfig {
  int n_x = 3;
  int d = 2;
  double dt = 0.025;
  double sparsity = 0.75;
  long T = 50;
  double log_lo = -5.0;
  double log_hi = 2.0;
  int iterations = 10;
  std::uint64_t seed = 0;
  int max_redraws = 100;
};

struct TuneProbe {
  int iteration = 0;
  double log_lambda = 0.0;
  double f1 = 0.0;
};

struct TuneReport {
  double lambda = 1.0;
  double log_lambda = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<TuneProbe> probes;
  int redraws = 0;
};

/// Searches l in [log_lo, log_hi] for lambda = 10^l maximising support F1 on
/// a random sparse system. Each iteration scores the quarter points of the
/// current interval with the same data and seeds and keeps the half holding
/// the better one; on a tie the middle half is kept. Returns 10^midpoint.
inline TuneReport tune_lambda(const TuneConfig& tc, FitConfig fit, int jobs = 1) {
  if (tc.iterations < 0) throw UsageError("tune_lambda: iterations must be >= 0");
  if (!(tc.log_lo < tc.log_hi)) throw UsageError("tune_lambda: empty interval");
  TuneReport rep;
  Rng sys_rng = make_stream(tc.seed, Stream::system);
  RandomSystem sys;
  Trajectory traj;
  for (;; ++rep.redraws) {
    if (rep.redraws > tc.max_redraws) throw SimulationError("tune_lambda: no stable random system", tc.T);
    sys = random_sparse_system(tc.n_x, tc.d, tc.sparsity, tc.dt, sys_rng);
    Rng sim = make_stream(tc.seed, Stream::simulation, static_cast<std::uint64_t>(rep.redraws));
    try {
      traj = simulate(sys.spec, tc.T, sim);
      break;
    } catch (const SimulationError&) {
    }
  }
  const FilterModel model = FilterModel::from_spec(sys.spec);
  const CoefficientMatrix& truth = sys.spec.polynomial().coefficients;
  fit.seed = tc.seed;
  fit.penalty = PenaltyMode::prox;
  if (fit.batches > tc.T) fit.batches = static_cast<int>(tc.T);
  auto score = [&](double l) {
    FitConfig c = fit;
    c.lambda = std::pow(10.0, l);
    try {
      const FitReport r = fit_polynomial(model, traj.observations, tc.n_x, tc.d, c);
      return support_metrics(r.theta, truth).f1;
    } catch (const DegeneracyError&) {
      return 0.0;
    }
  };
  double lo = tc.log_lo, hi = tc.log_hi;
  for (int it = 1; it <= tc.iterations; ++it) {
    const double q1 = lo + 0.25 * (hi - lo);
    const double q3 = lo + 0.75 * (hi - lo);
    double f[2] = {0.0, 0.0};
    const double pts[2] = {q1, q3};
    parallel_for(2, jobs, [&](std::size_t i) { f[i] = score(pts[i]); });
    rep.probes.push_back({it, q1, f[0]});
    rep.probes.push_back({it, q3, f[1]});
    const double mid = 0.5 * (lo + hi);
    if (f[0] > f[1]) hi = mid;
    else if (f[1] > f[0]) lo = mid;
    else {
      lo = q1;
      hi = q3;
    }
  }
  rep.lo = lo;
  rep.hi = hi;
  rep.log_lambda = 0.5 * (lo + hi);
  rep.lambda = std::pow(10.0, rep.log_lambda);
  return rep;
}

// Serialisation.

inline nlohmann::json to_json(const DegeneracyEvent& e) {
  return {{"batch", e.batch}, {"step", e.step}, {"attempt", e.attempt},
          {"t", e.t},         {"action", e.action}, {"message", e.message}};
}

/// Report without wall time (kept separate so payloads are reproducible).
inline nlohmann::json to_json(const FitReport& r) {
  nlohmann::json j;
  j["theta"] = matrix_to_json(r.theta);
  j["steps_completed"] = r.steps_completed;
  j["aborted_batches"] = r.aborted_batches;
  j["final_loss"] = r.loss_trace.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.loss_trace.back());
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& e : r.events) ev.push_back(to_json(e));
  j["degeneracy_events"] = ev;
  nlohmann::json snaps = nlohmann::json::array();
  for (const auto& s : r.batch_snapshots) snaps.push_back(matrix_to_json(s));
  j["batch_snapshots"] = snaps;
  return j;
}

inline nlohmann::json to_json(const TuneReport& r) {
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& p : r.probes) probes.push_back({{"iteration", p.iteration}, {"log_lambda", p.log_lambda}, {"f1", p.f1}});
  return {{"lambda", r.lambda}, {"log_lambda", r.log_lambda}, {"interval", {r.lo, r.hi}},
          {"redraws", r.redraws}, {"probes", probes}};
}

inline void write_loss_trace_csv(std::ostream& os, const FitReport& r) {
  os << "step,observations,neg_log_likelihood\n";
  os.precision(17);
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i)
    os << (i + 1) << "," << r.trace_lengths[i] << "," << r.loss_trace[i] << "\n";
}

}  // namespace graphgrad
