#pragma once

// Bootstrap SIR particle filter and its stop-gradient differentiable variant.
// Both run the same value kernels in the same order, so under shared random
// streams they produce identical particles, ancestors, weights and estimates.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "graphgrad/autodiff.hpp"
#include "graphgrad/errors.hpp"
#include "graphgrad/polymodel.hpp"
#include "graphgrad/random.hpp"
#include "graphgrad/systems.hpp"

namespace graphgrad {

/// A transition mean parameterised by theta, evaluable on values and on a tape.
template <class T>
concept Transition = requires(const T& tr, const Eigen::MatrixXd& m, ad::Tape& tape, ad::Var v) {
  { tr.mean(m, m) } -> std::convertible_to<Eigen::MatrixXd>;
  { tr.mean(tape, v, v) } -> std::same_as<ad::Var>;
};

/// log(smallest normal float), used as the single-precision underflow proxy.
inline constexpr double kSinglePrecisionLogFloor = -87.0;

/// Everything except the transition mean: noise factors and the observation model.
struct FilterModel {
  Eigen::MatrixXd state_noise_factor;  // L_v with L_v L_v^T = effective state covariance
  Eigen::MatrixXd obs_matrix;          // H
  Eigen::MatrixXd obs_precision;       // effective obs covariance inverse
  double obs_log_norm = 0.0;           // -0.5 log det(2 pi Sigma_r)
  Eigen::VectorXd init_mean;
  Eigen::MatrixXd init_factor;
  bool wrap_phases = false;

  Index state_dim() const { return init_mean.size(); }
  Index obs_dim() const { return obs_matrix.rows(); }

  static FilterModel from_spec(const SsmSpec& spec) {
    spec.validate();
    FilterModel m;
    m.state_noise_factor = psd_factor(spec.effective_state_cov());
    m.obs_matrix = spec.obs_matrix;
    const Eigen::MatrixXd R = spec.effective_obs_cov();
    Eigen::LLT<Eigen::MatrixXd> llt(R);
    if (llt.info() != Eigen::Success) throw UsageError("observation covariance must be positive definite");
    m.obs_precision = llt.solve(Eigen::MatrixXd::Identity(R.rows(), R.cols()));
    const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    m.obs_log_norm = -0.5 * (static_cast<double>(R.rows()) * std::log(2.0 * std::numbers::pi) + log_det);
    m.init_mean = spec.init_mean;
    m.init_factor = psd_factor(spec.init_cov);
    m.wrap_phases = !spec.is_polynomial();
    return m;
  }
};

/// Streams used by one filter run; `attempt` selects a fresh substream for retries.
struct FilterStreams {
  Rng init;
  Rng proposal;
  Rng resampling;

  static FilterStreams make(std::uint64_t seed, std::uint64_t run = 0, std::uint64_t attempt = 0) {
    return {make_stream(seed, Stream::filter_init, run, attempt),
            make_stream(seed, Stream::filter_proposal, run, attempt),
            make_stream(seed, Stream::filter_resampling, run, attempt)};
  }
};

struct ParticleCloud {
  std::vector<Eigen::MatrixXd> particles;   // T entries of N_x x K
  std::vector<std::vector<int>> ancestors;  // T entries of K indices
  Eigen::MatrixXd log_weights;              // T x K, unnormalised log w
  Eigen::MatrixXd norm_log_weights;         // T x K, log w-bar
  Eigen::MatrixXd log_nu;                   // T x K, log w + log w-tilde
};

struct FilterOutput {
  double log_likelihood = 0.0;
  Eigen::VectorXd step_log_likelihood;  // T entries: logsumexp_k log nu_t
  Eigen::MatrixXd posterior_means;      // T x N_x
  std::optional<ParticleCloud> cloud;
};

struct FilterOptions {
  int particles = 100;
  bool keep_cloud = false;
};

// Value kernels shared by both filters.
namespace kernels {

/// Categorical draws by inverse CDF over one uniform per draw.
inline std::vector<int> resample_from_log(const Eigen::VectorXd& norm_log_weights, Rng& rng) {
  const Index K = norm_log_weights.size();
  std::vector<double> cdf(static_cast<std::size_t>(K));
  double acc = 0.0;
  for (Index k = 0; k < K; ++k) {
    acc += std::exp(norm_log_weights(k));
    cdf[static_cast<std::size_t>(k)] = acc;
  }
  if (!(acc > 0.0)) throw DegeneracyError("resampling: all weights are zero", 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<int> a(static_cast<std::size_t>(K));
  for (auto& ak : a) {
    const double u = unif(rng) * acc;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    // Skip zero-probability slots that share the cumulative value.
    auto idx = static_cast<int>(it - cdf.begin());
    while (idx > 0 && cdf[static_cast<std::size_t>(idx)] == cdf[static_cast<std::size_t>(idx - 1)] &&
           std::exp(norm_log_weights(idx)) == 0.0)
      --idx;
    ak = idx;
  }
  return a;
}

inline Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& X, const std::vector<int>& a) {
  Eigen::MatrixXd out(X.rows(), static_cast<Index>(a.size()));
  for (std::size_t k = 0; k < a.size(); ++k) out.col(static_cast<Index>(k)) = X.col(a[k]);
  return out;
}

inline Eigen::MatrixXd wrap(const Eigen::MatrixXd& X) {
  return X.unaryExpr([](double v) { return wrap_phase(v); });
}

/// Gaussian observation log-density per particle (K x 1); non-finite -> -inf.
inline Eigen::VectorXd obs_logpdf(const FilterModel& m, const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::MatrixXd resid = (-(m.obs_matrix * X)).colwise() + y;
  const Eigen::MatrixXd pr = m.obs_precision * resid;
  Eigen::VectorXd out(X.cols());
  for (Index k = 0; k < X.cols(); ++k) {
    const double v = m.obs_log_norm - 0.5 * resid.col(k).dot(pr.col(k));
    out(k) = std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
  }
  return out;
}

inline Eigen::MatrixXd initial_particles(const FilterModel& m, int K, Rng& rng) {
  Eigen::MatrixXd X = (m.init_factor * standard_normal(m.state_dim(), K, rng)).colwise() + m.init_mean;
  return m.wrap_phases ? wrap(X) : X;
}

/// Weighted particle mean; circular (atan2 of weighted sin/cos) for wrapped phases.
inline Eigen::VectorXd weighted_mean(const Eigen::MatrixXd& X, const Eigen::VectorXd& norm_log_weights, bool circular) {
  const Eigen::VectorXd w = norm_log_weights.array().exp();
  if (!circular) return X * w;
  const Eigen::VectorXd s = X.array().sin().matrix() * w;
  const Eigen::VectorXd c = X.array().cos().matrix() * w;
  return s.binaryExpr(c, [](double a, double b) { return std::atan2(a, b); });
}

/// logsumexp that reports degeneracy (all -inf or NaN) at step t.
inline double step_lse(const Eigen::VectorXd& log_nu, long t) {
  if (log_nu.hasNaN()) throw DegeneracyError("log weights contain NaN", t);
  try {
    return ad::logsumexp_value(log_nu);
  } catch (const DegeneracyError&) {
    throw DegeneracyError("likelihood underflow: all particle weights are zero", t);
  }
}

}  // namespace kernels

inline std::vector<int> resample_multinomial(const Eigen::VectorXd& norm_weights, Rng& rng) {
  if ((norm_weights.array() < 0.0).any()) throw UsageError("resample_multinomial: negative weight");
  const double total = norm_weights.sum();
  if (total == 0.0) throw DegeneracyError("resampling: all weights are zero", 0);
  if (std::abs(total - 1.0) > 1e-6) throw UsageError("resample_multinomial: weights must sum to 1");
  return kernels::resample_from_log(norm_weights.array().log().matrix(), rng);
}

/// Sum over t of logsumexp_k log nu_t (rows are time steps).
inline double log_likelihood_from_weights(const Eigen::MatrixXd& log_nu) {
  double total = 0.0;
  for (Index t = 0; t < log_nu.rows(); ++t) total += kernels::step_lse(log_nu.row(t).transpose(), t + 1);
  return total;
}

/// Weighted particle mean at 1-based step t.
inline Eigen::VectorXd posterior_mean(const ParticleCloud& cloud, long t) {
  if (t < 1 || t > static_cast<long>(cloud.particles.size())) throw UsageError("posterior_mean: t out of range");
  const auto i = static_cast<std::size_t>(t - 1);
  const Eigen::VectorXd w = cloud.norm_log_weights.row(static_cast<Index>(i)).transpose().array().exp();
  return cloud.particles[i] * w;
}

namespace detail {

inline void check_inputs(const FilterModel& m, const Eigen::MatrixXd& y, int K) {
  if (K < 1) throw UsageError("particle count must be >= 1");
  if (y.rows() < 1) throw UsageError("observation series is empty");
  if (y.cols() != m.obs_dim()) throw UsageError("observation dimension does not match the model");
}

inline void store(ParticleCloud& c, long t, const Eigen::MatrixXd& X, const std::vector<int>& a,
                  const Eigen::VectorXd& lw, const Eigen::VectorXd& lwbar, const Eigen::VectorXd& lnu) {
  c.particles.push_back(X);
  c.ancestors.push_back(a);
  c.log_weights.row(t - 1) = lw.transpose();
  c.norm_log_weights.row(t - 1) = lwbar.transpose();
  c.log_nu.row(t - 1) = lnu.transpose();
}

inline ParticleCloud empty_cloud(Index T, int K) {
  ParticleCloud c;
  c.log_weights.resize(T, K);
  c.norm_log_weights.resize(T, K);
  c.log_nu.resize(T, K);
  return c;
}

}  // namespace detail

/// Forward-only SIR with bootstrap proposal and resampling at every step.
/// `on_step(t, ell_t)` may return false to stop early (used by the degeneracy probe).
template <Transition Tr, class OnStep>
FilterOutput sir_filter(const Tr& transition, const Eigen::MatrixXd& theta, const FilterModel& m,
                        const Eigen::MatrixXd& y, const FilterOptions& opt, FilterStreams& rng, OnStep&& on_step) {
  detail::check_inputs(m, y, opt.particles);
  const int K = opt.particles;
  const Index T = y.rows();
  const double log_k = std::log(static_cast<double>(K));
  FilterOutput out;
  out.step_log_likelihood = Eigen::VectorXd::Zero(T);
  out.posterior_means = Eigen::MatrixXd::Zero(T, m.state_dim());
  if (opt.keep_cloud) out.cloud = detail::empty_cloud(T, K);

  Eigen::MatrixXd X = kernels::initial_particles(m, K, rng.init);
  Eigen::VectorXd lwbar = Eigen::VectorXd::Constant(K, -log_k);
  for (Index t = 1; t <= T; ++t) {
    const std::vector<int> a = kernels::resample_from_log(lwbar, rng.resampling);
    const Eigen::MatrixXd Xa = kernels::gather_columns(X, a);
    const Eigen::MatrixXd noise = m.state_noise_factor * standard_normal(m.state_dim(), K, rng.proposal);
    Eigen::MatrixXd Xn = transition.mean(theta, Xa) + noise;
    if (m.wrap_phases) Xn = kernels::wrap(Xn);
    const Eigen::VectorXd lw = kernels::obs_logpdf(m, Xn, y.row(t - 1).transpose());
    const Eigen::VectorXd lnu = lw + Eigen::VectorXd::Constant(K, -log_k + 0.0);
    const double ell = kernels::step_lse(lnu, t);
    lwbar = lnu.array() - ell;
    X = std::move(Xn);
    out.step_log_likelihood(t - 1) = ell;
    out.log_likelihood += ell;
    out.posterior_means.row(t - 1) = kernels::weighted_mean(X, lwbar, m.wrap_phases).transpose();
    if (out.cloud) detail::store(*out.cloud, t, X, a, lw, lwbar, lnu);
    if (!on_step(t, ell)) {
      out.step_log_likelihood.conservativeResize(t);
      out.posterior_means.conservativeResize(t, Eigen::NoChange);
      break;
    }
  }
  return out;
}

template <Transition Tr>
FilterOutput sir_filter(const Tr& transition, const Eigen::MatrixXd& theta, const FilterModel& m,
                        const Eigen::MatrixXd& y, const FilterOptions& opt, FilterStreams& rng) {
  return sir_filter(transition, theta, m, y, opt, rng, [](long, double) { return true; });
}

namespace detail {

/// Observation log-density on the tape (K x 1), with zero-adjoint particles skipped.
inline ad::Var obs_logpdf(ad::Tape& tape, const FilterModel& m, ad::Var X, const Eigen::VectorXd& y) {
  Eigen::VectorXd value = kernels::obs_logpdf(m, X.value(), y);
  const auto ix = X.id();
  const FilterModel* mp = &m;
  return tape.record(std::move(value), {ix}, [ix, mp, y](ad::Tape& t, std::size_t self) {
    const Eigen::MatrixXd& g = t.accumulate(self);
    const Eigen::MatrixXd& x = t.value(ix);
    Eigen::MatrixXd& slot = t.accumulate(ix);
    const Eigen::MatrixXd HtP = mp->obs_matrix.transpose() * mp->obs_precision;
    for (Index k = 0; k < x.cols(); ++k) {
      if (g(k, 0) == 0.0) continue;
      const Eigen::VectorXd resid = y - mp->obs_matrix * x.col(k);
      slot.col(k).noalias() += g(k, 0) * (HtP * resid);
    }
  });
}

/// Phase wrapping; unit derivative almost everywhere.
inline ad::Var wrap(ad::Tape& tape, ad::Var X) {
  const auto ix = X.id();
  return tape.record(kernels::wrap(X.value()), {ix}, [ix](ad::Tape& t, std::size_t self) {
    t.accumulate(ix) += t.accumulate(self);
  });
}

}  // namespace detail

/// Result of a differentiable run: forward values plus the tape node of the estimate.
struct DpfOutput {
  FilterOutput values;
  ad::Var log_likelihood;
};

/// Stop-gradient differentiable particle filter. theta must be a tape node;
/// ancestors are drawn from the (detached) normalised weights and the carry
/// log w-tilde = -log K + log w-bar[a] - stopgrad(log w-bar[a]) equals -log K in value.
template <Transition Tr>
DpfOutput dpf_filter(ad::Tape& tape, const Tr& transition, ad::Var theta, const FilterModel& m,
                     const Eigen::MatrixXd& y, const FilterOptions& opt, FilterStreams& rng) {
  detail::check_inputs(m, y, opt.particles);
  tape.check_owner(theta);
  const int K = opt.particles;
  const Index T = y.rows();
  const double log_k = std::log(static_cast<double>(K));
  tape.reserve(tape.size() + static_cast<std::size_t>(16 * T + 8));
  FilterOutput out;
  out.step_log_likelihood = Eigen::VectorXd::Zero(T);
  out.posterior_means = Eigen::MatrixXd::Zero(T, m.state_dim());
  if (opt.keep_cloud) out.cloud = detail::empty_cloud(T, K);

  ad::Var X = tape.constant(kernels::initial_particles(m, K, rng.init));
  ad::Var lwbar = tape.constant(Eigen::MatrixXd::Constant(K, 1, -log_k));
  const ad::Var neg_log_k = tape.constant(-log_k);
  ad::Var total = tape.constant(0.0);
  for (Index t = 1; t <= T; ++t) {
    const std::vector<int> a = kernels::resample_from_log(lwbar.value(), rng.resampling);
    const ad::Var carried = ad::gather(lwbar, a);
    const ad::Var lw_tilde = neg_log_k + (carried - ad::stop_gradient(carried));
    const ad::Var Xa = ad::gather_columns(X, a);
    const ad::Var noise = tape.constant(m.state_noise_factor * standard_normal(m.state_dim(), K, rng.proposal));
    ad::Var Xn = transition.mean(tape, theta, Xa) + noise;
    if (m.wrap_phases) Xn = detail::wrap(tape, Xn);
    const Eigen::VectorXd yt = y.row(t - 1).transpose();
    const ad::Var lw = detail::obs_logpdf(tape, m, Xn, yt);
    const ad::Var lnu = lw + lw_tilde;
    kernels::step_lse(lnu.value(), t);
    const ad::Var ell = ad::logsumexp(lnu);
    lwbar = lnu - ell;
    X = Xn;
    total = total + ell;
    out.step_log_likelihood(t - 1) = ell.scalar();
    out.log_likelihood += ell.scalar();
    out.posterior_means.row(t - 1) = kernels::weighted_mean(X.value(), lwbar.value(), m.wrap_phases).transpose();
    if (out.cloud) detail::store(*out.cloud, t, X.value(), a, lw.value(), lwbar.value(), lnu.value());
  }
  return {std::move(out), total};
}

struct ValueAndGradient {
  double log_likelihood = 0.0;
  Eigen::MatrixXd gradient;
  Eigen::VectorXd step_log_likelihood;
};

/// One differentiable run and its reverse sweep. A non-finite gradient is
/// reported as degeneracy at the last step.
template <Transition Tr>
ValueAndGradient value_and_gradient(const Tr& transition, const Eigen::MatrixXd& theta, const FilterModel& m,
                                    const Eigen::MatrixXd& y, const FilterOptions& opt, FilterStreams& rng) {
  ad::Tape tape;
  const ad::Var th = tape.leaf(theta);
  DpfOutput run = dpf_filter(tape, transition, th, m, y, opt, rng);
  const ad::Gradients g = tape.backward(run.log_likelihood);
  ValueAndGradient out{run.values.log_likelihood, g[th], run.values.step_log_likelihood};
  if (!out.gradient.allFinite()) throw DegeneracyError("non-finite gradient", static_cast<long>(y.rows()));
  return out;
}

/// Steps completed before the per-step likelihood first falls to the
/// single-precision floor (or the filter collapses). Returns T if it never does.
template <Transition Tr>
long steps_before_degeneracy(const Tr& transition, const Eigen::MatrixXd& theta, const FilterModel& m,
                             const Eigen::MatrixXd& y, int K, FilterStreams& rng,
                             double log_floor = kSinglePrecisionLogFloor) {
  long completed = 0;
  try {
    sir_filter(transition, theta, m, y, FilterOptions{K, false}, rng, [&](long t, double ell) {
      if (!(ell > log_floor)) return false;
      completed = t;
      return true;
    });
  } catch (const DegeneracyError&) {
  }
  return completed;
}

// Serialisation.

inline nlohmann::json to_json(const FilterOutput& out) {
  nlohmann::json j;
  j["log_likelihood"] = out.log_likelihood;
  j["step_log_likelihood"] = std::vector<double>(out.step_log_likelihood.data(),
                                                 out.step_log_likelihood.data() + out.step_log_likelihood.size());
  j["posterior_means"] = matrix_to_json(out.posterior_means);
  return j;
}

inline void write_posterior_means_csv(std::ostream& os, const FilterOutput& out) {
  os << "t";
  for (Index i = 0; i < out.posterior_means.cols(); ++i) os << ",mean_" << (i + 1);
  os << "\n";
  os.precision(17);
  for (Index t = 0; t < out.posterior_means.rows(); ++t) {
    os << (t + 1);
    for (Index i = 0; i < out.posterior_means.cols(); ++i) os << "," << out.posterior_means(t, i);
    os << "\n";
  }
}

}  // namespace graphgrad
