#pragma once

// Ground-truth synthetic systems and their Euler-discretised simulation.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "graphgrad/autodiff.hpp"
#include "graphgrad/errors.hpp"
#include "graphgrad/polymodel.hpp"
#include "graphgrad/random.hpp"

namespace graphgrad {

/// Wraps a phase into [-pi, pi].
inline double wrap_phase(double x) { return std::atan2(std::sin(x), std::cos(x)); }

/// Lower-triangular L with L L^T = cov; falls back to a symmetric square root
/// for singular PSD matrices (e.g. zero noise).
inline Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov) {
  if (cov.rows() != cov.cols()) throw UsageError("covariance must be square");
  if (cov.size() == 0) return cov;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.eigenvalues().minCoeff() < -1e-10 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff()))
    throw UsageError("covariance is not positive semidefinite");
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

/// Kuramoto mean-field drift with parameters theta = [eta_1..eta_N, K]:
///   R cos psi = mean cos x, R sin psi = mean sin x
///   mean_i = wrap(x_i + dt * (eta_i + K R sin(psi - x_i))).
struct KuramotoTransition {
  double dt = 0.05;

  Index state_dim_for(const Eigen::MatrixXd& theta) const { return theta.rows() - 1; }

  Eigen::MatrixXd mean(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& X) const {
    const Index n = X.rows();
    if (theta.rows() != n + 1 || theta.cols() != 1) throw UsageError("kuramoto: theta must be (N+1) x 1");
    const double coupling = theta(n, 0);
    Eigen::MatrixXd out(n, X.cols());
    for (Index k = 0; k < X.cols(); ++k) {
      const Eigen::ArrayXd c = X.col(k).array().cos();
      const Eigen::ArrayXd s = X.col(k).array().sin();
      const double cbar = c.mean();
      const double sbar = s.mean();
      for (Index i = 0; i < n; ++i) {
        // R sin(psi - x_i) = sbar cos x_i - cbar sin x_i
        const double drift = theta(i, 0) + coupling * (sbar * c(i) - cbar * s(i));
        out(i, k) = wrap_phase(X(i, k) + dt * drift);
      }
    }
    return out;
  }

  ad::Var mean(ad::Tape& tape, ad::Var theta, ad::Var X) const {
    Eigen::MatrixXd value = mean(theta.value(), X.value());
    const auto it = theta.id(), ix = X.id();
    const double h = dt;
    // Wrapping is piecewise identity, so it has unit derivative almost everywhere.
    return tape.record(std::move(value), {it, ix}, [it, ix, h](ad::Tape& t, std::size_t self) {
      const Eigen::MatrixXd g = t.accumulate(self);
      const Eigen::MatrixXd& th = t.value(it);
      const Eigen::MatrixXd& x = t.value(ix);
      const Index n = x.rows();
      const double coupling = th(n, 0);
      const bool want_theta = t.requires_grad(it);
      const bool want_x = t.requires_grad(ix);
      for (Index k = 0; k < x.cols(); ++k) {
        const Eigen::ArrayXd c = x.col(k).array().cos();
        const Eigen::ArrayXd s = x.col(k).array().sin();
        const double cbar = c.mean();
        const double sbar = s.mean();
        const Eigen::ArrayXd gk = g.col(k).array();
        if (want_theta) {
          auto& slot = t.accumulate(it);
          slot.col(0).head(n).array() += h * gk;
          slot(n, 0) += h * (gk * (sbar * c - cbar * s)).sum();
        }
        if (want_x) {
          auto& slot = t.accumulate(ix);
          // d/dx_j of K (sbar c_i - cbar s_i):
          //   direct (i == j): -K (sbar s_i + cbar c_i)
          //   via means: K (c_j c_i + s_j s_i) / n
          const double a = (gk * c).sum();
          const double b = (gk * s).sum();
          for (Index j = 0; j < n; ++j) {
            const double direct = 1.0 - h * coupling * (sbar * s(j) + cbar * c(j));
            const double via_mean = h * coupling * (c(j) * a + s(j) * b) / static_cast<double>(n);
            slot(j, k) += gk(j) * direct + via_mean;
          }
        }
      }
    });
  }
};

struct KuramotoDynamics {
  Eigen::VectorXd natural_frequencies;
  double coupling = 0.0;

  Eigen::MatrixXd theta() const {
    Eigen::MatrixXd th(natural_frequencies.size() + 1, 1);
    th.col(0).head(natural_frequencies.size()) = natural_frequencies;
    th(natural_frequencies.size(), 0) = coupling;
    return th;
  }
};

/// State-space model with Gaussian state and observation noise:
///   x_t = mean(x_{t-1}) + s * v_t,  v_t ~ N(0, state_cov)
///   y_t = H x_t + s * r_t,          r_t ~ N(0, obs_cov)
/// where s = sqrt(dt) when noise_scale is set and 1 otherwise.
struct SsmSpec {
  std::variant<PolynomialModel, KuramotoDynamics> transition;
  Eigen::MatrixXd state_cov;
  Eigen::MatrixXd obs_cov;
  Eigen::MatrixXd obs_matrix;
  Eigen::VectorXd init_mean;
  Eigen::MatrixXd init_cov;
  double dt = 0.025;
  bool noise_scale = true;

  Index state_dim() const { return init_mean.size(); }
  Index obs_dim() const { return obs_matrix.rows(); }
  double noise_multiplier() const { return noise_scale ? std::sqrt(dt) : 1.0; }
  Eigen::MatrixXd effective_state_cov() const { return noise_scale ? Eigen::MatrixXd(dt * state_cov) : state_cov; }
  Eigen::MatrixXd effective_obs_cov() const { return noise_scale ? Eigen::MatrixXd(dt * obs_cov) : obs_cov; }

  bool is_polynomial() const { return std::holds_alternative<PolynomialModel>(transition); }
  const PolynomialModel& polynomial() const { return std::get<PolynomialModel>(transition); }
  const KuramotoDynamics& kuramoto() const { return std::get<KuramotoDynamics>(transition); }

  Eigen::MatrixXd transition_mean(const Eigen::MatrixXd& X) const {
    if (is_polynomial()) return polynomial_mean(polynomial().coefficients, X, polynomial().degrees);
    return KuramotoTransition{dt}.mean(kuramoto().theta(), X);
  }

  void validate() const {
    const Index n = state_dim();
    if (n < 1) throw UsageError("state dimension must be >= 1");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw UsageError("dt must be positive");
    auto check_sym = [](const Eigen::MatrixXd& m, Index dim, const char* name) {
      if (m.rows() != dim || m.cols() != dim) throw UsageError(std::string(name) + " has wrong shape");
      if (!m.isApprox(m.transpose(), 1e-12) && (m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12)
        throw UsageError(std::string(name) + " must be symmetric");
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
      if (es.eigenvalues().minCoeff() < -1e-10) throw UsageError(std::string(name) + " must be PSD");
    };
    check_sym(state_cov, n, "state_cov");
    check_sym(init_cov, n, "init_cov");
    if (obs_matrix.cols() != n || obs_matrix.rows() < 1) throw UsageError("obs_matrix has wrong shape");
    check_sym(obs_cov, obs_matrix.rows(), "obs_cov");
    if (is_polynomial()) {
      const auto& p = polynomial();
      if (p.degrees.state_dim() != n || p.coefficients.rows() != n ||
          p.coefficients.cols() != p.degrees.monomial_count())
        throw UsageError("polynomial transition dimensions are inconsistent");
    } else if (kuramoto().natural_frequencies.size() != n) {
      throw UsageError("kuramoto frequencies have wrong length");
    }
  }
};

struct Trajectory {
  Eigen::MatrixXd states;        // (T+1) x N_x, row 0 is x_0
  Eigen::MatrixXd observations;  // T x N_y, row t-1 is y_t
  std::uint64_t seed = 0;

  Index length() const { return observations.rows(); }
};

/// Identity-observation SSM around a polynomial transition with isotropic noise.
inline SsmSpec polynomial_ssm(CoefficientMatrix C, DegreeMatrix D, double dt, double sigma2,
                              Eigen::VectorXd init_mean, double init_var = 1.0, bool noise_scale = true) {
  const Index n = C.rows();
  SsmSpec spec;
  spec.transition = PolynomialModel{std::move(C), std::move(D)};
  spec.state_cov = sigma2 * Eigen::MatrixXd::Identity(n, n);
  spec.obs_cov = sigma2 * Eigen::MatrixXd::Identity(n, n);
  spec.obs_matrix = Eigen::MatrixXd::Identity(n, n);
  spec.init_mean = std::move(init_mean);
  spec.init_cov = init_var * Eigen::MatrixXd::Identity(n, n);
  spec.dt = dt;
  spec.noise_scale = noise_scale;
  return spec;
}

inline Eigen::VectorXd unit_first(Index n) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  x(0) = 1.0;
  return x;
}

struct Lorenz63Params {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
};

/// Euler-discretised Lorenz 63 as (C, D) in the degree-`degree` monomial basis.
inline PolynomialModel lorenz63_truth(const Lorenz63Params& p, double dt, int degree = 2) {
  if (!(dt > 0)) throw UsageError("lorenz63_truth: dt must be positive");
  if (degree < 2) throw UsageError("lorenz63_truth: degree must be >= 2");
  DegreeMatrix D = generate_degree_matrix(3, degree);
  CoefficientMatrix C = CoefficientMatrix::Zero(3, D.monomial_count());
  auto col = [&](std::vector<int> e) { return D.column_of(e); };
  C(0, col({1, 0, 0})) = 1.0 - p.sigma * dt;
  C(0, col({0, 1, 0})) = p.sigma * dt;
  C(1, col({1, 0, 0})) = p.rho * dt;
  C(1, col({0, 1, 0})) = 1.0 - dt;
  C(1, col({1, 0, 1})) = -dt;
  C(2, col({0, 0, 1})) = 1.0 - p.beta * dt;
  C(2, col({1, 1, 0})) = dt;
  return {std::move(C), std::move(D)};
}

/// Euler-discretised Lorenz 96: x_i + dt (x_{i-1}(x_{i+1} - x_{i-2}) - x_i + F).
inline PolynomialModel lorenz96_truth(int n_x, double forcing, double dt, int degree = 2) {
  if (n_x < 4) throw UsageError("lorenz96_truth: n_x must be >= 4");
  if (degree < 2) throw UsageError("lorenz96_truth: degree must be >= 2");
  DegreeMatrix D = generate_degree_matrix(n_x, degree);
  CoefficientMatrix C = CoefficientMatrix::Zero(n_x, D.monomial_count());
  auto wrap = [n_x](int i) { return ((i % n_x) + n_x) % n_x; };
  auto col = [&](std::initializer_list<int> vars) {
    std::vector<int> e(static_cast<std::size_t>(n_x), 0);
    for (int v : vars) e[static_cast<std::size_t>(v)] += 1;
    return D.column_of(e);
  };
  for (int i = 0; i < n_x; ++i) {
    C(i, col({})) = forcing * dt;
    C(i, col({i})) = 1.0 - dt;
    C(i, col({wrap(i - 1), wrap(i + 1)})) = dt;
    C(i, col({wrap(i - 1), wrap(i - 2)})) = -dt;
  }
  return {std::move(C), std::move(D)};
}

/// Draws x_{1:T} and y_{1:T} starting from x_0 = init_mean.
inline Trajectory simulate(const SsmSpec& spec, long T, Rng& rng, std::uint64_t seed_tag = 0) {
  if (T < 1) throw UsageError("simulate: T must be >= 1");
  spec.validate();
  const Index n = spec.state_dim();
  const Index ny = spec.obs_dim();
  const Eigen::MatrixXd Lv = psd_factor(spec.effective_state_cov());
  const Eigen::MatrixXd Lr = psd_factor(spec.effective_obs_cov());
  const bool wrap = !spec.is_polynomial();
  Trajectory traj;
  traj.seed = seed_tag;
  traj.states.resize(T + 1, n);
  traj.observations.resize(T, ny);
  traj.states.row(0) = spec.init_mean.transpose();
  Eigen::MatrixXd x = spec.init_mean;
  for (long t = 1; t <= T; ++t) {
    Eigen::MatrixXd next = spec.transition_mean(x) + Lv * standard_normal(n, 1, rng);
    if (wrap) next = next.unaryExpr([](double v) { return wrap_phase(v); });
    if (!next.allFinite()) throw SimulationError("state diverged", t);
    x = next;
    const Eigen::VectorXd y = spec.obs_matrix * x + Lr * standard_normal(ny, 1, rng);
    traj.states.row(t) = x.transpose();
    traj.observations.row(t - 1) = y.transpose();
  }
  return traj;
}

struct StableTrajectory {
  Trajectory trajectory;
  int redraws = 0;  // divergent simulations discarded before this one
};

/// Simulates on the simulation stream (seed, run, attempt) for attempt = 0, 1, ...
/// and returns the first trajectory that stays finite and within `bound`.
inline StableTrajectory simulate_stable(const SsmSpec& spec, long T, std::uint64_t seed, std::uint64_t run = 0,
                                        int max_redraws = 1000, double bound = 1e4) {
  for (int attempt = 0; attempt <= max_redraws; ++attempt) {
    Rng rng = make_stream(seed, Stream::simulation, run, static_cast<std::uint64_t>(attempt));
    try {
      Trajectory traj = simulate(spec, T, rng, seed);
      if (traj.states.cwiseAbs().maxCoeff() <= bound) return {std::move(traj), attempt};
    } catch (const SimulationError&) {
    }
  }
  throw SimulationError("no bounded trajectory after redraws", T);
}

struct KuramotoParams {
  int n_x = 20;
  double coupling = 0.8;
  double eta_mean = 0.5;
  double eta_sd = 0.5;
  double dt = 0.05;
  double sigma = 0.1;
  double burn_in_time = 10.0;
  double prior_var = 0.2;
};

struct KuramotoRun {
  SsmSpec spec;  // init_mean is the state at the end of burn-in
  Trajectory trajectory;
};

/// Draws eta_i ~ N(eta_mean, eta_sd^2) and x_0 ~ U(-pi, pi), runs the noisy
/// system until burn_in_time, then collects T steps.
inline KuramotoRun kuramoto_simulate(const KuramotoParams& p, long T, Rng& rng, std::uint64_t seed_tag = 0) {
  if (p.n_x < 2) throw UsageError("kuramoto_simulate: n_x must be >= 2");
  if (T < 1) throw UsageError("kuramoto_simulate: T must be >= 1");
  const Index n = p.n_x;
  std::normal_distribution<double> eta_dist(p.eta_mean, p.eta_sd);
  std::uniform_real_distribution<double> phase(-std::numbers::pi, std::numbers::pi);
  KuramotoDynamics dyn;
  dyn.natural_frequencies.resize(n);
  for (Index i = 0; i < n; ++i) dyn.natural_frequencies(i) = eta_dist(rng);
  dyn.coupling = p.coupling;
  Eigen::VectorXd x(n);
  for (Index i = 0; i < n; ++i) x(i) = phase(rng);

  SsmSpec spec;
  spec.transition = dyn;
  spec.state_cov = p.sigma * p.sigma * Eigen::MatrixXd::Identity(n, n);
  spec.obs_cov = spec.state_cov;
  spec.obs_matrix = Eigen::MatrixXd::Identity(n, n);
  spec.init_mean = x;
  spec.init_cov = p.prior_var * Eigen::MatrixXd::Identity(n, n);
  spec.dt = p.dt;
  spec.noise_scale = true;

  const Eigen::MatrixXd Lv = psd_factor(spec.effective_state_cov());
  const long burn_steps = std::lround(p.burn_in_time / p.dt);
  for (long t = 0; t < burn_steps; ++t) {
    Eigen::MatrixXd next = spec.transition_mean(x) + Lv * standard_normal(n, 1, rng);
    x = next.unaryExpr([](double v) { return wrap_phase(v); });
  }
  spec.init_mean = x;
  KuramotoRun run{spec, simulate(spec, T, rng, seed_tag)};
  return run;
}

/// Kuramoto order parameter R = |mean exp(i x)|.
inline double order_parameter(const Eigen::VectorXd& phases) {
  const double c = phases.array().cos().mean();
  const double s = phases.array().sin().mean();
  return std::hypot(c, s);
}

struct RandomSystem {
  CoefficientMatrix drift;  // sparse drift coefficients, max singular value 1
  SsmSpec spec;             // Euler transition x + dt * drift * phi(x)
};

/// Random sparse polynomial system: round((1 - sparsity) N_x M) nonzero drift
/// entries drawn U(-N_x, N_x), rescaled to unit spectral norm, Euler-discretised
/// with noise covariances dt * I.
inline RandomSystem random_sparse_system(int n_x, int d, double sparsity, double dt, Rng& rng) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw UsageError("random_sparse_system: sparsity must be in [0, 1)");
  if (!(dt > 0)) throw UsageError("random_sparse_system: dt must be positive");
  DegreeMatrix D = generate_degree_matrix(n_x, d);
  const Index m = D.monomial_count();
  const Index total = n_x * m;
  const auto nnz = static_cast<Index>(std::llround((1.0 - sparsity) * static_cast<double>(total)));
  std::vector<Index> positions(static_cast<std::size_t>(total));
  for (Index i = 0; i < total; ++i) positions[static_cast<std::size_t>(i)] = i;
  // Partial Fisher-Yates: the first nnz slots are a uniform random subset.
  for (Index i = 0; i < nnz; ++i) {
    std::uniform_int_distribution<Index> pick(i, total - 1);
    std::swap(positions[static_cast<std::size_t>(i)], positions[static_cast<std::size_t>(pick(rng))]);
  }
  std::uniform_real_distribution<double> value(-static_cast<double>(n_x), static_cast<double>(n_x));
  CoefficientMatrix drift = CoefficientMatrix::Zero(n_x, m);
  for (Index i = 0; i < nnz; ++i) {
    const Index p = positions[static_cast<std::size_t>(i)];
    double v;
    do v = value(rng);
    while (v == 0.0);
    drift(p % n_x, p / n_x) = v;
  }
  if (nnz > 0) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(drift);
    drift /= svd.singularValues()(0);
  }
  CoefficientMatrix transition = dt * drift;
  for (int i = 0; i < n_x; ++i) {
    std::vector<int> e(static_cast<std::size_t>(n_x), 0);
    e[static_cast<std::size_t>(i)] = 1;
    transition(i, D.column_of(e)) += 1.0;
  }
  SsmSpec spec = polynomial_ssm(transition, D, dt, dt, unit_first(n_x), 1.0, /*noise_scale=*/false);
  return {std::move(drift), std::move(spec)};
}

// Serialisation.

/// CSV with header t,x_1..x_N,y_1..y_M; row 0 carries x_0 and empty observations.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  const Index n = traj.states.cols();
  const Index ny = traj.observations.cols();
  os << "t";
  for (Index i = 0; i < n; ++i) os << ",x_" << (i + 1);
  for (Index i = 0; i < ny; ++i) os << ",y_" << (i + 1);
  os << "\n";
  os.precision(17);
  for (Index t = 0; t < traj.states.rows(); ++t) {
    os << t;
    for (Index i = 0; i < n; ++i) os << "," << traj.states(t, i);
    for (Index i = 0; i < ny; ++i) {
      os << ",";
      if (t > 0) os << traj.observations(t - 1, i);
    }
    os << "\n";
  }
}

inline Trajectory read_trajectory_csv(std::istream& is) {
  std::string line;
  while (std::getline(is, line) && (line.empty() || line[0] == '#')) {
  }
  if (line.rfind("t,", 0) != 0) throw UsageError("trajectory csv: missing header");
  Index n = 0, ny = 0;
  {
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) {
      if (cell.rfind("x_", 0) == 0) ++n;
      if (cell.rfind("y_", 0) == 0) ++ny;
    }
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != static_cast<std::size_t>(1 + n + ny)) throw UsageError("trajectory csv: ragged row");
    rows.push_back(std::move(cells));
  }
  if (rows.size() < 2) throw UsageError("trajectory csv: too few rows");
  Trajectory traj;
  const Index T = static_cast<Index>(rows.size()) - 1;
  traj.states.resize(T + 1, n);
  traj.observations.resize(T, ny);
  for (Index t = 0; t <= T; ++t) {
    const auto& r = rows[static_cast<std::size_t>(t)];
    for (Index i = 0; i < n; ++i) traj.states(t, i) = std::stod(r[static_cast<std::size_t>(1 + i)]);
    if (t > 0)
      for (Index i = 0; i < ny; ++i) traj.observations(t - 1, i) = std::stod(r[static_cast<std::size_t>(1 + n + i)]);
  }
  return traj;
}

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw UsageError("matrix json must be a nonempty array of rows");
  const auto rows = static_cast<Index>(j.size());
  const auto cols = static_cast<Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const auto& r = j.at(static_cast<std::size_t>(i));
    if (static_cast<Index>(r.size()) != cols) throw UsageError("ragged matrix json");
    for (Index k = 0; k < cols; ++k) m(i, k) = r.at(static_cast<std::size_t>(k)).get<double>();
  }
  return m;
}

}  // namespace graphgrad
