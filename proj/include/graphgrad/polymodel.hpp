#pragma once

// Polynomial transition model: degree matrix construction, monomial
// evaluation (plain and on the tape), coefficient initialisation and
// connectivity graphs.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "graphgrad/autodiff.hpp"
#include "graphgrad/errors.hpp"
#include "graphgrad/random.hpp"

namespace graphgrad {

using Eigen::Index;
using CoefficientMatrix = Eigen::MatrixXd;
using AdjacencyMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr double kDefaultZeroTol = 1e-6;

/// Number of monomials of total degree <= d in n_x variables:
/// sum_{n=0}^{d} binom(n + n_x - 1, n_x - 1). Throws std::overflow_error.
inline std::uint64_t monomial_count(int n_x, int d) {
  if (n_x < 1) throw UsageError("monomial_count: n_x must be >= 1");
  if (d < 0) throw UsageError("monomial_count: d must be >= 0");
  std::uint64_t total = 0;
  std::uint64_t term = 1;  // binom(n + n_x - 1, n) for n = 0
  for (int n = 0; n <= d; ++n) {
    if (n > 0) {
      // binom(n + k, n) = binom(n - 1 + k, n - 1) * (n + k) / n with k = n_x - 1;
      // dividing by gcd first keeps every intermediate exact.
      std::uint64_t num = static_cast<std::uint64_t>(n) + static_cast<std::uint64_t>(n_x) - 1;
      std::uint64_t den = static_cast<std::uint64_t>(n);
      std::uint64_t g = std::gcd(term, den);
      std::uint64_t t = term / g;
      den /= g;
      std::uint64_t g2 = std::gcd(num, den);
      num /= g2;
      den /= g2;
      std::uint64_t prod = 0;
      if (__builtin_mul_overflow(t, num, &prod)) throw std::overflow_error("monomial_count overflow");
      term = prod / den;
    }
    if (__builtin_add_overflow(total, term, &total)) throw std::overflow_error("monomial_count overflow");
  }
  return total;
}

/// N_x x M matrix of monomial exponents. Columns are ordered by total degree,
/// then lexicographically (more copies of variable 1 first, then 2, ...), which
/// is the order in which combinations with replacement are enumerated.
class DegreeMatrix {
 public:
  using Entries = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;
  /// (variable, exponent) pairs with exponent > 0 for one column.
  using Factors = std::vector<std::pair<int, int>>;

  DegreeMatrix() = default;

  DegreeMatrix(Entries entries, int max_degree) : entries_(std::move(entries)), max_degree_(max_degree) {
    if (entries_.rows() < 1) throw UsageError("degree matrix needs at least one row");
    if ((entries_.array() < 0).any()) throw UsageError("degree matrix entries must be nonnegative");
    for (Index j = 0; j < entries_.cols(); ++j) {
      if (entries_.col(j).sum() > max_degree_) throw UsageError("degree matrix column exceeds max degree");
      for (Index k = 0; k < j; ++k)
        if (entries_.col(j) == entries_.col(k)) throw UsageError("degree matrix columns must be distinct");
    }
    build_index();
  }

  int state_dim() const { return static_cast<int>(entries_.rows()); }
  int max_degree() const { return max_degree_; }
  Index monomial_count() const { return entries_.cols(); }
  const Entries& entries() const { return entries_; }
  int operator()(Index i, Index j) const { return entries_(i, j); }
  const std::vector<Factors>& factors() const { return factors_; }

  /// Column index of a monomial given its exponent vector, or -1.
  Index column_of(const std::vector<int>& exponents) const {
    auto it = column_index_.find(exponents);
    return it == column_index_.end() ? -1 : it->second;
  }

  /// Human readable monomial label, e.g. "x1*x2^2" or "1".
  std::string label(Index j) const {
    std::ostringstream os;
    bool first = true;
    for (auto [var, e] : factors_[static_cast<std::size_t>(j)]) {
      if (!first) os << '*';
      os << 'x' << (var + 1);
      if (e > 1) os << '^' << e;
      first = false;
    }
    return first ? std::string("1") : os.str();
  }

  bool operator==(const DegreeMatrix& o) const {
    return max_degree_ == o.max_degree_ && entries_.rows() == o.entries_.rows() &&
           entries_.cols() == o.entries_.cols() && entries_ == o.entries_;
  }

 private:
  void build_index() {
    factors_.assign(static_cast<std::size_t>(entries_.cols()), {});
    column_index_.clear();
    for (Index j = 0; j < entries_.cols(); ++j) {
      std::vector<int> key(static_cast<std::size_t>(entries_.rows()));
      for (Index i = 0; i < entries_.rows(); ++i) {
        key[static_cast<std::size_t>(i)] = entries_(i, j);
        if (entries_(i, j) > 0) factors_[static_cast<std::size_t>(j)].emplace_back(static_cast<int>(i), entries_(i, j));
      }
      column_index_.emplace(std::move(key), j);
    }
  }

  Entries entries_;
  int max_degree_ = 0;
  std::vector<Factors> factors_;
  std::map<std::vector<int>, Index> column_index_;
};

/// Builds D from the union over degrees 0..d of combinations with replacement
/// of {1..n_x}; D(i, j) counts occurrences of variable i in combination j.
inline DegreeMatrix generate_degree_matrix(int n_x, int d) {
  const auto m = monomial_count(n_x, d);
  if (m > static_cast<std::uint64_t>(std::numeric_limits<int>::max()))
    throw std::overflow_error("generate_degree_matrix: too many monomials");
  DegreeMatrix::Entries entries = DegreeMatrix::Entries::Zero(n_x, static_cast<Index>(m));
  Index col = 0;
  std::vector<int> combo;
  // Emits nondecreasing sequences of variable indices in lexicographic order.
  auto emit = [&](auto&& self, int start, int remaining) -> void {
    if (remaining == 0) {
      for (int v : combo) entries(v, col) += 1;
      ++col;
      return;
    }
    for (int v = start; v < n_x; ++v) {
      combo.push_back(v);
      self(self, v, remaining - 1);
      combo.pop_back();
    }
  };
  for (int degree = 0; degree <= d; ++degree) emit(emit, 0, degree);
  return DegreeMatrix(std::move(entries), d);
}

namespace detail {

/// Fills pw (row-major n x (d+1)) with x_i^e, e in [0, d]; 0^0 = 1.
inline void power_table(const double* x, Index n, int d, double* pw) {
  for (Index i = 0; i < n; ++i) {
    double* row = pw + i * (d + 1);
    row[0] = 1.0;
    for (int e = 1; e <= d; ++e) row[e] = row[e - 1] * x[i];
  }
}

}  // namespace detail

/// Monomial values for each column of X (N_x x K): returns M x K.
inline Eigen::MatrixXd monomial_features(const Eigen::MatrixXd& X, const DegreeMatrix& D) {
  if (X.rows() != D.state_dim()) throw UsageError("monomial_features: state dimension mismatch");
  const Index m = D.monomial_count();
  Eigen::MatrixXd phi(m, X.cols());
  const auto& factors = D.factors();
  const int d = D.max_degree();
  std::vector<double> pw(static_cast<std::size_t>(X.rows() * (d + 1)));
  for (Index k = 0; k < X.cols(); ++k) {
    detail::power_table(X.col(k).data(), X.rows(), d, pw.data());
    for (Index j = 0; j < m; ++j) {
      double v = 1.0;
      for (auto [var, e] : factors[static_cast<std::size_t>(j)]) v *= pw[static_cast<std::size_t>(var * (d + 1) + e)];
      phi(j, k) = v;
    }
  }
  return phi;
}

/// f(x, C; D) = sum_j C[:, j] * prod_i x_i^D(i, j).
inline Eigen::VectorXd eval_polynomial(const Eigen::VectorXd& x, const CoefficientMatrix& C,
                                       const DegreeMatrix& D) {
  if (C.cols() != D.monomial_count()) throw UsageError("eval_polynomial: C and D column counts differ");
  return C * monomial_features(x, D);
}

/// Batched polynomial map for a matrix of states (one state per column).
inline Eigen::MatrixXd polynomial_mean(const CoefficientMatrix& C, const Eigen::MatrixXd& X,
                                       const DegreeMatrix& D) {
  if (C.cols() != D.monomial_count()) throw UsageError("polynomial_mean: C and D column counts differ");
  const Eigen::MatrixXd phi = monomial_features(X, D);
  Eigen::MatrixXd out(C.rows(), X.cols());
  out.noalias() = C * phi;
  return out;
}

namespace detail {

/// slot += J_phi(x)^T g for one state column x; g holds dL/dphi for that column.
inline void feature_vjp(const double* x, Index n, const DegreeMatrix& D, const double* g, double* slot,
                        std::vector<double>& pw) {
  const auto& factors = D.factors();
  const int d = D.max_degree();
  pw.resize(static_cast<std::size_t>(n * (d + 1)));
  power_table(x, n, d, pw.data());
  auto at = [&](int var, int e) { return pw[static_cast<std::size_t>(var * (d + 1) + e)]; };
  for (Index j = 0; j < D.monomial_count(); ++j) {
    const double gj = g[j];
    if (gj == 0.0) continue;
    const auto& fj = factors[static_cast<std::size_t>(j)];
    for (std::size_t a = 0; a < fj.size(); ++a) {
      const auto [var, e] = fj[a];
      double partial = e * at(var, e - 1);
      for (std::size_t b = 0; b < fj.size(); ++b)
        if (b != a) partial *= at(fj[b].first, fj[b].second);
      slot[var] += gj * partial;
    }
  }
}

}  // namespace detail

/// Monomial features recorded on the tape (differentiable in X).
inline ad::Var monomial_features(ad::Tape& tape, ad::Var X, const DegreeMatrix& D) {
  tape.check_owner(X);
  Eigen::MatrixXd phi = monomial_features(X.value(), D);
  const auto ix = X.id();
  // Captured by pointer: D must outlive the backward sweep.
  const DegreeMatrix* dm = &D;
  return tape.record(std::move(phi), {ix}, [ix, dm](ad::Tape& t, std::size_t self) {
    const Eigen::MatrixXd g = t.accumulate(self);
    const Eigen::MatrixXd& x = t.value(ix);
    Eigen::MatrixXd& slot = t.accumulate(ix);
    std::vector<double> pw;
    for (Index k = 0; k < x.cols(); ++k)
      detail::feature_vjp(x.col(k).data(), x.rows(), *dm, g.col(k).data(), slot.col(k).data(), pw);
  });
}

/// C * phi(X) on the tape; differentiable in both C and X. Columns whose
/// adjoint is exactly zero are skipped in the backward pass, so particles
/// carrying zero weight (possibly with overflowed states) contribute nothing.
inline ad::Var polynomial_mean(ad::Tape& tape, ad::Var C, ad::Var X, const DegreeMatrix& D) {
  tape.check_owner(C);
  tape.check_owner(X);
  if (C.value().cols() != D.monomial_count()) throw UsageError("polynomial_mean: C and D column counts differ");
  auto phi = std::make_shared<const Eigen::MatrixXd>(monomial_features(X.value(), D));
  Eigen::MatrixXd value(C.value().rows(), X.value().cols());
  value.noalias() = C.value() * (*phi);
  const auto ic = C.id(), ix = X.id();
  const DegreeMatrix* dm = &D;
  return tape.record(std::move(value), {ic, ix}, [ic, ix, dm, phi](ad::Tape& t, std::size_t self) {
    const Eigen::MatrixXd& g = t.accumulate(self);
    std::vector<Index> live;
    live.reserve(static_cast<std::size_t>(g.cols()));
    for (Index k = 0; k < g.cols(); ++k)
      if (!g.col(k).isZero(0.0)) live.push_back(k);
    if (live.empty()) return;
    Eigen::MatrixXd gl(g.rows(), static_cast<Index>(live.size()));
    Eigen::MatrixXd pl(phi->rows(), static_cast<Index>(live.size()));
    for (std::size_t c = 0; c < live.size(); ++c) {
      gl.col(static_cast<Index>(c)) = g.col(live[c]);
      pl.col(static_cast<Index>(c)) = phi->col(live[c]);
    }
    if (t.requires_grad(ic)) t.accumulate(ic).noalias() += gl * pl.transpose();
    if (t.requires_grad(ix)) {
      const Eigen::MatrixXd h = t.value(ic).transpose() * gl;
      const Eigen::MatrixXd& x = t.value(ix);
      Eigen::MatrixXd& slot = t.accumulate(ix);
      std::vector<double> pw;
      for (std::size_t c = 0; c < live.size(); ++c)
        detail::feature_vjp(x.col(live[c]).data(), x.rows(), *dm, h.col(static_cast<Index>(c)).data(),
                            slot.col(live[c]).data(), pw);
    }
  });
}

/// Transition adapter used by the particle filters: theta is the coefficient matrix.
struct PolynomialTransition {
  DegreeMatrix degrees;

  Index state_dim() const { return degrees.state_dim(); }
  Eigen::MatrixXd mean(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& X) const {
    return polynomial_mean(theta, X, degrees);
  }
  ad::Var mean(ad::Tape& tape, ad::Var theta, ad::Var X) const { return polynomial_mean(tape, theta, X, degrees); }
};

/// i.i.d. Uniform(-1, 1) coefficients (the endpoint -1 is rejected).
inline CoefficientMatrix init_coefficients(Index n_x, Index m, Rng& rng) {
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  CoefficientMatrix C(n_x, m);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < n_x; ++i) {
      double v;
      do v = unif(rng);
      while (v <= -1.0);
      C(i, j) = v;
    }
  return C;
}

/// Entries with |c| <= tol set to exactly zero.
inline CoefficientMatrix zero_small(const CoefficientMatrix& C, double tol = kDefaultZeroTol) {
  return (C.array().abs() <= tol).select(0.0, C);
}

/// A(a, b) = 1 iff (abs(C) * D^T)(a, b) > tol, i.e. state b feeds state a.
inline AdjacencyMatrix adjacency(const CoefficientMatrix& C, const DegreeMatrix& D, double zero_tol = kDefaultZeroTol) {
  if (zero_tol < 0) throw UsageError("adjacency: zero_tol must be >= 0");
  if (C.cols() != D.monomial_count()) throw UsageError("adjacency: C and D column counts differ");
  const Eigen::MatrixXd weight = zero_small(C, zero_tol).cwiseAbs() * D.entries().cast<double>().transpose();
  return (weight.array() > zero_tol).cast<int>().matrix();
}

/// One graph per monomial: G_j = 1(abs(C[:, j]) * D[:, j]^T). Their union is adjacency(C, D).
inline std::vector<AdjacencyMatrix> per_monomial_graphs(const CoefficientMatrix& C, const DegreeMatrix& D,
                                                        double zero_tol = kDefaultZeroTol) {
  if (C.cols() != D.monomial_count()) throw UsageError("per_monomial_graphs: C and D column counts differ");
  const CoefficientMatrix Cz = zero_small(C, zero_tol);
  std::vector<AdjacencyMatrix> graphs;
  graphs.reserve(static_cast<std::size_t>(C.cols()));
  for (Index j = 0; j < C.cols(); ++j) {
    const Eigen::MatrixXd w = Cz.col(j).cwiseAbs() * D.entries().col(j).cast<double>().transpose();
    graphs.push_back((w.array() > zero_tol).cast<int>().matrix());
  }
  return graphs;
}

/// Graphviz text; an edge b -> a for every A(a, b) = 1.
inline std::string to_dot(const AdjacencyMatrix& A, const std::string& name = "G") {
  std::ostringstream os;
  os << "digraph " << name << " {\n";
  for (Index a = 0; a < A.rows(); ++a) os << "  x" << (a + 1) << ";\n";
  for (Index b = 0; b < A.cols(); ++b)
    for (Index a = 0; a < A.rows(); ++a)
      if (A(a, b) != 0) os << "  x" << (b + 1) << " -> x" << (a + 1) << ";\n";
  os << "}\n";
  return os.str();
}

inline Index edge_count(const AdjacencyMatrix& A) { return A.cast<Index>().sum(); }

// JSON layout: {n_x, d, ordering: "deg-lex", degrees: row-major ints,
// coefficients: row-major doubles}. Either array may be omitted on read.

inline nlohmann::json to_json(const CoefficientMatrix& C, const DegreeMatrix& D) {
  nlohmann::json j;
  j["n_x"] = D.state_dim();
  j["d"] = D.max_degree();
  j["ordering"] = "deg-lex";
  std::vector<int> deg;
  deg.reserve(static_cast<std::size_t>(D.entries().size()));
  for (Index i = 0; i < D.entries().rows(); ++i)
    for (Index k = 0; k < D.entries().cols(); ++k) deg.push_back(D(i, k));
  j["degrees"] = deg;
  std::vector<double> coef;
  coef.reserve(static_cast<std::size_t>(C.size()));
  for (Index i = 0; i < C.rows(); ++i)
    for (Index k = 0; k < C.cols(); ++k) coef.push_back(C(i, k));
  j["coefficients"] = coef;
  return j;
}

struct PolynomialModel {
  CoefficientMatrix coefficients;
  DegreeMatrix degrees;
};

inline PolynomialModel polynomial_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("n_x") || !j.contains("d"))
    throw UsageError("coefficient file must contain n_x and d");
  const int n_x = j.at("n_x").get<int>();
  const int d = j.at("d").get<int>();
  if (j.contains("ordering") && j.at("ordering").get<std::string>() != "deg-lex")
    throw UsageError("unsupported monomial ordering");
  DegreeMatrix D = generate_degree_matrix(n_x, d);
  if (j.contains("degrees")) {
    const auto deg = j.at("degrees").get<std::vector<int>>();
    if (deg.size() != static_cast<std::size_t>(D.entries().size())) throw UsageError("degrees array has wrong length");
    DegreeMatrix::Entries e(n_x, D.monomial_count());
    for (Index i = 0; i < e.rows(); ++i)
      for (Index k = 0; k < e.cols(); ++k) e(i, k) = deg[static_cast<std::size_t>(i * e.cols() + k)];
    D = DegreeMatrix(std::move(e), d);
  }
  CoefficientMatrix C = CoefficientMatrix::Zero(n_x, D.monomial_count());
  if (j.contains("coefficients")) {
    const auto coef = j.at("coefficients").get<std::vector<double>>();
    if (coef.size() != static_cast<std::size_t>(C.size())) throw UsageError("coefficients array has wrong length");
    for (Index i = 0; i < C.rows(); ++i)
      for (Index k = 0; k < C.cols(); ++k) C(i, k) = coef[static_cast<std::size_t>(i * C.cols() + k)];
    if (!C.allFinite()) throw UsageError("coefficients must be finite");
  }
  return {std::move(C), std::move(D)};
}

}  // namespace graphgrad
