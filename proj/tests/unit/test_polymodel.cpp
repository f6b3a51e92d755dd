#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "graphgrad/polymodel.hpp"
#include "graphgrad/random.hpp"
#include "graphgrad/systems.hpp"

namespace {

using namespace graphgrad;

// Exponent vectors with total degree <= d, by direct recursion.
std::set<std::vector<int>> brute_force_monomials(int n, int d) {
  std::set<std::vector<int>> out;
  std::vector<int> e(static_cast<std::size_t>(n), 0);
  std::function<void(int, int)> rec = [&](int i, int left) {
    if (i == n) {
      out.insert(e);
      return;
    }
    for (int k = 0; k <= left; ++k) {
      e[static_cast<std::size_t>(i)] = k;
      rec(i + 1, left - k);
    }
    e[static_cast<std::size_t>(i)] = 0;
  };
  rec(0, d);
  return out;
}

TEST(DegreeMatrix, ThreeStatesDegreeTwoMatchesPrintedMatrix) {
  DegreeMatrix::Entries expected(3, 10);
  expected << 0, 1, 0, 0, 2, 1, 1, 0, 0, 0,
              0, 0, 1, 0, 0, 1, 0, 2, 1, 0,
              0, 0, 0, 1, 0, 0, 1, 0, 1, 2;
  EXPECT_EQ(generate_degree_matrix(3, 2).entries(), expected);
}

TEST(DegreeMatrix, MonomialCountMatchesBruteForce) {
  for (int n = 1; n <= 8; ++n)
    for (int d = 0; d <= 5; ++d) {
      const auto brute = brute_force_monomials(n, d);
      EXPECT_EQ(monomial_count(n, d), brute.size()) << "n=" << n << " d=" << d;
      const DegreeMatrix D = generate_degree_matrix(n, d);
      ASSERT_EQ(static_cast<std::size_t>(D.monomial_count()), brute.size());
      std::set<std::vector<int>> cols;
      for (Index j = 0; j < D.monomial_count(); ++j) {
        std::vector<int> e(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) e[static_cast<std::size_t>(i)] = D(i, j);
        cols.insert(e);
      }
      EXPECT_EQ(cols, brute);
    }
}

TEST(DegreeMatrix, ColumnsAreOrderedByDegree) {
  const DegreeMatrix D = generate_degree_matrix(4, 3);
  for (Index j = 1; j < D.monomial_count(); ++j) EXPECT_LE(D.entries().col(j - 1).sum(), D.entries().col(j).sum());
  EXPECT_EQ(D.entries().col(0).sum(), 0);
}

TEST(DegreeMatrix, ParameterCounts) {
  EXPECT_EQ(3 * monomial_count(3, 2), 30u);
  EXPECT_EQ(20 * monomial_count(20, 2), 4620u);
  EXPECT_EQ(20 * monomial_count(20, 3), 35420u);
  EXPECT_EQ(lorenz96_truth(20, 8.0, 0.025, 3).coefficients.size(), 35420);
}

TEST(DegreeMatrix, ColumnLookupAndLabels) {
  const DegreeMatrix D = generate_degree_matrix(3, 2);
  EXPECT_EQ(D.column_of({0, 0, 0}), 0);
  EXPECT_EQ(D.column_of({1, 0, 1}), 6);
  EXPECT_EQ(D.column_of({0, 0, 3}), -1);
  EXPECT_EQ(D.label(0), "1");
  EXPECT_EQ(D.label(4), "x1^2");
  EXPECT_EQ(D.label(8), "x2*x3");
}

TEST(DegreeMatrix, RejectsInvalidEntries) {
  DegreeMatrix::Entries dup(1, 2);
  dup << 1, 1;
  EXPECT_THROW(DegreeMatrix(dup, 2), UsageError);
  DegreeMatrix::Entries big(1, 1);
  big << 3;
  EXPECT_THROW(DegreeMatrix(big, 2), UsageError);
}

TEST(Polynomial, Lorenz63CoefficientsMatchPrintedMatrix) {
  const double s = 10.0, r = 28.0, b = 8.0 / 3.0, dt = 0.025;
  CoefficientMatrix expected = CoefficientMatrix::Zero(3, 10);
  expected(0, 1) = 1 - s * dt;
  expected(0, 2) = s * dt;
  expected(1, 1) = r * dt;
  expected(1, 2) = 1 - dt;
  expected(1, 6) = -dt;
  expected(2, 3) = 1 - b * dt;
  expected(2, 5) = dt;
  const PolynomialModel m = lorenz63_truth({}, dt, 2);
  EXPECT_TRUE(m.coefficients.isApprox(expected, 0.0));
  EXPECT_EQ((m.coefficients.array() == 0.0).count(), 23);
}

TEST(Polynomial, EvaluationMatchesDirectFormula) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  const DegreeMatrix D = generate_degree_matrix(3, 3);
  CoefficientMatrix C(3, D.monomial_count());
  for (Index i = 0; i < C.size(); ++i) C(i) = u(rng);
  Eigen::MatrixXd X(3, 5);
  for (Index i = 0; i < X.size(); ++i) X(i) = u(rng);
  const Eigen::MatrixXd got = polynomial_mean(C, X, D);
  for (Index k = 0; k < X.cols(); ++k) {
    Eigen::VectorXd want = Eigen::VectorXd::Zero(3);
    for (Index j = 0; j < D.monomial_count(); ++j) {
      double m = 1.0;
      for (Index i = 0; i < 3; ++i) m *= std::pow(X(i, k), D(i, j));
      want += C.col(j) * m;
    }
    EXPECT_TRUE(got.col(k).isApprox(want, 1e-12));
    EXPECT_TRUE(eval_polynomial(X.col(k), C, D).isApprox(want, 1e-12));
  }
}

TEST(Polynomial, TapeGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const DegreeMatrix D = generate_degree_matrix(3, 3);
  Eigen::MatrixXd C(3, D.monomial_count()), X(3, 4), W(3, 4);
  for (Index i = 0; i < C.size(); ++i) C(i) = u(rng);
  for (Index i = 0; i < X.size(); ++i) X(i) = u(rng);
  for (Index i = 0; i < W.size(); ++i) W(i) = u(rng);
  auto f = [&](const Eigen::MatrixXd& c, const Eigen::MatrixXd& x) {
    return (polynomial_mean(c, x, D).array() * W.array()).sum();
  };
  ad::Tape t;
  const ad::Var vc = t.leaf(C), vx = t.leaf(X);
  const auto g = t.backward(ad::dot(polynomial_mean(t, vc, vx, D), t.constant(W)));
  const double h = 1e-6;
  for (Index i = 0; i < C.size(); ++i) {
    Eigen::MatrixXd p = C, m = C;
    p(i) += h;
    m(i) -= h;
    EXPECT_NEAR(g[vc](i), (f(p, X) - f(m, X)) / (2 * h), 1e-7);
  }
  for (Index i = 0; i < X.size(); ++i) {
    Eigen::MatrixXd p = X, m = X;
    p(i) += h;
    m(i) -= h;
    EXPECT_NEAR(g[vx](i), (f(C, p) - f(C, m)) / (2 * h), 1e-7);
  }
}

TEST(Graph, Lorenz63AdjacencyMatchesPrintedMatrix) {
  const PolynomialModel m = lorenz63_truth({}, 0.025, 2);
  AdjacencyMatrix expected(3, 3);
  expected << 1, 1, 0,
              1, 1, 1,
              1, 1, 1;
  const AdjacencyMatrix A = adjacency(m.coefficients, m.degrees);
  EXPECT_EQ(A, expected);
  EXPECT_EQ(edge_count(A), 8);
}

TEST(Graph, Lorenz96HasFourParentsPerState) {
  const PolynomialModel m = lorenz96_truth(20, 8.0, 0.025, 2);
  const AdjacencyMatrix A = adjacency(m.coefficients, m.degrees);
  EXPECT_EQ(edge_count(A), 80);
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(A(i, i), 1);
    EXPECT_EQ(A(i, (i + 19) % 20), 1);
    EXPECT_EQ(A(i, (i + 18) % 20), 1);
    EXPECT_EQ(A(i, (i + 1) % 20), 1);
  }
}

TEST(Graph, ZeroCoefficientsGiveEmptyGraph) {
  const DegreeMatrix D = generate_degree_matrix(4, 2);
  EXPECT_EQ(edge_count(adjacency(CoefficientMatrix::Zero(4, D.monomial_count()), D)), 0);
  // The constant monomial never creates an edge.
  CoefficientMatrix C = CoefficientMatrix::Zero(4, D.monomial_count());
  C.col(0).setOnes();
  EXPECT_EQ(edge_count(adjacency(C, D)), 0);
}

TEST(Graph, PerMonomialGraphsUnionToAdjacency) {
  Rng rng = make_stream(11, Stream::coefficients);
  const DegreeMatrix D = generate_degree_matrix(4, 2);
  CoefficientMatrix C = init_coefficients(4, D.monomial_count(), rng);
  C = (C.array().abs() < 0.6).select(0.0, C);
  AdjacencyMatrix u = AdjacencyMatrix::Zero(4, 4);
  for (const auto& g : per_monomial_graphs(C, D)) u = u.cwiseMax(g);
  EXPECT_EQ(u, adjacency(C, D));
}

TEST(Graph, DotListsEveryEdge) {
  const PolynomialModel m = lorenz63_truth({}, 0.025, 2);
  const std::string dot = to_dot(adjacency(m.coefficients, m.degrees), "l63");
  EXPECT_NE(dot.find("digraph l63"), std::string::npos);
  EXPECT_NE(dot.find("x3 -> x2;"), std::string::npos);
  EXPECT_EQ(dot.find("x3 -> x1;"), std::string::npos);
  std::size_t arrows = 0;
  for (std::size_t p = dot.find("->"); p != std::string::npos; p = dot.find("->", p + 1)) ++arrows;
  EXPECT_EQ(arrows, 8u);
}

TEST(Polynomial, JsonRoundTrip) {
  const PolynomialModel m = lorenz63_truth({}, 0.025, 3);
  const PolynomialModel back = polynomial_from_json(nlohmann::json::parse(to_json(m.coefficients, m.degrees).dump()));
  EXPECT_EQ(back.degrees, m.degrees);
  EXPECT_TRUE(back.coefficients.isApprox(m.coefficients, 0.0));
}

TEST(Polynomial, JsonRejectsWrongLength) {
  nlohmann::json j = {{"n_x", 3}, {"d", 2}, {"coefficients", std::vector<double>(29, 0.0)}};
  EXPECT_THROW(polynomial_from_json(j), UsageError);
}

TEST(Polynomial, InitialCoefficientsAreInOpenUnitInterval) {
  Rng rng = make_stream(5, Stream::coefficients);
  const CoefficientMatrix C = init_coefficients(20, 231, rng);
  EXPECT_GT(C.minCoeff(), -1.0);
  EXPECT_LT(C.maxCoeff(), 1.0);
  EXPECT_NEAR(C.mean(), 0.0, 0.05);
}

}  // namespace
