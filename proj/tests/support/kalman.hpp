#pragma once

// Exact log-likelihood of a linear-Gaussian state-space model
//   x_0 ~ N(m0, P0),  x_t = A x_{t-1} + b + v_t,  y_t = H x_t + r_t
// with v_t ~ N(0, Q) and r_t ~ N(0, R). Written from the textbook recursion,
// independently of the particle filters under test.

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

namespace graphgrad::oracle {

struct LinearGaussian {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::MatrixXd Q;
  Eigen::MatrixXd H;
  Eigen::MatrixXd R;
  Eigen::VectorXd m0;
  Eigen::MatrixXd P0;
};

inline double kalman_log_likelihood(const LinearGaussian& s, const Eigen::MatrixXd& y) {
  Eigen::VectorXd m = s.m0;
  Eigen::MatrixXd P = s.P0;
  double ll = 0.0;
  const double ny = static_cast<double>(s.H.rows());
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    m = s.A * m + s.b;
    P = s.A * P * s.A.transpose() + s.Q;
    const Eigen::VectorXd innov = y.row(t).transpose() - s.H * m;
    const Eigen::MatrixXd S = s.H * P * s.H.transpose() + s.R;
    const Eigen::LLT<Eigen::MatrixXd> llt(S);
    const Eigen::MatrixXd L = llt.matrixL();
    const double log_det = 2.0 * L.diagonal().array().log().sum();
    const Eigen::VectorXd z = llt.solve(innov);
    ll += -0.5 * (ny * std::log(2.0 * std::numbers::pi) + log_det + innov.dot(z));
    const Eigen::MatrixXd Kg = P * s.H.transpose() * llt.solve(Eigen::MatrixXd::Identity(S.rows(), S.cols()));
    m += Kg * innov;
    P = (Eigen::MatrixXd::Identity(P.rows(), P.cols()) - Kg * s.H) * P;
    P = 0.5 * (P + P.transpose());
  }
  return ll;
}

}  // namespace graphgrad::oracle
