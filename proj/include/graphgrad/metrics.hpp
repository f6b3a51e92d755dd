#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "graphgrad/errors.hpp"
#include "graphgrad/polymodel.hpp"

namespace graphgrad {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
};

struct SupportReport {
  double specificity = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  double rmse = 0.0;       // over entries nonzero in the estimate
  double rmse_full = 0.0;  // over all entries
  ConfusionCounts counts;
};

// Conventions for empty denominators:
//   specificity with no true zeros        -> 1
//   recall with no true nonzeros          -> 1
//   precision with no predicted nonzeros  -> 1 if there are no true nonzeros, else 0
//   f1 with precision + recall = 0        -> 0
//   rmse with no predicted nonzeros       -> 0
inline constexpr const char* kMetricConventions =
    "specificity=1 when no true zeros; recall=1 when no true nonzeros; "
    "precision=1 when no predicted and no true nonzeros, else 0 when no predicted nonzeros; "
    "f1=0 when precision+recall=0; rmse over entries with |estimate|>zero_tol (0 if none); "
    "rmse_full over all entries";

inline SupportReport support_metrics(const CoefficientMatrix& est, const CoefficientMatrix& truth,
                                     double zero_tol = kDefaultZeroTol) {
  if (est.rows() != truth.rows() || est.cols() != truth.cols())
    throw UsageError("support_metrics: shape mismatch");
  if (zero_tol < 0) throw UsageError("support_metrics: zero_tol must be >= 0");
  SupportReport r;
  auto& c = r.counts;
  double sq = 0.0;
  std::int64_t n_sq = 0;
  for (Index j = 0; j < est.cols(); ++j)
    for (Index i = 0; i < est.rows(); ++i) {
      const bool p = std::abs(est(i, j)) > zero_tol;
      const bool t = std::abs(truth(i, j)) > zero_tol;
      if (p && t) ++c.tp;
      else if (p) ++c.fp;
      else if (t) ++c.fn;
      else ++c.tn;
      if (p) {
        const double e = est(i, j) - truth(i, j);
        sq += e * e;
        ++n_sq;
      }
    }
  const auto ratio = [](std::int64_t num, std::int64_t den) { return static_cast<double>(num) / static_cast<double>(den); };
  r.specificity = (c.tn + c.fp) == 0 ? 1.0 : ratio(c.tn, c.tn + c.fp);
  r.recall = (c.tp + c.fn) == 0 ? 1.0 : ratio(c.tp, c.tp + c.fn);
  if (c.tp + c.fp == 0) r.precision = (c.tp + c.fn) == 0 ? 1.0 : 0.0;
  else r.precision = ratio(c.tp, c.tp + c.fp);
  r.f1 = (r.precision + r.recall) == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  r.rmse = n_sq == 0 ? 0.0 : std::sqrt(sq / static_cast<double>(n_sq));
  r.rmse_full = est.size() == 0 ? 0.0 : std::sqrt((est - truth).squaredNorm() / static_cast<double>(est.size()));
  return r;
}

inline double rmse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw UsageError("rmse: shape mismatch");
  if (a.size() == 0) throw UsageError("rmse: empty input");
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

/// Phase-aware RMSE: differences are wrapped to [-pi, pi] before squaring.
inline double circular_rmse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw UsageError("circular_rmse: shape mismatch");
  if (a.size() == 0) throw UsageError("circular_rmse: empty input");
  const Eigen::ArrayXXd d = (a - b).array();
  const Eigen::ArrayXXd w = d.sin().binaryExpr(d.cos(), [](double s, double c) { return std::atan2(s, c); });
  return std::sqrt(w.square().sum() / static_cast<double>(a.size()));
}

/// RMSE(x_est, x_gt) / RMSE(x_true_model, x_gt).
inline double nrmse(const Eigen::MatrixXd& x_est, const Eigen::MatrixXd& x_true_model, const Eigen::MatrixXd& x_gt,
                    bool circular = false) {
  const auto f = circular ? circular_rmse : rmse;
  const double den = f(x_true_model, x_gt);
  if (den == 0.0) throw DomainError("nrmse: reference RMSE is zero");
  return f(x_est, x_gt) / den;
}

struct Interval {
  double mean = 0.0;
  double half_width = 0.0;  // 1.96 sd / sqrt(n), sample sd
  std::size_t n = 0;
  bool single = false;      // n == 1: width is 0 by convention
};

inline Interval aggregate(const std::vector<double>& values, double z = 1.96) {
  if (values.empty()) throw UsageError("aggregate: empty input");
  Interval out;
  out.n = values.size();
  double s = 0.0;
  for (double v : values) s += v;
  out.mean = s / static_cast<double>(out.n);
  if (out.n == 1) {
    out.single = true;
    return out;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  const double sd = std::sqrt(ss / static_cast<double>(out.n - 1));
  out.half_width = z * sd / std::sqrt(static_cast<double>(out.n));
  return out;
}

inline std::map<std::string, Interval> aggregate(const std::vector<SupportReport>& reports, double z = 1.96) {
  if (reports.empty()) throw UsageError("aggregate: empty input");
  auto pick = [&](auto field) {
    std::vector<double> v;
    v.reserve(reports.size());
    for (const auto& r : reports) v.push_back(r.*field);
    return aggregate(v, z);
  };
  return {{"rmse", pick(&SupportReport::rmse)},
          {"rmse_full", pick(&SupportReport::rmse_full)},
          {"specificity", pick(&SupportReport::specificity)},
          {"recall", pick(&SupportReport::recall)},
          {"precision", pick(&SupportReport::precision)},
          {"f1", pick(&SupportReport::f1)}};
}

// Serialisation.

struct MetricRow {
  std::string method;
  long T = 0;
  double sigma2 = 0.0;
  int d = 0;
  SupportReport report;
};

inline const char* metric_csv_header() { return "method,T,sigma2,d,rmse,specificity,recall,precision,f1"; }

inline void write_metric_row(std::ostream& os, const MetricRow& r) {
  os.precision(10);
  os << r.method << "," << r.T << "," << r.sigma2 << "," << r.d << "," << r.report.rmse << ","
     << r.report.specificity << "," << r.report.recall << "," << r.report.precision << "," << r.report.f1 << "\n";
}

inline nlohmann::json to_json(const SupportReport& r) {
  return {{"specificity", r.specificity}, {"recall", r.recall},       {"precision", r.precision},
          {"f1", r.f1},                   {"rmse", r.rmse},           {"rmse_full", r.rmse_full},
          {"tp", r.counts.tp},            {"fp", r.counts.fp},        {"tn", r.counts.tn},
          {"fn", r.counts.fn},            {"conventions", kMetricConventions}};
}

inline nlohmann::json to_json(const Interval& i) {
  return {{"mean", i.mean}, {"half_width", i.half_width}, {"n", i.n}, {"single", i.single}};
}

}  // namespace graphgrad
