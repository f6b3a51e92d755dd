#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace graphgrad {

using Rng = std::mt19937_64;

/// Purposes used to derive independent streams from one base seed.
enum class Stream : std::uint64_t {
  coefficients = 1,
  simulation = 2,
  filter_init = 3,
  filter_proposal = 4,
  filter_resampling = 5,
  system = 6,
  probe = 7,
};

/// Independent generator for (seed, purpose, run, attempt). Two calls with the
/// same arguments return generators producing identical sequences.
inline Rng make_stream(std::uint64_t seed, Stream purpose, std::uint64_t run = 0,
                       std::uint64_t attempt = 0) {
  const auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  const auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(seed), hi(seed), lo(static_cast<std::uint64_t>(purpose)),
                    lo(run),  hi(run),  lo(attempt), hi(attempt)};
  return Rng(seq);
}

inline Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd out(rows, cols);
  // Column-major fill: column k is one particle / one time step.
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
  return out;
}

inline std::vector<double> uniform01(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& u : out) u = unif(rng);
  return out;
}

}  // namespace graphgrad
