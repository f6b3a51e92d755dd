#pragma once

#include <stdexcept>
#include <string>

namespace graphgrad {

/// Caller violated an API contract (bad shape, bad argument, misuse of the tape).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mathematical domain violation (log of a nonpositive value, division by zero).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Particle-filter likelihood collapsed to -inf (or produced a non-finite gradient).
/// `step()` is the 1-based time index at which the collapse was detected.
class DegeneracyError : public std::runtime_error {
 public:
  DegeneracyError(const std::string& what, long step)
      : std::runtime_error(what + " (t=" + std::to_string(step) + ")"), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Simulated trajectory left the finite reals.
class SimulationError : public std::runtime_error {
 public:
  SimulationError(const std::string& what, long step)
      : std::runtime_error(what + " at t=" + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Invalid experiment configuration. `field()` names the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace graphgrad
