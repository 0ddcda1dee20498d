#pragma once

#include <stdexcept>
#include <string>

namespace pnrcal {

/// Input outside the domain of an operation (bad probabilities, empty sets, ...).
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// An estimator denominator vanished: the photon-number bin carries no information.
class UninformativeBinError : public DomainError {
public:
  UninformativeBinError(const std::string& what, std::size_t bin)
      : DomainError(what), bin_(bin) {}
  std::size_t bin() const noexcept { return bin_; }

private:
  std::size_t bin_;
};

/// Non-linear fit did not converge within the iteration cap.
class FitError : public std::runtime_error {
public:
  FitError(const std::string& what, double last_cost)
      : std::runtime_error(what), last_cost_(last_cost) {}
  double last_cost() const noexcept { return last_cost_; }

private:
  double last_cost_;
};

/// The histogram did not offer enough peaks to seed the requested mixture.
class InitializationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Analytic and finite-difference derivatives disagree.
class NumericalInstabilityError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid or incomplete configuration. `field` names the offending key when known.
class ConfigError : public std::runtime_error {
public:
  ConfigError(const std::string& what, std::string field = {})
      : std::runtime_error(what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

} // namespace pnrcal
