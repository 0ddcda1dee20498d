#pragma once
// First-order propagation of standard uncertainties through the efficiency
// estimators: gradients (analytic, cross-checked by central differences),
// signed per-input contribution budgets, and covariances from repeated runs.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pnrcal/model.hpp"

namespace pnrcal {

/// Named input quantities with standard uncertainties and an optional full
/// covariance over the same ordering.
struct InputVector {
  static constexpr double kTolerance = 1e-9;

  std::vector<std::string> names;
  std::vector<double> values;
  std::vector<double> uncertainties;
  std::optional<Eigen::MatrixXd> covariance;

  std::size_t size() const noexcept { return values.size(); }
  /// Shapes agree, uncertainties >= 0, covariance symmetric PSD with a
  /// diagonal equal to the squared uncertainties (all within kTolerance).
  void validate() const;
  /// Full covariance, or the diagonal built from the uncertainties.
  Eigen::MatrixXd covariance_matrix() const;
  std::optional<std::size_t> index_of(const std::string& name) const;
};

/// A scalar function of an InputVector's values with its analytic gradient.
struct Estimator {
  std::string name;
  std::function<double(std::span<const double>)> value;
  std::function<std::vector<double>(std::span<const double>)> gradient;
};

/// Ordering of calibration inputs: heralded counts C_0..C_K, then
/// non-heralded counts C_0..C_K, then xi.
struct CalibrationLayout {
  std::size_t n_bins = 0; ///< K + 1

  std::size_t on(std::size_t i) const noexcept { return i; }
  std::size_t off(std::size_t i) const noexcept { return n_bins + i; }
  std::size_t xi() const noexcept { return 2 * n_bins; }
  std::size_t size() const noexcept { return 2 * n_bins + 1; }
  std::vector<std::string> names() const;
};

/// Packs counts and purity into an InputVector. The covariance is block
/// diagonal (heralded, non-heralded, xi) and present whenever either count
/// vector carries one.
InputVector calibration_inputs(const CountVector& on, const CountVector& off,
                               const HeraldPurity& xi);

Estimator gamma_estimator(const CalibrationLayout& layout, std::size_t photon_number);
Estimator klyshko_estimator(const CalibrationLayout& layout);
/// sum_k w_k f_k / sum_k w_k with the weights held fixed.
Estimator weighted_mean_estimator(std::vector<Estimator> parts, std::vector<double> weights);

struct JacobianOptions {
  double relative_tolerance = 1e-6;
};

/// Central differences with step max(1e-6 |q|, 1e-10).
std::vector<double> finite_difference_gradient(const Estimator& f, std::span<const double> at);

/// Analytic gradient, verified against central differences. Throws
/// NumericalInstabilityError on disagreement and DomainError when f is not
/// defined at a perturbed point.
std::vector<double> jacobian(const Estimator& f, const InputVector& at,
                             const JacobianOptions& options = {});

struct UncertaintyBudget {
  std::string target;
  double value = 0.0;
  std::vector<std::string> quantities;
  std::vector<double> contributions; ///< signed g_i u(q_i), units of the target
  double combined = 0.0;             ///< sqrt(g' V g)
  bool full_covariance = false;
};

UncertaintyBudget propagate(std::span<const double> gradient, const InputVector& inputs,
                            std::string target = {});

/// Gradient via jacobian() and propagate(), with the value filled in.
UncertaintyBudget evaluate_budget(const Estimator& f, const InputVector& inputs);

/// Mean over runs, with the covariance of that mean (sample covariance / n).
InputVector covariance_from_repeats(std::span<const InputVector> runs);

} // namespace pnrcal
