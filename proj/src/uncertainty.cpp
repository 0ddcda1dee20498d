#include "pnrcal/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "pnrcal/errors.hpp"

namespace pnrcal {

// ---------------------------------------------------------------------------
// InputVector

void InputVector::validate() const {
  const std::size_t n = values.size();
  if (names.size() != n || uncertainties.size() != n) {
    throw DomainError("input names, values and uncertainties differ in length");
  }
  for (double u : uncertainties) {
    if (!(u >= 0.0)) throw DomainError("standard uncertainties must be >= 0");
  }
  if (!covariance) return;
  const auto& v = *covariance;
  if (v.rows() != static_cast<Eigen::Index>(n) || v.cols() != static_cast<Eigen::Index>(n)) {
    throw DomainError("covariance shape does not match the inputs");
  }
  const double scale = std::max(v.cwiseAbs().maxCoeff(), 1e-300);
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    for (Eigen::Index c = r + 1; c < v.cols(); ++c) {
      if (std::abs(v(r, c) - v(c, r)) > kTolerance * scale) {
        throw DomainError("covariance is not symmetric");
      }
    }
    const double u2 = uncertainties[static_cast<std::size_t>(r)] * uncertainties[static_cast<std::size_t>(r)];
    if (std::abs(v(r, r) - u2) > kTolerance * std::max(std::abs(u2), std::abs(v(r, r)))) {
      throw DomainError("covariance diagonal disagrees with the uncertainty of " +
                        names[static_cast<std::size_t>(r)]);
    }
  }
  // Scale to unit diagonal so the PSD test is relative per quantity.
  Eigen::VectorXd d(v.rows());
  for (Eigen::Index k = 0; k < v.rows(); ++k) d(k) = v(k, k) > 0.0 ? 1.0 / std::sqrt(v(k, k)) : 1.0;
  const Eigen::MatrixXd corr = d.asDiagonal() * (0.5 * (v + v.transpose())) * d.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(corr, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -kTolerance * std::max(eig.eigenvalues().maxCoeff(), 1.0)) {
    throw DomainError("covariance is not positive semidefinite");
  }
}

Eigen::MatrixXd InputVector::covariance_matrix() const {
  if (covariance) return *covariance;
  Eigen::VectorXd u2(static_cast<Eigen::Index>(uncertainties.size()));
  for (std::size_t k = 0; k < uncertainties.size(); ++k) {
    u2(static_cast<Eigen::Index>(k)) = uncertainties[k] * uncertainties[k];
  }
  return u2.asDiagonal();
}

std::optional<std::size_t> InputVector::index_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names.begin());
}

// ---------------------------------------------------------------------------
// Calibration inputs and estimators

std::vector<std::string> CalibrationLayout::names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n_bins; ++i) out.push_back("C" + std::to_string(i));
  for (std::size_t i = 0; i < n_bins; ++i) out.push_back("C" + std::to_string(i) + "_off");
  out.push_back("xi");
  return out;
}

InputVector calibration_inputs(const CountVector& on, const CountVector& off, const HeraldPurity& xi) {
  on.validate();
  off.validate();
  xi.validate();
  if (on.size() != off.size() || on.size() == 0) {
    throw DomainError("heralded and non-heralded count vectors must have the same nonzero length");
  }
  const CalibrationLayout layout{on.size()};
  InputVector in;
  in.names = layout.names();
  in.values.insert(in.values.end(), on.counts.begin(), on.counts.end());
  in.values.insert(in.values.end(), off.counts.begin(), off.counts.end());
  in.values.push_back(xi.xi);
  in.uncertainties.insert(in.uncertainties.end(), on.uncertainties.begin(), on.uncertainties.end());
  in.uncertainties.insert(in.uncertainties.end(), off.uncertainties.begin(), off.uncertainties.end());
  in.uncertainties.push_back(xi.u_xi);

  if (on.covariance || off.covariance) {
    const auto n = static_cast<Eigen::Index>(on.size());
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(2 * n + 1, 2 * n + 1);
    v.block(0, 0, n, n) = on.covariance_matrix();
    v.block(n, n, n, n) = off.covariance_matrix();
    v(2 * n, 2 * n) = xi.u_xi * xi.u_xi;
    // Keep the diagonal and uncertainties consistent to the last bit.
    for (Eigen::Index k = 0; k < 2 * n + 1; ++k) {
      in.uncertainties[static_cast<std::size_t>(k)] = std::sqrt(std::max(v(k, k), 0.0));
      v(k, k) = in.uncertainties[static_cast<std::size_t>(k)] * in.uncertainties[static_cast<std::size_t>(k)];
    }
    in.covariance = std::move(v);
  }
  return in;
}

namespace {

struct Unpacked {
  PhotonNumberDistribution on;
  PhotonNumberDistribution off;
  HeraldPurity xi;
  double on_total;
  double off_total;
};

Unpacked unpack(const CalibrationLayout& layout, std::span<const double> q) {
  if (q.size() != layout.size()) throw DomainError("input vector does not match the calibration layout");
  const auto n = layout.n_bins;
  std::vector<double> zeros(n, 0.0);
  const CountVector on(std::vector<double>(q.begin(), q.begin() + static_cast<long>(n)), zeros);
  const CountVector off(std::vector<double>(q.begin() + static_cast<long>(n),
                                            q.begin() + static_cast<long>(2 * n)),
                        zeros);
  return {counts_to_distribution(on), counts_to_distribution(off), HeraldPurity{q[layout.xi()], 0.0},
          on.total(), off.total()};
}

/// d gamma / d counts from d gamma / d probabilities through p_i = c_i / S.
void chain_to_counts(std::span<const double> dp, std::span<const double> probs, double total,
                     std::span<double> out) {
  double mean = 0.0;
  for (std::size_t i = 0; i < dp.size(); ++i) mean += probs[i] * dp[i];
  for (std::size_t j = 0; j < dp.size(); ++j) out[j] = (dp[j] - mean) / total;
}

std::vector<double> probability_gradient_to_inputs(const CalibrationLayout& layout, const Unpacked& u,
                                                   std::span<const double> d_on,
                                                   std::span<const double> d_off, double d_xi) {
  std::vector<double> g(layout.size(), 0.0);
  const auto n = layout.n_bins;
  chain_to_counts(d_on, u.on.probabilities(), u.on_total, std::span<double>(g).subspan(0, n));
  chain_to_counts(d_off, u.off.probabilities(), u.off_total, std::span<double>(g).subspan(n, n));
  g[layout.xi()] = d_xi;
  return g;
}

} // namespace

Estimator gamma_estimator(const CalibrationLayout& layout, std::size_t photon_number) {
  if (photon_number >= layout.n_bins) throw DomainError("photon number outside the layout");
  Estimator f;
  f.name = EstimateSource::photon(photon_number).label();
  f.value = [layout, photon_number](std::span<const double> q) {
    const auto u = unpack(layout, q);
    return estimate_gamma(photon_number, u.on, u.off, u.xi).gamma;
  };
  f.gradient = [layout, photon_number](std::span<const double> q) {
    const auto u = unpack(layout, q);
    const double xi = u.xi.xi;
    const std::size_t i = photon_number;
    std::vector<double> d_on(layout.n_bins, 0.0);
    std::vector<double> d_off(layout.n_bins, 0.0);
    const double gamma = estimate_gamma(i, u.on, u.off, u.xi).gamma;
    if (i == 0) {
      // gamma = (1 - P0/B0) / xi
      const double b0 = u.off[0];
      d_on[0] = -1.0 / (xi * b0);
      d_off[0] = u.on[0] / (xi * b0 * b0);
    } else {
      // gamma = (Pi - Bi) / (xi (B_{i-1} - Bi))
      const double step = u.off[i - 1] - u.off[i];
      const double num = u.on[i] - u.off[i];
      d_on[i] = 1.0 / (xi * step);
      d_off[i] = (num - step) / (xi * step * step);
      d_off[i - 1] = -num / (xi * step * step);
    }
    return probability_gradient_to_inputs(layout, u, d_on, d_off, -gamma / xi);
  };
  return f;
}

Estimator klyshko_estimator(const CalibrationLayout& layout) {
  Estimator f;
  f.name = EstimateSource::klyshko().label();
  f.value = [layout](std::span<const double> q) {
    const auto u = unpack(layout, q);
    return klyshko_estimate(u.on, u.off, u.xi).gamma;
  };
  f.gradient = [layout](std::span<const double> q) {
    const auto u = unpack(layout, q);
    const double xi = u.xi.xi;
    std::vector<double> d_on(layout.n_bins, 0.0);
    std::vector<double> d_off(layout.n_bins, 0.0);
    // gamma = (B0 - P0) / xi
    d_on[0] = -1.0 / xi;
    d_off[0] = 1.0 / xi;
    const double gamma = klyshko_estimate(u.on, u.off, u.xi).gamma;
    return probability_gradient_to_inputs(layout, u, d_on, d_off, -gamma / xi);
  };
  return f;
}

Estimator weighted_mean_estimator(std::vector<Estimator> parts, std::vector<double> weights) {
  if (parts.empty() || parts.size() != weights.size()) {
    throw DomainError("weighted mean needs one weight per estimator");
  }
  const double sum_w = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum_w > 0.0)) throw DomainError("weights must sum to a positive value");
  Estimator f;
  f.name = EstimateSource::mean().label();
  f.value = [parts, weights, sum_w](std::span<const double> q) {
    double v = 0.0;
    for (std::size_t k = 0; k < parts.size(); ++k) v += weights[k] * parts[k].value(q);
    return v / sum_w;
  };
  f.gradient = [parts, weights, sum_w](std::span<const double> q) {
    std::vector<double> g(q.size(), 0.0);
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto gk = parts[k].gradient(q);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += weights[k] * gk[j] / sum_w;
    }
    return g;
  };
  return f;
}

// ---------------------------------------------------------------------------
// Gradients and propagation

std::vector<double> finite_difference_gradient(const Estimator& f, std::span<const double> at) {
  std::vector<double> q(at.begin(), at.end());
  std::vector<double> g(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double h = std::max(1e-6 * std::abs(at[k]), 1e-10);
    double plus = 0.0;
    double minus = 0.0;
    try {
      q[k] = at[k] + h;
      plus = f.value(q);
      q[k] = at[k] - h;
      minus = f.value(q);
    } catch (const DomainError& e) {
      throw DomainError(f.name + " is undefined at a perturbed point of input " + std::to_string(k) +
                        ": " + e.what());
    }
    q[k] = at[k];
    g[k] = (plus - minus) / (2.0 * h);
  }
  return g;
}

std::vector<double> jacobian(const Estimator& f, const InputVector& at, const JacobianOptions& options) {
  at.validate();
  const auto analytic = f.gradient(at.values);
  if (analytic.size() != at.size()) throw DomainError("gradient length does not match the inputs");
  const auto numeric = finite_difference_gradient(f, at.values);

  // Central differences cannot resolve a derivative below the rounding noise
  // of f divided by the step; the estimators work with O(1) probabilities, so
  // that noise is a few ulps of max(|f|, 1).
  const double value = std::abs(f.value(at.values));
  const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(value, 1.0);
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const double a = analytic[k];
    const double n = numeric[k];
    const double floor = noise / std::max(1e-6 * std::abs(at.values[k]), 1e-10);
    if (std::abs(a - n) > options.relative_tolerance * std::max(std::abs(a), std::abs(n)) + floor) {
      throw NumericalInstabilityError(f.name + ": analytic derivative " + std::to_string(a) +
                                      " disagrees with finite difference " + std::to_string(n) +
                                      " for " + at.names[k]);
    }
  }
  return analytic;
}

UncertaintyBudget propagate(std::span<const double> gradient, const InputVector& inputs, std::string target) {
  inputs.validate();
  if (gradient.size() != inputs.size()) throw DomainError("gradient and inputs differ in length");
  UncertaintyBudget b;
  b.target = std::move(target);
  b.quantities = inputs.names;
  b.contributions.resize(gradient.size());
  for (std::size_t k = 0; k < gradient.size(); ++k) b.contributions[k] = gradient[k] * inputs.uncertainties[k];
  b.full_covariance = inputs.covariance.has_value();
  if (b.full_covariance) {
    const Eigen::Map<const Eigen::VectorXd> g(gradient.data(), static_cast<Eigen::Index>(gradient.size()));
    const double var = g.dot(*inputs.covariance * g);
    b.combined = std::sqrt(std::max(var, 0.0));
  } else {
    double var = 0.0;
    for (double c : b.contributions) var += c * c;
    b.combined = std::sqrt(var);
  }
  return b;
}

UncertaintyBudget evaluate_budget(const Estimator& f, const InputVector& inputs) {
  const auto g = jacobian(f, inputs);
  auto b = propagate(g, inputs, f.name);
  b.value = f.value(inputs.values);
  return b;
}

InputVector covariance_from_repeats(std::span<const InputVector> runs) {
  if (runs.size() < 2) throw DomainError("covariance from repeats needs at least two runs");
  const auto& first = runs.front();
  const std::size_t m = first.size();
  for (const auto& r : runs) {
    if (r.names != first.names || r.values.size() != m) {
      throw DomainError("repeated runs must share the quantity ordering");
    }
  }
  const auto n = static_cast<double>(runs.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  for (const auto& r : runs) {
    mean += Eigen::Map<const Eigen::VectorXd>(r.values.data(), static_cast<Eigen::Index>(m));
  }
  mean /= n;
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (const auto& r : runs) {
    const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(r.values.data(), static_cast<Eigen::Index>(m)) - mean;
    s += d * d.transpose();
  }
  s /= (n - 1.0);
  Eigen::MatrixXd of_mean = s / n;

  InputVector out;
  out.names = first.names;
  out.values.assign(mean.data(), mean.data() + m);
  out.uncertainties.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    out.uncertainties[k] = std::sqrt(std::max(of_mean(kk, kk), 0.0));
    of_mean(kk, kk) = out.uncertainties[k] * out.uncertainties[k];
  }
  out.covariance = std::move(of_mean);
  return out;
}

} // namespace pnrcal
