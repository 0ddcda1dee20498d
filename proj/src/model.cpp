#include "pnrcal/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pnrcal/errors.hpp"

namespace pnrcal {

namespace {

void require_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw DomainError(std::string(name) + " must lie in [0, 1], got " + std::to_string(p));
  }
}

} // namespace

// ---------------------------------------------------------------------------
// PhotonNumberDistribution

PhotonNumberDistribution PhotonNumberDistribution::from_probabilities(std::vector<double> probs) {
  if (probs.empty()) throw DomainError("photon-number distribution needs at least one entry");
  double sum = 0.0;
  for (double p : probs) {
    require_probability(p, "probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    throw DomainError("probabilities sum to " + std::to_string(sum) + ", not 1");
  }
  return PhotonNumberDistribution(std::move(probs));
}

PhotonNumberDistribution PhotonNumberDistribution::normalized(std::span<const double> weights) {
  if (weights.empty()) throw DomainError("photon-number distribution needs at least one entry");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("weights must be finite and >= 0");
    total += w;
  }
  if (!(total > 0.0)) throw DomainError("weights sum to zero");
  std::vector<double> probs(weights.size());
  std::transform(weights.begin(), weights.end(), probs.begin(),
                 [total](double w) { return w / total; });
  return PhotonNumberDistribution(std::move(probs));
}

PhotonNumberDistribution PhotonNumberDistribution::delta(std::size_t n) {
  std::vector<double> probs(n + 1, 0.0);
  probs[n] = 1.0;
  return PhotonNumberDistribution(std::move(probs));
}

// ---------------------------------------------------------------------------
// CountVector, HeraldStats, HeraldPurity

CountVector::CountVector(std::vector<double> c, std::vector<double> u,
                         std::optional<Eigen::MatrixXd> cov)
    : counts(std::move(c)), uncertainties(std::move(u)), covariance(std::move(cov)) {
  validate();
}

double CountVector::total() const noexcept {
  return std::accumulate(counts.begin(), counts.end(), 0.0);
}

void CountVector::validate() const {
  if (counts.size() != uncertainties.size()) {
    throw DomainError("counts and uncertainties differ in length");
  }
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (!(counts[i] >= 0.0) || !std::isfinite(counts[i])) {
      throw DomainError("count " + std::to_string(i) + " is negative or not finite");
    }
    if (!(uncertainties[i] >= 0.0) || !std::isfinite(uncertainties[i])) {
      throw DomainError("uncertainty " + std::to_string(i) + " is negative or not finite");
    }
  }
  if (covariance) {
    const auto n = static_cast<Eigen::Index>(counts.size());
    if (covariance->rows() != n || covariance->cols() != n) {
      throw DomainError("count covariance has the wrong shape");
    }
  }
}

Eigen::MatrixXd CountVector::covariance_matrix() const {
  if (covariance) return *covariance;
  Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(uncertainties.data(),
                                                        static_cast<Eigen::Index>(uncertainties.size()));
  return u.array().square().matrix().asDiagonal();
}

HeraldStats HeraldStats::poisson(double n_on, double n_off) {
  HeraldStats h{n_on, n_off, std::sqrt(std::max(n_on, 0.0)), std::sqrt(std::max(n_off, 0.0))};
  h.validate();
  return h;
}

void HeraldStats::validate() const {
  if (!(n_on > 0.0)) throw DomainError("n_on must be positive");
  if (!(n_off >= 0.0)) throw DomainError("n_off must be non-negative");
  if (n_off > n_on) throw DomainError("n_off exceeds n_on: herald purity would be negative");
  if (!(u_on >= 0.0) || !(u_off >= 0.0)) throw DomainError("herald count uncertainties must be >= 0");
}

void HeraldPurity::validate() const {
  require_probability(xi, "xi");
  if (!(u_xi >= 0.0)) throw DomainError("u_xi must be >= 0");
}

// ---------------------------------------------------------------------------
// EfficiencyEstimate

std::string EstimateSource::label() const {
  switch (kind) {
  case Kind::photon_number:
    return "gamma" + std::to_string(index);
  case Kind::klyshko:
    return "klyshko";
  case Kind::weighted_mean:
    return "weighted_mean";
  }
  return "unknown";
}

EfficiencyEstimate EfficiencyEstimate::make(double gamma, double u_gamma, EstimateSource source) {
  if (!(u_gamma >= 0.0)) throw DomainError("u_gamma must be >= 0");
  EfficiencyEstimate e{gamma, u_gamma, source, kFlagNone};
  if (!(gamma >= 0.0 && gamma <= 1.0)) e.flags |= kFlagOutOfRange;
  const bool zeroish = u_gamma > 0.0 ? std::abs(gamma) <= 2.0 * u_gamma : gamma == 0.0;
  if (zeroish) e.flags |= kFlagConsistentWithZero;
  return e;
}

void EfficiencyDecomposition::validate() const {
  require_probability(tau, "tau");
  require_probability(eta, "eta");
}

bool EfficiencyDecomposition::reproduces(double g, double tolerance) const noexcept {
  return std::abs(gamma() - g) <= tolerance;
}

// ---------------------------------------------------------------------------
// Forward model and estimators

PhotonNumberDistribution forward_distribution(double gamma, double xi,
                                              const PhotonNumberDistribution& background) {
  require_probability(gamma, "gamma");
  require_probability(xi, "xi");

  // P(i) = xi[(1-g) B(i) + g B(i-1)] + (1-xi) B(i), regrouped so that
  // P(i) - B(i) is exactly xi*g*(B(i-1) - B(i)) up to one rounding.
  const double shift = xi * gamma;
  const std::size_t k = background.max_photon_number();
  std::vector<double> p(k + 2);
  p[0] = background[0] - shift * background[0];
  for (std::size_t i = 1; i <= k + 1; ++i) {
    p[i] = background[i] + shift * (background[i - 1] - background[i]);
  }
  return PhotonNumberDistribution::from_probabilities(std::move(p));
}

PhotonNumberDistribution counts_to_distribution(const CountVector& c) {
  c.validate();
  if (!(c.total() > 0.0)) throw DomainError("total count is zero");
  return PhotonNumberDistribution::normalized(c.counts);
}

HeraldPurity estimate_xi(const HeraldStats& h) {
  h.validate();
  const double ratio = h.n_off / h.n_on;
  const double d_off = 1.0 / h.n_on;
  const double d_on = ratio / h.n_on;
  const double u = std::hypot(d_off * h.u_off, d_on * h.u_on);
  return HeraldPurity{1.0 - ratio, u};
}

EfficiencyEstimate estimate_gamma(std::size_t i, const PhotonNumberDistribution& p_on,
                                  const PhotonNumberDistribution& p_off, const HeraldPurity& xi) {
  xi.validate();
  if (!(xi.xi > 0.0)) throw DomainError("herald purity xi must be positive");
  double gamma = 0.0;
  if (i == 0) {
    const double b0 = p_off[0];
    if (b0 == 0.0) throw UninformativeBinError("zero-photon background probability is zero", 0);
    gamma = (b0 - p_on[0]) / (xi.xi * b0);
  } else {
    const double step = p_off[i - 1] - p_off[i];
    if (step == 0.0) {
      throw UninformativeBinError("background probabilities of bins " + std::to_string(i - 1) +
                                      " and " + std::to_string(i) + " are equal",
                                  i);
    }
    gamma = (p_on[i] - p_off[i]) / (xi.xi * step);
  }
  return EfficiencyEstimate::make(gamma, 0.0, EstimateSource::photon(i));
}

EfficiencyEstimate klyshko_estimate(const PhotonNumberDistribution& p_on,
                                    const PhotonNumberDistribution& p_off,
                                    const HeraldPurity& xi) {
  xi.validate();
  if (!(xi.xi > 0.0)) throw DomainError("herald purity xi must be positive");
  const double gamma = (p_on.click_probability() - p_off.click_probability()) / xi.xi;
  return EfficiencyEstimate::make(gamma, 0.0, EstimateSource::klyshko());
}

EfficiencyEstimate weighted_mean(std::span<const EfficiencyEstimate> estimates) {
  if (estimates.empty()) throw DomainError("weighted mean of an empty list");
  double sum_w = 0.0;
  double sum_wx = 0.0;
  for (const auto& e : estimates) {
    if (!(e.u_gamma > 0.0)) {
      throw DomainError("weighted mean needs positive uncertainties (" + e.source.label() + ")");
    }
    const double w = 1.0 / (e.u_gamma * e.u_gamma);
    sum_w += w;
    sum_wx += w * e.gamma;
  }
  return EfficiencyEstimate::make(sum_wx / sum_w, 1.0 / std::sqrt(sum_w), EstimateSource::mean());
}

} // namespace pnrcal
