#pragma once
// Detection model of a photon-number-resolving detector illuminated by a
// heralded single-photon source, and the closed-form efficiency estimators
// that invert it.
//
// Efficiencies are stored as fractions everywhere in the library; only the
// report layer renders them in percent.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pnrcal {

/// Probability of detecting i photons, i = 0..K. Immutable once built.
class PhotonNumberDistribution {
public:
  static constexpr double kSumTolerance = 1e-12;

  /// Accepts probabilities that already sum to one within kSumTolerance.
  static PhotonNumberDistribution from_probabilities(std::vector<double> probs);
  /// Normalizes non-negative weights with a positive sum.
  static PhotonNumberDistribution normalized(std::span<const double> weights);
  /// All probability on photon number n (support 0..n).
  static PhotonNumberDistribution delta(std::size_t n);

  std::size_t size() const noexcept { return probs_.size(); }
  std::size_t max_photon_number() const noexcept { return probs_.size() - 1; }
  /// Zero beyond the stored support.
  double operator[](std::size_t i) const noexcept {
    return i < probs_.size() ? probs_[i] : 0.0;
  }
  std::span<const double> probabilities() const noexcept { return probs_; }

  /// Probability of at least one detected photon.
  double click_probability() const noexcept { return 1.0 - probs_.front(); }

private:
  explicit PhotonNumberDistribution(std::vector<double> probs) : probs_(std::move(probs)) {}
  std::vector<double> probs_;
};

/// Per-photon-number event counts (fitted peak integrals, hence real valued).
struct CountVector {
  std::vector<double> counts;
  std::vector<double> uncertainties;
  /// Full covariance of the counts when they come out of a single fit.
  std::optional<Eigen::MatrixXd> covariance;

  CountVector() = default;
  CountVector(std::vector<double> c, std::vector<double> u,
              std::optional<Eigen::MatrixXd> cov = std::nullopt);

  std::size_t size() const noexcept { return counts.size(); }
  double total() const noexcept;
  /// Throws DomainError when an invariant is broken.
  void validate() const;
  Eigen::MatrixXd covariance_matrix() const;
};

/// Heralding-detector counts with the pump on and with PDC extinguished.
struct HeraldStats {
  double n_on = 0.0;
  double n_off = 0.0;
  double u_on = 0.0;
  double u_off = 0.0;

  /// Counting uncertainties u = sqrt(n).
  static HeraldStats poisson(double n_on, double n_off);
  void validate() const;
};

/// Probability that a heralding count is genuine.
struct HeraldPurity {
  double xi = 1.0;
  double u_xi = 0.0;
  void validate() const;
};

struct EstimateSource {
  enum class Kind { photon_number, klyshko, weighted_mean };
  Kind kind = Kind::photon_number;
  std::size_t index = 0; ///< photon number, for Kind::photon_number

  static EstimateSource photon(std::size_t i) { return {Kind::photon_number, i}; }
  static EstimateSource klyshko() { return {Kind::klyshko, 0}; }
  static EstimateSource mean() { return {Kind::weighted_mean, 0}; }

  /// "gamma0", "gamma1", ..., "klyshko", "weighted_mean"
  std::string label() const;
  bool operator==(const EstimateSource&) const = default;
};

enum EstimateFlag : std::uint32_t {
  kFlagNone = 0,
  kFlagOutOfRange = 1u << 0,       ///< gamma outside [0, 1]; the value is never clamped
  kFlagConsistentWithZero = 1u << 1 ///< |gamma| <= 2 u(gamma), or exactly zero
};

/// A "total" efficiency gamma = tau * eta with its standard uncertainty.
struct EfficiencyEstimate {
  double gamma = 0.0;
  double u_gamma = 0.0;
  EstimateSource source;
  std::uint32_t flags = kFlagNone;

  bool out_of_range() const noexcept { return (flags & kFlagOutOfRange) != 0; }
  bool consistent_with_zero() const noexcept { return (flags & kFlagConsistentWithZero) != 0; }

  /// Builds an estimate and derives its flags from the value and uncertainty.
  static EfficiencyEstimate make(double gamma, double u_gamma, EstimateSource source);
  /// Returns a copy with a new uncertainty and refreshed flags.
  EfficiencyEstimate with_uncertainty(double u) const { return make(gamma, u, source); }
};

/// Split of gamma into path transmittance and detector efficiency. Annotation only.
struct EfficiencyDecomposition {
  double tau = 1.0;
  double eta = 1.0;

  void validate() const;
  double gamma() const noexcept { return tau * eta; }
  bool reproduces(double gamma, double tolerance) const noexcept;
};

/// Photon-number distribution seen in heralded gates given the efficiency,
/// herald purity and the accidental (non-heralded) distribution. The support
/// grows by one photon.
PhotonNumberDistribution forward_distribution(double gamma, double xi,
                                              const PhotonNumberDistribution& background);

PhotonNumberDistribution counts_to_distribution(const CountVector& c);

/// xi = 1 - n_off / n_on with first-order propagation of the count uncertainties.
HeraldPurity estimate_xi(const HeraldStats& h);

/// Efficiency from photon-number bin i. Uncertainty is left at zero; route
/// through the uncertainty module to populate it.
EfficiencyEstimate estimate_gamma(std::size_t i, const PhotonNumberDistribution& p_on,
                                  const PhotonNumberDistribution& p_off, const HeraldPurity& xi);

/// Click/no-click efficiency with accidental subtraction and purity correction.
EfficiencyEstimate klyshko_estimate(const PhotonNumberDistribution& p_on,
                                    const PhotonNumberDistribution& p_off,
                                    const HeraldPurity& xi);

/// Inverse-variance weighted mean.
EfficiencyEstimate weighted_mean(std::span<const EfficiencyEstimate> estimates);

} // namespace pnrcal
