#pragma once
// Pulse-amplitude histograms and their Gaussian-mixture fits.
//
// The mixture model is a plain sum of Gaussians evaluated at bin centres,
//
//   mu(x) = sum_i A_i exp(-(x - x_i)^2 / (2 sigma_i^2))  [+ c]
//
// with A_i the peak height in counts per bin. The integral of peak i,
// A_i sigma_i sqrt(2 pi) / bin_width, is the number of events with i
// detected photons.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "pnrcal/model.hpp"

namespace pnrcal {

class AmplitudeHistogram {
public:
  static constexpr double kUniformityTolerance = 1e-9;

  /// Validates strictly increasing, uniform edges (n+1 of them) and n counts.
  AmplitudeHistogram(std::vector<double> edges, std::vector<double> counts,
                     std::size_t underflow = 0, std::size_t overflow = 0);

  /// Rebuilds edges from uniformly spaced bin centres.
  static AmplitudeHistogram from_centers(std::span<const double> centers,
                                         std::vector<double> counts);

  std::size_t n_bins() const noexcept { return counts_.size(); }
  double bin_width() const noexcept { return width_; }
  double center(std::size_t b) const noexcept { return edges_[b] + 0.5 * width_; }
  std::vector<double> centers() const;
  const std::vector<double>& edges() const noexcept { return edges_; }
  const std::vector<double>& counts() const noexcept { return counts_; }
  double total() const noexcept;
  std::size_t nonempty_bins() const noexcept;
  std::size_t underflow() const noexcept { return underflow_; }
  std::size_t overflow() const noexcept { return overflow_; }

private:
  std::vector<double> edges_;
  std::vector<double> counts_;
  double width_ = 0.0;
  std::size_t underflow_ = 0;
  std::size_t overflow_ = 0;
};

struct AmplitudeRange {
  double min = 0.0;
  double max = 0.0;
};

/// Fixed-width binning. Without a range the observed [min, max] is used and
/// the maximum sample lands in the last bin. Samples outside an explicit range
/// are tallied as under/overflow.
AmplitudeHistogram build_histogram(std::span<const double> samples, std::size_t n_bins,
                                   std::optional<AmplitudeRange> range = std::nullopt);

/// Observed [min, max] over two sample sets, so that the heralded and
/// non-heralded spectra share one binning.
AmplitudeRange joint_range(std::span<const double> a, std::span<const double> b);

struct GaussianPeak {
  double amplitude = 0.0; ///< height, counts per bin
  double center = 0.0;
  double width = 1.0;     ///< sigma
  double u_amplitude = 0.0;
  double u_center = 0.0;
  double u_width = 0.0;

  double value(double x) const noexcept;
};

struct FitQuality {
  double chi_square = 0.0;
  double reduced_chi_square = 0.0;
  double reduced_total_sum_of_squares = 0.0;
  double ratio = 0.0;
  long degrees_of_freedom = 0;
};

enum class FitObjective {
  /// Sum of squared residuals, covariance scaled by the residual variance.
  least_squares,
  /// Binned Poisson likelihood (Fisher scoring inside Levenberg-Marquardt).
  poisson,
};

struct FitOptions {
  FitObjective objective = FitObjective::poisson;
  std::size_t max_iterations = 200;
  double cost_tolerance = 1e-10;
  /// Adds a constant offset term to the model.
  bool with_offset = false;
  /// Holds centres and widths at the initial values and fits heights only.
  /// Suits a sparse spectrum whose peak shapes are known from a richer one.
  bool fixed_shape = false;
};

struct MixtureFit {
  std::vector<GaussianPeak> peaks; ///< sorted by centre; index = photon number
  /// Parameters ordered (A_0, x_0, sigma_0, A_1, ...), then the offset if fitted.
  Eigen::MatrixXd covariance;
  FitQuality quality;
  std::optional<double> offset;
  double final_cost = 0.0;
  std::size_t iterations = 0;
  FitObjective objective = FitObjective::poisson;

  std::size_t n_parameters() const noexcept {
    return 3 * peaks.size() + (offset ? 1 : 0);
  }
  /// Model prediction at amplitude x.
  double model(double x) const noexcept;
};

/// Seeds from local maxima of a smoothed histogram, ranked by prominence on a
/// log scale, at least three bins apart, returned ordered by position.
std::vector<GaussianPeak> find_initial_peaks(const AmplitudeHistogram& hist, std::size_t n_peaks);

/// Completes (centre, width) guesses with heights read off the histogram.
std::vector<GaussianPeak> seed_peaks(const AmplitudeHistogram& hist,
                                     std::span<const double> centers,
                                     std::span<const double> widths);

MixtureFit fit_mixture(const AmplitudeHistogram& hist, std::size_t n_peaks,
                       std::optional<std::vector<GaussianPeak>> init = std::nullopt,
                       const FitOptions& options = {});

struct GatePairFit {
  MixtureFit on;
  MixtureFit off;
};

/// Fits the heralded spectrum, then the non-heralded one. With shared_shape
/// the second fit keeps the heralded centres and widths and adjusts heights
/// only: the same detector produces both spectra, and the non-heralded one
/// is too sparse above one photon to pin a peak shape down by itself.
GatePairFit fit_gate_pair(const AmplitudeHistogram& on, const AmplitudeHistogram& off, std::size_t n_peaks,
                          std::optional<std::vector<GaussianPeak>> init = std::nullopt,
                          const FitOptions& options = {}, bool shared_shape = true);

/// Event counts from the peak integrals, with uncertainties propagated from
/// the fit covariance (the amplitude-width correlation included).
CountVector extract_counts(const MixtureFit& fit, double bin_width);

/// Reduced chi-square with Poisson bin variances max(count, 1) over the
/// reduced total sum of squares about the mean bin count.
FitQuality assess_quality(const MixtureFit& fit, const AmplitudeHistogram& hist);

} // namespace pnrcal
