#include "pnrcal/histogram.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "pnrcal/errors.hpp"

namespace pnrcal {

AmplitudeHistogram::AmplitudeHistogram(std::vector<double> edges, std::vector<double> counts,
                                       std::size_t underflow, std::size_t overflow)
    : edges_(std::move(edges)), counts_(std::move(counts)), underflow_(underflow),
      overflow_(overflow) {
  if (counts_.empty() || edges_.size() != counts_.size() + 1) {
    throw DomainError("histogram needs n >= 1 bins and n + 1 edges");
  }
  width_ = (edges_.back() - edges_.front()) / static_cast<double>(counts_.size());
  if (!(width_ > 0.0) || !std::isfinite(width_)) throw DomainError("histogram edges must increase");
  for (std::size_t b = 0; b < counts_.size(); ++b) {
    const double w = edges_[b + 1] - edges_[b];
    if (!(w > 0.0)) throw DomainError("histogram edges must be strictly increasing");
    if (std::abs(w - width_) > kUniformityTolerance * width_) {
      throw DomainError("histogram bins are not uniform at bin " + std::to_string(b));
    }
    if (!(counts_[b] >= 0.0) || !std::isfinite(counts_[b])) {
      throw DomainError("histogram count at bin " + std::to_string(b) + " is negative");
    }
  }
}

AmplitudeHistogram AmplitudeHistogram::from_centers(std::span<const double> centers,
                                                    std::vector<double> counts) {
  if (centers.size() < 2) throw DomainError("need at least two bin centres to infer the bin width");
  if (centers.size() != counts.size()) throw DomainError("bin centres and counts differ in length");
  const double w = (centers.back() - centers.front()) / static_cast<double>(centers.size() - 1);
  for (std::size_t b = 0; b + 1 < centers.size(); ++b) {
    const double step = centers[b + 1] - centers[b];
    if (!(step > 0.0) || std::abs(step - w) > kUniformityTolerance * std::abs(w) +
                                                  4.0 * std::numeric_limits<double>::epsilon() *
                                                      std::max(std::abs(centers[b]), std::abs(centers[b + 1]))) {
      throw DomainError("bin centres are not uniformly spaced at row " + std::to_string(b + 1));
    }
  }
  std::vector<double> edges(centers.size() + 1);
  const double lo = centers.front() - 0.5 * w;
  for (std::size_t b = 0; b < edges.size(); ++b) edges[b] = lo + static_cast<double>(b) * w;
  return AmplitudeHistogram(std::move(edges), std::move(counts));
}

std::vector<double> AmplitudeHistogram::centers() const {
  std::vector<double> c(counts_.size());
  for (std::size_t b = 0; b < c.size(); ++b) c[b] = center(b);
  return c;
}

double AmplitudeHistogram::total() const noexcept {
  return std::accumulate(counts_.begin(), counts_.end(), 0.0);
}

std::size_t AmplitudeHistogram::nonempty_bins() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(counts_.begin(), counts_.end(), [](double c) { return c > 0.0; }));
}

AmplitudeRange joint_range(std::span<const double> a, std::span<const double> b) {
  if (a.empty() && b.empty()) throw DomainError("cannot take the range of empty sample sets");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (auto set : {a, b}) {
    for (double v : set) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi == lo) {
    const double half = lo == 0.0 ? 0.5 : 0.5 * std::abs(lo);
    lo -= half;
    hi += half;
  }
  return {lo, hi};
}

AmplitudeHistogram build_histogram(std::span<const double> samples, std::size_t n_bins,
                                   std::optional<AmplitudeRange> range) {
  if (n_bins < 2) throw DomainError("histogram needs at least 2 bins");
  if (samples.empty()) throw DomainError("cannot histogram an empty sample set");

  double lo = 0.0;
  double hi = 0.0;
  if (range) {
    lo = range->min;
    hi = range->max;
    if (!(hi > lo)) throw DomainError("histogram range must satisfy min < max");
  } else {
    const auto [mn, mx] = std::minmax_element(samples.begin(), samples.end());
    lo = *mn;
    hi = *mx;
    if (hi == lo) {
      const double half = lo == 0.0 ? 0.5 : 0.5 * std::abs(lo);
      lo -= half;
      hi += half;
    }
  }

  const double width = (hi - lo) / static_cast<double>(n_bins);
  std::vector<double> edges(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b) edges[b] = lo + static_cast<double>(b) * width;
  edges.back() = hi;

  std::vector<double> counts(n_bins, 0.0);
  std::size_t under = 0;
  std::size_t over = 0;
  for (double s : samples) {
    if (s < lo) {
      ++under;
      continue;
    }
    if (s > hi) {
      ++over;
      continue;
    }
    auto b = static_cast<std::size_t>((s - lo) / width);
    b = std::min(b, n_bins - 1);
    counts[b] += 1.0;
  }
  if (under + over == samples.size()) throw DomainError("no sample falls inside the histogram range");
  return AmplitudeHistogram(std::move(edges), std::move(counts), under, over);
}

double GaussianPeak::value(double x) const noexcept {
  const double z = (x - center) / width;
  return amplitude * std::exp(-0.5 * z * z);
}

double MixtureFit::model(double x) const noexcept {
  double mu = offset.value_or(0.0);
  for (const auto& p : peaks) mu += p.value(x);
  return mu;
}

CountVector extract_counts(const MixtureFit& fit, double bin_width) {
  if (!(bin_width > 0.0)) throw DomainError("bin width must be positive");
  const std::size_t n = fit.peaks.size();
  const double k = std::sqrt(2.0 * std::numbers::pi) / bin_width;

  // d C_i / d(A_i, x_i, sigma_i) = (sigma_i k, 0, A_i k)
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                            static_cast<Eigen::Index>(fit.n_parameters()));
  std::vector<double> counts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = fit.peaks[i];
    counts[i] = p.amplitude * p.width * k;
    const auto r = static_cast<Eigen::Index>(i);
    g(r, 3 * r) = p.width * k;
    g(r, 3 * r + 2) = p.amplitude * k;
  }

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  if (fit.covariance.rows() == static_cast<Eigen::Index>(fit.n_parameters())) {
    cov = g * fit.covariance * g.transpose();
    cov = 0.5 * (cov + cov.transpose());
  }
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = std::sqrt(std::max(cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)), 0.0));
  }
  return CountVector(std::move(counts), std::move(u), std::move(cov));
}

FitQuality assess_quality(const MixtureFit& fit, const AmplitudeHistogram& hist) {
  const long dof = static_cast<long>(hist.nonempty_bins()) - static_cast<long>(fit.n_parameters());
  if (dof <= 0) throw DomainError("fit has no degrees of freedom left");

  const auto& counts = hist.counts();
  const double mean = hist.total() / static_cast<double>(counts.size());
  double chi2 = 0.0;
  double tss = 0.0;
  for (std::size_t b = 0; b < counts.size(); ++b) {
    const double r = counts[b] - fit.model(hist.center(b));
    chi2 += r * r / std::max(counts[b], 1.0);
    const double d = counts[b] - mean;
    tss += d * d;
  }

  FitQuality q;
  q.chi_square = chi2;
  q.degrees_of_freedom = dof;
  q.reduced_chi_square = chi2 / static_cast<double>(dof);
  q.reduced_total_sum_of_squares = counts.size() > 1 ? tss / static_cast<double>(counts.size() - 1) : 0.0;
  if (q.reduced_total_sum_of_squares > 0.0) {
    q.ratio = q.reduced_chi_square / q.reduced_total_sum_of_squares;
  } else {
    q.ratio = chi2 == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return q;
}

} // namespace pnrcal
