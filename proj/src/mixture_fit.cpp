// Levenberg-Marquardt fit of a Gaussian mixture to a binned amplitude
// spectrum, plus the peak-seeding heuristic.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "pnrcal/errors.hpp"
#include "pnrcal/histogram.hpp"

namespace pnrcal {

namespace {

constexpr double kMuFloor = 1e-12;
constexpr double kMinWidthInBins = 0.25;
constexpr double kStepTolerance = 1e-11;

class MixtureProblem {
public:
  MixtureProblem(const AmplitudeHistogram& hist, std::size_t n_peaks, const FitOptions& opt)
      : x_(hist.centers()), n_(hist.counts()), n_peaks_(n_peaks), opt_(opt),
        width_(hist.bin_width()), lo_(hist.edges().front()), hi_(hist.edges().back()) {}

  Eigen::Index n_params() const {
    return static_cast<Eigen::Index>(3 * n_peaks_ + (opt_.with_offset ? 1 : 0));
  }

  Eigen::VectorXd model(const Eigen::VectorXd& p) const {
    Eigen::VectorXd mu(static_cast<Eigen::Index>(x_.size()));
    const double c = opt_.with_offset ? p(n_params() - 1) : 0.0;
    for (std::size_t b = 0; b < x_.size(); ++b) {
      double m = c;
      for (std::size_t i = 0; i < n_peaks_; ++i) {
        const auto k = static_cast<Eigen::Index>(3 * i);
        const double z = (x_[b] - p(k + 1)) / p(k + 2);
        m += p(k) * std::exp(-0.5 * z * z);
      }
      mu(static_cast<Eigen::Index>(b)) = m;
    }
    return mu;
  }

  Eigen::MatrixXd jacobian(const Eigen::VectorXd& p) const {
    Eigen::MatrixXd j(static_cast<Eigen::Index>(x_.size()), n_params());
    for (std::size_t b = 0; b < x_.size(); ++b) {
      const auto row = static_cast<Eigen::Index>(b);
      for (std::size_t i = 0; i < n_peaks_; ++i) {
        const auto k = static_cast<Eigen::Index>(3 * i);
        const double a = p(k);
        const double s = p(k + 2);
        const double d = x_[b] - p(k + 1);
        const double e = std::exp(-0.5 * d * d / (s * s));
        j(row, k) = e;
        j(row, k + 1) = a * e * d / (s * s);
        j(row, k + 2) = a * e * d * d / (s * s * s);
      }
      if (opt_.with_offset) j(row, n_params() - 1) = 1.0;
    }
    return j;
  }

  /// Per-bin weights of the normal equations.
  Eigen::VectorXd weights(const Eigen::VectorXd& mu) const {
    if (opt_.objective == FitObjective::least_squares) {
      return Eigen::VectorXd::Ones(mu.size());
    }
    return mu.unaryExpr([](double m) { return 1.0 / std::max(m, kMuFloor); });
  }

  /// Least squares: residual sum of squares. Poisson: deviance.
  double cost(const Eigen::VectorXd& mu) const {
    double c = 0.0;
    for (std::size_t b = 0; b < n_.size(); ++b) {
      const double m = mu(static_cast<Eigen::Index>(b));
      if (opt_.objective == FitObjective::least_squares) {
        const double r = n_[b] - m;
        c += r * r;
      } else {
        const double mf = std::max(m, kMuFloor);
        c += n_[b] > 0.0 ? 2.0 * (mf - n_[b] + n_[b] * std::log(n_[b] / mf)) : 2.0 * mf;
      }
    }
    return c;
  }

  Eigen::VectorXd residuals(const Eigen::VectorXd& mu) const {
    Eigen::VectorXd r(mu.size());
    for (Eigen::Index b = 0; b < mu.size(); ++b) r(b) = n_[static_cast<std::size_t>(b)] - mu(b);
    return r;
  }

  void project(Eigen::VectorXd& p) const {
    for (std::size_t i = 0; i < n_peaks_; ++i) {
      const auto k = static_cast<Eigen::Index>(3 * i);
      p(k) = std::max(p(k), 0.0);
      p(k + 1) = std::clamp(p(k + 1), lo_, hi_);
      p(k + 2) = std::max(p(k + 2), kMinWidthInBins * width_);
    }
    if (opt_.with_offset && opt_.objective == FitObjective::poisson) {
      p(n_params() - 1) = std::max(p(n_params() - 1), 0.0);
    }
  }

  /// Parameters sitting on a bound with the descent direction g pointing
  /// out of the feasible region.
  std::vector<bool> active_bounds(const Eigen::VectorXd& p, const Eigen::VectorXd& g) const {
    std::vector<bool> active(static_cast<std::size_t>(p.size()), false);
    for (std::size_t i = 0; i < n_peaks_; ++i) {
      const auto k = static_cast<Eigen::Index>(3 * i);
      active[3 * i] = p(k) <= 0.0 && g(k) < 0.0;
      active[3 * i + 1] = opt_.fixed_shape || (p(k + 1) <= lo_ && g(k + 1) < 0.0) ||
                          (p(k + 1) >= hi_ && g(k + 1) > 0.0);
      active[3 * i + 2] = opt_.fixed_shape || (p(k + 2) <= kMinWidthInBins * width_ && g(k + 2) < 0.0);
    }
    if (opt_.with_offset && opt_.objective == FitObjective::poisson) {
      const auto k = n_params() - 1;
      active[static_cast<std::size_t>(k)] = p(k) <= 0.0 && g(k) < 0.0;
    }
    return active;
  }

  /// Largest parameter step in natural units: counts for heights and offset,
  /// bin widths for centres and widths.
  double step_size(const Eigen::VectorXd& from, const Eigen::VectorXd& to) const {
    double s = 0.0;
    for (Eigen::Index k = 0; k < from.size(); ++k) {
      const bool positional = k < static_cast<Eigen::Index>(3 * n_peaks_) && (k % 3) != 0;
      const double scale = positional ? width_ : std::max(std::abs(from(k)), 1.0);
      s = std::max(s, std::abs(to(k) - from(k)) / scale);
    }
    return s;
  }

  std::size_t n_bins() const { return x_.size(); }

private:
  std::vector<double> x_;
  std::vector<double> n_;
  std::size_t n_peaks_;
  FitOptions opt_;
  double width_;
  double lo_;
  double hi_;
};

/// Pseudo-inverse of a symmetric positive semidefinite matrix after
/// Jacobi scaling, so directions the data do not constrain get zero variance
/// instead of blowing up.
Eigen::MatrixXd spd_pseudo_inverse(const Eigen::MatrixXd& m) {
  const Eigen::Index n = m.rows();
  Eigen::VectorXd d(n);
  for (Eigen::Index k = 0; k < n; ++k) d(k) = m(k, k) > 0.0 ? 1.0 / std::sqrt(m(k, k)) : 1.0;
  const Eigen::MatrixXd scaled = d.asDiagonal() * m * d.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(scaled);
  const Eigen::VectorXd& ev = eig.eigenvalues();
  const double cutoff = 1e-14 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd inv(n);
  for (Eigen::Index k = 0; k < n; ++k) inv(k) = ev(k) > cutoff ? 1.0 / ev(k) : 0.0;
  const Eigen::MatrixXd pinv = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  Eigen::MatrixXd out = d.asDiagonal() * pinv * d.asDiagonal();
  return 0.5 * (out + out.transpose());
}

std::vector<double> smooth(const std::vector<double>& counts, std::size_t half_window) {
  const std::size_t n = counts.size();
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t b = 0; b < n; ++b) prefix[b + 1] = prefix[b] + counts[b];
  std::vector<double> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t lo = b >= half_window ? b - half_window : 0;
    const std::size_t hi = std::min(n - 1, b + half_window);
    out[b] = (prefix[hi + 1] - prefix[lo]) / static_cast<double>(hi - lo + 1);
  }
  return out;
}

double height_near(const AmplitudeHistogram& hist, double x) {
  const double pos = (x - hist.edges().front()) / hist.bin_width();
  const auto n = static_cast<long>(hist.n_bins());
  const long b = std::clamp(static_cast<long>(std::floor(pos)), 0L, n - 1);
  double sum = 0.0;
  int used = 0;
  for (long k = std::max(0L, b - 1); k <= std::min(n - 1, b + 1); ++k) {
    sum += hist.counts()[static_cast<std::size_t>(k)];
    ++used;
  }
  return std::max(sum / used, 1e-3);
}

} // namespace

std::vector<GaussianPeak> find_initial_peaks(const AmplitudeHistogram& hist, std::size_t n_peaks) {
  const std::size_t n = hist.n_bins();
  const std::size_t half = std::max<std::size_t>(1, n / 100);
  const std::vector<double> lin = smooth(hist.counts(), half);
  std::vector<double> level(n);
  std::transform(lin.begin(), lin.end(), level.begin(), [](double c) { return std::log1p(c); });

  struct Candidate {
    std::size_t bin;
    double prominence;
  };
  std::vector<Candidate> cands;
  for (std::size_t b = 0; b < n; ++b) {
    const bool left_ok = b == 0 || level[b] > level[b - 1];
    const bool right_ok = b + 1 == n || level[b] >= level[b + 1];
    if (!left_ok || !right_ok || lin[b] <= 0.0) continue;
    // Topographic prominence: drop to the lowest point before higher ground.
    double left_min = level[b];
    for (std::size_t k = b; k-- > 0;) {
      if (level[k] > level[b]) break;
      left_min = std::min(left_min, level[k]);
    }
    double right_min = level[b];
    for (std::size_t k = b + 1; k < n; ++k) {
      if (level[k] > level[b]) break;
      right_min = std::min(right_min, level[k]);
    }
    cands.push_back({b, level[b] - std::max(left_min, right_min)});
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.prominence > b.prominence; });

  constexpr std::size_t kMinSeparation = 3;
  std::vector<std::size_t> chosen;
  for (const auto& c : cands) {
    const bool clear = std::all_of(chosen.begin(), chosen.end(), [&](std::size_t s) {
      return (c.bin > s ? c.bin - s : s - c.bin) >= kMinSeparation;
    });
    if (clear) chosen.push_back(c.bin);
    if (chosen.size() == n_peaks) break;
  }
  if (chosen.size() < n_peaks) {
    throw InitializationError("found " + std::to_string(chosen.size()) + " local maxima, need " +
                              std::to_string(n_peaks));
  }
  std::sort(chosen.begin(), chosen.end());

  std::vector<GaussianPeak> peaks;
  for (std::size_t b : chosen) {
    // Half width at half maximum, stopping at valleys.
    const double half_max = 0.5 * lin[b];
    auto walk = [&](int dir) {
      std::size_t k = b;
      double prev = lin[b];
      double dist = 0.0;
      while (true) {
        if ((dir < 0 && k == 0) || (dir > 0 && k + 1 == n)) break;
        k = dir < 0 ? k - 1 : k + 1;
        dist += 1.0;
        if (lin[k] <= half_max) return dist;
        if (lin[k] > prev) return 0.5 * dist;
        prev = lin[k];
      }
      return dist;
    };
    const double hwhm_bins = 0.5 * (walk(-1) + walk(+1));
    GaussianPeak p;
    p.center = hist.center(b);
    p.width = std::max(hwhm_bins / std::sqrt(2.0 * std::log(2.0)), 1.0) * hist.bin_width();
    p.amplitude = std::max(lin[b], 1e-3);
    peaks.push_back(p);
  }
  return peaks;
}

std::vector<GaussianPeak> seed_peaks(const AmplitudeHistogram& hist, std::span<const double> centers,
                                     std::span<const double> widths) {
  if (centers.size() != widths.size()) throw DomainError("seed centres and widths differ in length");
  std::vector<GaussianPeak> peaks;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    if (!(widths[i] > 0.0)) throw DomainError("seed widths must be positive");
    GaussianPeak p;
    p.center = centers[i];
    p.width = widths[i];
    p.amplitude = height_near(hist, centers[i]);
    peaks.push_back(p);
  }
  return peaks;
}

MixtureFit fit_mixture(const AmplitudeHistogram& hist, std::size_t n_peaks,
                       std::optional<std::vector<GaussianPeak>> init, const FitOptions& options) {
  if (n_peaks == 0) throw DomainError("mixture needs at least one peak");
  if (hist.nonempty_bins() < 3 * n_peaks) {
    throw DomainError("histogram has " + std::to_string(hist.nonempty_bins()) +
                      " nonempty bins, need at least " + std::to_string(3 * n_peaks));
  }
  if (options.fixed_shape && !init) throw DomainError("a fixed-shape fit needs initial peaks");
  std::vector<GaussianPeak> start = init ? *init : find_initial_peaks(hist, n_peaks);
  if (start.size() != n_peaks) throw DomainError("initial peak list does not match n_peaks");

  const MixtureProblem problem(hist, n_peaks, options);
  const Eigen::Index np = problem.n_params();
  Eigen::VectorXd p(np);
  for (std::size_t i = 0; i < n_peaks; ++i) {
    const auto k = static_cast<Eigen::Index>(3 * i);
    p(k) = start[i].amplitude;
    p(k + 1) = start[i].center;
    p(k + 2) = start[i].width;
  }
  if (options.with_offset) p(np - 1) = 0.0;
  problem.project(p);

  Eigen::VectorXd mu = problem.model(p);
  double cost = problem.cost(mu);
  double lambda = 1e-3;
  bool converged = false;
  std::size_t iter = 0;

  for (; iter < options.max_iterations && !converged; ++iter) {
    const Eigen::MatrixXd j = problem.jacobian(p);
    const Eigen::VectorXd w = problem.weights(mu);
    const Eigen::MatrixXd h = j.transpose() * w.asDiagonal() * j;
    const Eigen::VectorXd g = j.transpose() * (w.array() * problem.residuals(mu).array()).matrix();
    const double diag_floor = 1e-12 * std::max(h.diagonal().maxCoeff(), 1e-300);
    const auto active = problem.active_bounds(p, g);

    bool accepted = false;
    Eigen::VectorXd trial;
    Eigen::VectorXd trial_mu;
    double trial_cost = cost;
    while (lambda < 1e16) {
      Eigen::MatrixXd a = h;
      for (Eigen::Index k = 0; k < np; ++k) a(k, k) += lambda * std::max(h(k, k), diag_floor);
      Eigen::VectorXd rhs = g;
      // Parameters pinned at a bound they are pushed against stay put, so the
      // projected step remains a descent step in the others.
      for (Eigen::Index k = 0; k < np; ++k) {
        if (!active[static_cast<std::size_t>(k)]) continue;
        a.row(k).setZero();
        a.col(k).setZero();
        a(k, k) = 1.0;
        rhs(k) = 0.0;
      }
      const Eigen::VectorXd delta = a.ldlt().solve(rhs);
      trial = p + delta;
      problem.project(trial);
      trial_mu = problem.model(trial);
      trial_cost = problem.cost(trial_mu);
      // Near the optimum the cost is flat to rounding; a Gauss-Newton step
      // that does not measurably raise it is still taken.
      const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(cost, 1.0);
      if (std::isfinite(trial_cost) && (trial_cost < cost || (lambda <= 1e-6 && trial_cost <= cost + noise))) {
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) {
      // No descent direction left at this precision.
      converged = true;
      break;
    }
    const double step = problem.step_size(p, trial);
    const double rel_change = cost > 0.0 ? (cost - trial_cost) / cost : 0.0;
    p = trial;
    mu = trial_mu;
    cost = trial_cost;
    lambda = std::max(lambda / 10.0, 1e-12);
    if (cost == 0.0 || step < kStepTolerance ||
        (std::abs(rel_change) < options.cost_tolerance && step < 1e3 * kStepTolerance && lambda <= 1e-9)) {
      converged = true;
    }
  }
  if (!converged) {
    throw FitError("mixture fit did not converge in " + std::to_string(options.max_iterations) +
                       " iterations",
                   cost);
  }

  // Covariance at the solution. Held parameters get no variance.
  Eigen::MatrixXd j = problem.jacobian(p);
  if (options.fixed_shape) {
    for (std::size_t i = 0; i < n_peaks; ++i) {
      j.col(static_cast<Eigen::Index>(3 * i + 1)).setZero();
      j.col(static_cast<Eigen::Index>(3 * i + 2)).setZero();
    }
  }
  Eigen::MatrixXd cov;
  if (options.objective == FitObjective::poisson) {
    const Eigen::VectorXd w = problem.weights(mu);
    cov = spd_pseudo_inverse(j.transpose() * w.asDiagonal() * j);
  } else {
    const double dof = static_cast<double>(problem.n_bins()) - static_cast<double>(np);
    const double s2 = dof > 0.0 ? cost / dof : 0.0;
    cov = s2 * spd_pseudo_inverse(j.transpose() * j);
  }

  if (options.fixed_shape) {
    for (std::size_t i = 0; i < n_peaks; ++i) {
      for (Eigen::Index k : {static_cast<Eigen::Index>(3 * i + 1), static_cast<Eigen::Index>(3 * i + 2)}) {
        cov.row(k).setZero();
        cov.col(k).setZero();
      }
    }
  }

  // Order peaks by centre and permute the covariance to match.
  std::vector<std::size_t> order(n_peaks);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p(static_cast<Eigen::Index>(3 * a + 1)) < p(static_cast<Eigen::Index>(3 * b + 1));
  });
  Eigen::VectorXi perm(np);
  for (std::size_t i = 0; i < n_peaks; ++i) {
    for (int c = 0; c < 3; ++c) {
      perm(static_cast<Eigen::Index>(3 * i + c)) = static_cast<int>(3 * order[i] + c);
    }
  }
  if (options.with_offset) perm(np - 1) = static_cast<int>(np - 1);

  MixtureFit fit;
  fit.objective = options.objective;
  fit.covariance.resize(np, np);
  for (Eigen::Index r = 0; r < np; ++r) {
    for (Eigen::Index c = 0; c < np; ++c) fit.covariance(r, c) = cov(perm(r), perm(c));
  }
  for (std::size_t i = 0; i < n_peaks; ++i) {
    const auto k = static_cast<Eigen::Index>(3 * order[i]);
    const auto s = static_cast<Eigen::Index>(3 * i);
    GaussianPeak pk;
    pk.amplitude = p(k);
    pk.center = p(k + 1);
    pk.width = p(k + 2);
    pk.u_amplitude = std::sqrt(std::max(fit.covariance(s, s), 0.0));
    pk.u_center = std::sqrt(std::max(fit.covariance(s + 1, s + 1), 0.0));
    pk.u_width = std::sqrt(std::max(fit.covariance(s + 2, s + 2), 0.0));
    fit.peaks.push_back(pk);
  }
  if (options.with_offset) fit.offset = p(np - 1);
  fit.final_cost = cost;
  fit.iterations = iter;
  if (hist.nonempty_bins() > fit.n_parameters()) {
    fit.quality = assess_quality(fit, hist);
  } else {
    // Exactly determined: no goodness of fit to report.
    fit.quality.degrees_of_freedom = static_cast<long>(hist.nonempty_bins()) -
                                     static_cast<long>(fit.n_parameters());
  }
  return fit;
}

GatePairFit fit_gate_pair(const AmplitudeHistogram& on, const AmplitudeHistogram& off, std::size_t n_peaks,
                          std::optional<std::vector<GaussianPeak>> init, const FitOptions& options,
                          bool shared_shape) {
  // Heights are re-read from the target histogram; only positions and widths carry over.
  auto reseed = [](const AmplitudeHistogram& hist, const std::vector<GaussianPeak>& peaks) {
    std::vector<double> centers;
    std::vector<double> widths;
    for (const auto& p : peaks) {
      centers.push_back(p.center);
      widths.push_back(p.width);
    }
    return seed_peaks(hist, centers, widths);
  };

  GatePairFit out{fit_mixture(on, n_peaks, init, options), {}};
  if (shared_shape) {
    FitOptions held = options;
    held.fixed_shape = true;
    out.off = fit_mixture(off, n_peaks, reseed(off, out.on.peaks), held);
  } else if (init) {
    out.off = fit_mixture(off, n_peaks, reseed(off, *init), options);
  } else {
    out.off = fit_mixture(off, n_peaks, std::nullopt, options);
  }
  return out;
}

} // namespace pnrcal
