#pragma once
// Monte Carlo of the pulsed heralded-photon experiment. Serves as the
// independent ground truth for closure tests of the whole calibration chain.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pnrcal/histogram.hpp"
#include "pnrcal/model.hpp"
#include "pnrcal/uncertainty.hpp"

namespace pnrcal {

struct PeakShape {
  double center = 0.0;
  double width = 1.0;
};

struct ExperimentConfig {
  double gamma_true = 0.0;
  double xi_true = 1.0;
  double herald_prob = 1.0;     ///< P(heralding count | laser pulse)
  double background_mean = 0.0; ///< Poisson mean of accidental detections per gate
  /// Optional table-driven accidental distribution; replaces the Poisson law.
  std::vector<double> background_table;
  /// (centre, width) per photon number; beyond the list centres continue
  /// linearly and widths keep the last value.
  std::vector<PeakShape> peak_model;
  std::uint64_t n_pulses = 0;
  double rep_period_us = 25.0;
  double detector_recovery_us = 10.4;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  PeakShape peak(std::size_t n) const;
  /// Accidental photon-number distribution implied by the config, truncated
  /// where the remaining tail is below 1e-16.
  PhotonNumberDistribution background_distribution() const;
};

struct RunTallies {
  std::uint64_t pulses = 0;
  std::uint64_t heralds = 0;
  std::uint64_t true_heralds = 0;
  std::uint64_t false_heralds = 0;
  std::uint64_t heralded_detections = 0;
  std::uint64_t heralded_misses = 0;
  std::uint64_t background_photons_on = 0;
  std::uint64_t background_photons_off = 0;
  /// Gates by true detected photon number.
  std::vector<std::uint64_t> on_photon_counts;
  std::vector<std::uint64_t> off_photon_counts;

  bool consistent() const noexcept;
};

struct RawRun {
  std::vector<double> on_amplitudes;
  std::vector<double> off_amplitudes;
  RunTallies tallies;
};

struct PileupReport {
  bool pass = false;
  double rep_period_us = 0.0;
  double detector_recovery_us = 0.0;
  double margin_us = 0.0;
};

PileupReport check_pileup(const ExperimentConfig& config);

/// Deterministic given config.seed. Throws ConfigError on invalid configs,
/// including a pulse period shorter than the detector recovery.
RawRun simulate_run(const ExperimentConfig& config);

/// Heralding counts with the pump on (PDC heralds with probability
/// herald_prob per pulse, or a dark/stray count) and with PDC extinguished
/// (dark/stray only), over config.n_pulses pulses each.
HeraldStats simulate_herald_stats(const ExperimentConfig& config, double dark_rate);

/// Dark/stray rate per pulse that makes 1 - E[n_off]/E[n_on] equal xi.
double dark_rate_for_purity(double herald_prob, double xi);

struct ClosureOptions {
  std::size_t n_seeds = 2;
  std::size_t n_bins = 200;
  std::size_t n_peaks = 3;
  std::size_t jobs = 0; ///< 0: hardware concurrency
  FitObjective objective = FitObjective::poisson;
  /// Non-heralded fit reuses the heralded peak shapes (see fit_gate_pair).
  bool shared_shape = true;
  /// Dark rate for the herald statistics; defaults to the value matching xi_true.
  std::optional<double> dark_rate;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool completed = false;
  std::string failure; ///< stage and message when not completed
  std::vector<EfficiencyEstimate> estimates; ///< gamma_0..gamma_{n-1}, klyshko (missing ones skipped)
  std::vector<std::string> estimator_errors;
  double xi = 0.0;
};

struct EstimatorSummary {
  std::string estimator;
  std::size_t n = 0;
  double mean = 0.0;
  double spread = 0.0;        ///< sample standard deviation
  double standard_error = 0.0;
  double mean_uncertainty = 0.0;
  double bias = 0.0;
  double pull_mean = 0.0;
  double pull_variance = 0.0;
  std::size_t out_of_range = 0;
};

struct ClosureReport {
  ExperimentConfig config;
  ClosureOptions options;
  std::vector<SeedOutcome> seeds;
  std::vector<EstimatorSummary> summaries;

  std::size_t completed() const noexcept;
  const EstimatorSummary* summary(const std::string& estimator) const;
};

/// Calibration chain outcome for one simulated data set.
SeedOutcome calibrate_simulated_run(const ExperimentConfig& config, const ClosureOptions& options);

/// simulate -> histogram -> fit -> counts -> estimators with budgets, for
/// seeds derived from config.seed. Per-seed failures are recorded, not thrown.
ClosureReport closure_test(const ExperimentConfig& config, const ClosureOptions& options);

} // namespace pnrcal
