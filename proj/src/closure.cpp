// End-to-end closure of the calibration chain on simulated data.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "pnrcal/errors.hpp"
#include "pnrcal/simulator.hpp"

namespace pnrcal {

namespace {

std::vector<double> budget_gradient(const Estimator& f, const InputVector& inputs) {
  try {
    return jacobian(f, inputs);
  } catch (const DomainError&) {
    // A zero count or xi == 1 leaves no room for central differences.
    return f.gradient(inputs.values);
  }
}

std::string stage_error(const char* stage, const std::exception& e) {
  return std::string(stage) + ": " + e.what();
}

} // namespace

std::size_t ClosureReport::completed() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(seeds.begin(), seeds.end(), [](const SeedOutcome& s) { return s.completed; }));
}

const EstimatorSummary* ClosureReport::summary(const std::string& estimator) const {
  const auto it = std::find_if(summaries.begin(), summaries.end(),
                               [&](const EstimatorSummary& s) { return s.estimator == estimator; });
  return it == summaries.end() ? nullptr : &*it;
}

SeedOutcome calibrate_simulated_run(const ExperimentConfig& config, const ClosureOptions& options) {
  SeedOutcome out;
  out.seed = config.seed;

  RawRun run;
  try {
    run = simulate_run(config);
  } catch (const std::exception& e) {
    out.failure = stage_error("simulate", e);
    return out;
  }

  std::vector<double> centers;
  std::vector<double> widths;
  for (std::size_t i = 0; i < options.n_peaks; ++i) {
    centers.push_back(config.peak(i).center);
    widths.push_back(config.peak(i).width);
  }

  FitOptions fit_options;
  fit_options.objective = options.objective;
  CountVector on_counts;
  CountVector off_counts;
  try {
    const auto range = joint_range(run.on_amplitudes, run.off_amplitudes);
    const auto on_hist = build_histogram(run.on_amplitudes, options.n_bins, range);
    const auto off_hist = build_histogram(run.off_amplitudes, options.n_bins, range);
    const auto fits = fit_gate_pair(on_hist, off_hist, options.n_peaks, seed_peaks(on_hist, centers, widths),
                                    fit_options, options.shared_shape);
    on_counts = extract_counts(fits.on, on_hist.bin_width());
    off_counts = extract_counts(fits.off, off_hist.bin_width());
  } catch (const std::exception& e) {
    out.failure = stage_error("fit", e);
    return out;
  }

  HeraldPurity xi;
  try {
    const double dark = options.dark_rate.value_or(dark_rate_for_purity(config.herald_prob, config.xi_true));
    xi = estimate_xi(simulate_herald_stats(config, dark));
    out.xi = xi.xi;
  } catch (const std::exception& e) {
    out.failure = stage_error("herald", e);
    return out;
  }

  InputVector inputs;
  try {
    inputs = calibration_inputs(on_counts, off_counts, xi);
  } catch (const std::exception& e) {
    out.failure = stage_error("inputs", e);
    return out;
  }

  const CalibrationLayout layout{options.n_peaks};
  std::vector<Estimator> estimators;
  for (std::size_t i = 0; i < options.n_peaks; ++i) estimators.push_back(gamma_estimator(layout, i));
  estimators.push_back(klyshko_estimator(layout));
  for (std::size_t k = 0; k < estimators.size(); ++k) {
    const auto& f = estimators[k];
    try {
      const double value = f.value(inputs.values);
      const auto budget = propagate(budget_gradient(f, inputs), inputs, f.name);
      const auto source = k < options.n_peaks ? EstimateSource::photon(k) : EstimateSource::klyshko();
      out.estimates.push_back(EfficiencyEstimate::make(value, budget.combined, source));
    } catch (const std::exception& e) {
      out.estimator_errors.push_back(f.name + ": " + e.what());
    }
  }
  out.completed = true;
  return out;
}

ClosureReport closure_test(const ExperimentConfig& config, const ClosureOptions& options) {
  if (options.n_seeds < 2) throw DomainError("closure test needs at least two seeds");
  if (options.n_peaks < 1) throw DomainError("closure test needs at least one peak");
  config.validate();

  ClosureReport report;
  report.config = config;
  report.options = options;
  report.seeds.resize(options.n_seeds);

  const std::size_t jobs = std::max<std::size_t>(
      1, std::min(options.n_seeds,
                  options.jobs ? options.jobs : static_cast<std::size_t>(std::thread::hardware_concurrency())));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t s = next++; s < options.n_seeds; s = next++) {
      ExperimentConfig c = config;
      c.seed = config.seed + s;
      report.seeds[s] = calibrate_simulated_run(c, options);
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }

  std::vector<std::string> labels;
  for (std::size_t i = 0; i < options.n_peaks; ++i) labels.push_back(EstimateSource::photon(i).label());
  labels.push_back(EstimateSource::klyshko().label());

  for (const auto& label : labels) {
    EstimatorSummary sum;
    sum.estimator = label;
    std::vector<double> values;
    std::vector<double> pulls;
    double u_total = 0.0;
    for (const auto& seed : report.seeds) {
      if (!seed.completed) continue;
      for (const auto& e : seed.estimates) {
        if (e.source.label() != label) continue;
        values.push_back(e.gamma);
        u_total += e.u_gamma;
        if (e.out_of_range()) ++sum.out_of_range;
        if (e.u_gamma > 0.0) pulls.push_back((e.gamma - config.gamma_true) / e.u_gamma);
      }
    }
    sum.n = values.size();
    if (!values.empty()) {
      const double n = static_cast<double>(values.size());
      for (double v : values) sum.mean += v;
      sum.mean /= n;
      double ss = 0.0;
      for (double v : values) ss += (v - sum.mean) * (v - sum.mean);
      sum.spread = values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      sum.standard_error = sum.spread / std::sqrt(n);
      sum.mean_uncertainty = u_total / n;
      sum.bias = sum.mean - config.gamma_true;
    }
    if (!pulls.empty()) {
      const double n = static_cast<double>(pulls.size());
      for (double p : pulls) sum.pull_mean += p;
      sum.pull_mean /= n;
      double ss = 0.0;
      for (double p : pulls) ss += (p - sum.pull_mean) * (p - sum.pull_mean);
      sum.pull_variance = pulls.size() > 1 ? ss / (n - 1.0) : 0.0;
    }
    report.summaries.push_back(sum);
  }
  return report;
}

} // namespace pnrcal
