#include "pnrcal/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pnrcal/errors.hpp"

namespace pnrcal {

namespace {

enum class Stream : std::uint64_t { heralds = 1, on_gates = 2, off_gates = 3, herald_stats = 4 };

std::mt19937_64 make_stream(std::uint64_t seed, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x70a3c5e1u};
  return std::mt19937_64(seq);
}

void require_unit(double v, const char* field) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ConfigError(std::string(field) + " must lie in [0, 1]", field);
  }
}

/// Accidental photon-number sampler: Poisson or table driven.
class BackgroundSampler {
public:
  explicit BackgroundSampler(const ExperimentConfig& c)
      : use_table_(!c.background_table.empty()), poisson_(c.background_mean),
        table_(c.background_table.begin(), c.background_table.end()) {}

  std::uint64_t operator()(std::mt19937_64& rng) {
    if (use_table_) return static_cast<std::uint64_t>(table_(rng));
    if (poisson_.mean() == 0.0) return 0;
    return static_cast<std::uint64_t>(poisson_(rng));
  }

private:
  bool use_table_;
  std::poisson_distribution<long> poisson_;
  std::discrete_distribution<std::size_t> table_;
};

void bump(std::vector<std::uint64_t>& hist, std::uint64_t n) {
  if (hist.size() <= n) hist.resize(n + 1, 0);
  ++hist[n];
}

} // namespace

void ExperimentConfig::validate() const {
  require_unit(gamma_true, "gamma");
  require_unit(xi_true, "xi");
  require_unit(herald_prob, "herald_prob");
  if (!(background_mean >= 0.0) || !std::isfinite(background_mean)) {
    throw ConfigError("background_mean must be >= 0", "background_mean");
  }
  if (!background_table.empty()) {
    double sum = 0.0;
    for (double p : background_table) {
      if (!(p >= 0.0)) throw ConfigError("background_table entries must be >= 0", "background_table");
      sum += p;
    }
    if (!(sum > 0.0)) throw ConfigError("background_table must have a positive sum", "background_table");
  }
  if (peak_model.size() < 2) {
    throw ConfigError("peak model needs at least two (centre, width) entries", "centers");
  }
  for (const auto& p : peak_model) {
    if (!(p.width > 0.0)) throw ConfigError("peak widths must be positive", "widths");
  }
  for (std::size_t i = 1; i < peak_model.size(); ++i) {
    if (!(peak_model[i].center > peak_model[i - 1].center)) {
      throw ConfigError("peak centres must increase with photon number", "centers");
    }
  }
  if (n_pulses == 0) throw ConfigError("n_pulses must be positive", "n_pulses");
  if (!(rep_period_us > 0.0)) throw ConfigError("rep_period_us must be positive", "rep_period_us");
  if (!(detector_recovery_us >= 0.0)) {
    throw ConfigError("detector_recovery_us must be >= 0", "detector_recovery_us");
  }
}

PeakShape ExperimentConfig::peak(std::size_t n) const {
  if (n < peak_model.size()) return peak_model[n];
  const auto& last = peak_model.back();
  const auto& prev = peak_model[peak_model.size() - 2];
  const double extra = static_cast<double>(n - (peak_model.size() - 1));
  return {last.center + extra * (last.center - prev.center), last.width};
}

PhotonNumberDistribution ExperimentConfig::background_distribution() const {
  if (!background_table.empty()) return PhotonNumberDistribution::normalized(background_table);
  std::vector<double> pmf;
  double term = std::exp(-background_mean);
  double cumulative = 0.0;
  for (std::size_t k = 0; k < 64; ++k) {
    pmf.push_back(term);
    cumulative += term;
    if (1.0 - cumulative < 1e-16) break;
    term *= background_mean / static_cast<double>(k + 1);
  }
  return PhotonNumberDistribution::normalized(pmf);
}

bool RunTallies::consistent() const noexcept {
  return heralded_detections <= true_heralds && heralded_detections + heralded_misses == true_heralds &&
         true_heralds + false_heralds == heralds;
}

PileupReport check_pileup(const ExperimentConfig& config) {
  PileupReport r;
  r.rep_period_us = config.rep_period_us;
  r.detector_recovery_us = config.detector_recovery_us;
  r.margin_us = config.rep_period_us - config.detector_recovery_us;
  r.pass = r.margin_us >= 0.0;
  return r;
}

RawRun simulate_run(const ExperimentConfig& config) {
  config.validate();
  const auto pileup = check_pileup(config);
  if (!pileup.pass) {
    throw ConfigError("pile-up check failed: rep_period_us " + std::to_string(config.rep_period_us) +
                          " < detector_recovery_us " + std::to_string(config.detector_recovery_us),
                      "rep_period_us");
  }

  RawRun run;
  auto& t = run.tallies;
  t.pulses = config.n_pulses;
  {
    auto rng = make_stream(config.seed, Stream::heralds);
    std::binomial_distribution<std::uint64_t> heralds(config.n_pulses, config.herald_prob);
    t.heralds = heralds(rng);
  }
  run.on_amplitudes.reserve(t.heralds);
  run.off_amplitudes.reserve(t.heralds);

  // Heralded gates.
  {
    auto rng = make_stream(config.seed, Stream::on_gates);
    std::bernoulli_distribution genuine(config.xi_true);
    std::bernoulli_distribution detected(config.gamma_true);
    BackgroundSampler background(config);
    std::normal_distribution<double> unit;
    for (std::uint64_t g = 0; g < t.heralds; ++g) {
      const bool is_true = genuine(rng);
      const std::uint64_t nb = background(rng);
      std::uint64_t n = nb;
      if (is_true) {
        ++t.true_heralds;
        if (detected(rng)) {
          ++t.heralded_detections;
          ++n;
        } else {
          ++t.heralded_misses;
        }
      } else {
        ++t.false_heralds;
      }
      t.background_photons_on += nb;
      bump(t.on_photon_counts, n);
      const auto shape = config.peak(n);
      run.on_amplitudes.push_back(shape.center + shape.width * unit(rng));
    }
  }

  // The non-heralded gate paired with each heralded one.
  {
    auto rng = make_stream(config.seed, Stream::off_gates);
    BackgroundSampler background(config);
    std::normal_distribution<double> unit;
    for (std::uint64_t g = 0; g < t.heralds; ++g) {
      const std::uint64_t n = background(rng);
      t.background_photons_off += n;
      bump(t.off_photon_counts, n);
      const auto shape = config.peak(n);
      run.off_amplitudes.push_back(shape.center + shape.width * unit(rng));
    }
  }
  return run;
}

HeraldStats simulate_herald_stats(const ExperimentConfig& config, double dark_rate) {
  config.validate();
  require_unit(dark_rate, "dark_rate");
  auto rng = make_stream(config.seed, Stream::herald_stats);
  const double p_on = 1.0 - (1.0 - config.herald_prob) * (1.0 - dark_rate);
  std::binomial_distribution<std::uint64_t> on(config.n_pulses, p_on);
  std::binomial_distribution<std::uint64_t> off(config.n_pulses, dark_rate);
  const auto n_on = static_cast<double>(on(rng));
  const auto n_off = static_cast<double>(off(rng));
  // Not validated: a degenerate source can give n_off > n_on.
  return HeraldStats{n_on, n_off, std::sqrt(n_on), std::sqrt(n_off)};
}

double dark_rate_for_purity(double herald_prob, double xi) {
  require_unit(herald_prob, "herald_prob");
  require_unit(xi, "xi");
  const double s = 1.0 - xi;
  const double denom = 1.0 - s + s * herald_prob;
  return denom > 0.0 ? s * herald_prob / denom : 1.0;
}

} // namespace pnrcal
