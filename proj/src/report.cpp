#include "pnrcal/report.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <sstream>

#include "pnrcal/io.hpp"

namespace pnrcal::report {

namespace {

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

const char* objective_name(FitObjective o) {
  return o == FitObjective::poisson ? "poisson" : "least_squares";
}

std::string pct(double fraction) { return io::format_double(100.0 * fraction); }

} // namespace

std::string render_percent(double fraction, double u_fraction) {
  const double v = 100.0 * fraction;
  const double u = 100.0 * u_fraction;
  char buf[96];
  if (u > 0.0 && std::isfinite(u)) {
    int e = static_cast<int>(std::floor(std::log10(u)));
    double digit = std::round(u / std::pow(10.0, e));
    if (digit >= 10.0) {
      ++e;
      digit = 1.0;
    }
    const int decimals = std::max(0, -e);
    std::snprintf(buf, sizeof(buf), "%.*f ± %.*f", decimals, v, decimals, digit * std::pow(10.0, e));
  } else {
    std::snprintf(buf, sizeof(buf), "%.3g", v);
  }
  return buf;
}

json to_json(const EfficiencyEstimate& e) {
  json flags = json::array();
  if (e.out_of_range()) flags.push_back("out_of_range");
  if (e.consistent_with_zero()) flags.push_back("consistent_with_zero");
  return {{"source", e.source.label()},
          {"gamma", e.gamma},
          {"u_gamma", e.u_gamma},
          {"gamma_pct", 100.0 * e.gamma},
          {"u_gamma_pct", 100.0 * e.u_gamma},
          {"rendered_pct", render_percent(e.gamma, e.u_gamma)},
          {"flags", flags}};
}

json to_json(const UncertaintyBudget& b) {
  json contributions = json::array();
  for (std::size_t k = 0; k < b.quantities.size(); ++k) {
    contributions.push_back({{"quantity", b.quantities[k]},
                             {"contribution", b.contributions[k]},
                             {"contribution_pct", 100.0 * b.contributions[k]}});
  }
  return {{"target", b.target},
          {"value", b.value},
          {"combined", b.combined},
          {"combined_pct", 100.0 * b.combined},
          {"covariance", b.full_covariance ? "full" : "diagonal"},
          {"contributions", contributions}};
}

json to_json(const CountVector& c) {
  json j{{"counts", c.counts}, {"uncertainties", c.uncertainties}};
  if (c.covariance) j["covariance"] = matrix_json(*c.covariance);
  return j;
}

json to_json(const HeraldPurity& xi) { return {{"xi", xi.xi}, {"u_xi", xi.u_xi}}; }

json to_json(const FitQuality& q) {
  return {{"chi_square", q.chi_square},
          {"reduced_chi_square", q.reduced_chi_square},
          {"reduced_total_sum_of_squares", q.reduced_total_sum_of_squares},
          {"ratio", q.ratio},
          {"degrees_of_freedom", q.degrees_of_freedom}};
}

json to_json(const MixtureFit& fit) {
  json peaks = json::array();
  for (const auto& p : fit.peaks) {
    peaks.push_back({{"amplitude", p.amplitude},
                     {"u_amplitude", p.u_amplitude},
                     {"center", p.center},
                     {"u_center", p.u_center},
                     {"width", p.width},
                     {"u_width", p.u_width}});
  }
  json j{{"objective", objective_name(fit.objective)},
         {"peaks", peaks},
         {"covariance", matrix_json(fit.covariance)},
         {"quality", to_json(fit.quality)},
         {"final_cost", fit.final_cost},
         {"iterations", fit.iterations}};
  if (fit.offset) j["offset"] = *fit.offset;
  return j;
}

json to_json(const ExperimentConfig& c) {
  json peaks = json::array();
  for (const auto& p : c.peak_model) peaks.push_back({{"center", p.center}, {"width", p.width}});
  return {{"gamma", c.gamma_true},
          {"xi", c.xi_true},
          {"herald_prob", c.herald_prob},
          {"background_mean", c.background_mean},
          {"background_table", c.background_table},
          {"peaks", peaks},
          {"n_pulses", c.n_pulses},
          {"rep_period_us", c.rep_period_us},
          {"detector_recovery_us", c.detector_recovery_us},
          {"seed", c.seed}};
}

json to_json(const RunTallies& t) {
  return {{"pulses", t.pulses},
          {"heralds", t.heralds},
          {"true_heralds", t.true_heralds},
          {"false_heralds", t.false_heralds},
          {"heralded_detections", t.heralded_detections},
          {"heralded_misses", t.heralded_misses},
          {"background_photons_on", t.background_photons_on},
          {"background_photons_off", t.background_photons_off},
          {"on_photon_counts", t.on_photon_counts},
          {"off_photon_counts", t.off_photon_counts}};
}

json to_json(const PileupReport& p) {
  return {{"pass", p.pass},
          {"rep_period_us", p.rep_period_us},
          {"detector_recovery_us", p.detector_recovery_us},
          {"margin_us", p.margin_us}};
}

json to_json(const ClosureReport& r) {
  json options{{"n_seeds", r.options.n_seeds},
               {"n_bins", r.options.n_bins},
               {"n_peaks", r.options.n_peaks},
               {"objective", objective_name(r.options.objective)},
               {"shared_shape", r.options.shared_shape}};
  if (r.options.dark_rate) options["dark_rate"] = *r.options.dark_rate;

  json summaries = json::array();
  for (const auto& s : r.summaries) {
    summaries.push_back({{"estimator", s.estimator},
                         {"n", s.n},
                         {"mean", s.mean},
                         {"spread", s.spread},
                         {"standard_error", s.standard_error},
                         {"mean_uncertainty", s.mean_uncertainty},
                         {"bias", s.bias},
                         {"pull_mean", s.pull_mean},
                         {"pull_variance", s.pull_variance},
                         {"out_of_range", s.out_of_range}});
  }
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json estimates = json::array();
    for (const auto& e : s.estimates) estimates.push_back(to_json(e));
    json seed{{"seed", s.seed}, {"completed", s.completed}, {"xi", s.xi}, {"estimates", estimates}};
    if (!s.failure.empty()) seed["failure"] = s.failure;
    if (!s.estimator_errors.empty()) seed["estimator_errors"] = s.estimator_errors;
    seeds.push_back(std::move(seed));
  }
  return {{"config", to_json(r.config)},
          {"options", options},
          {"completed", r.completed()},
          {"summaries", summaries},
          {"seeds", seeds}};
}

std::string budget_csv(const InputVector& inputs, const std::vector<UncertaintyBudget>& budgets) {
  std::ostringstream out;
  out << "quantity,value,standard_uncertainty";
  for (const auto& b : budgets) out << ",contrib_" << b.target << "_pct";
  out << '\n';
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    out << inputs.names[k] << ',' << io::format_double(inputs.values[k]) << ','
        << io::format_double(inputs.uncertainties[k]);
    for (const auto& b : budgets) out << ',' << pct(b.contributions.at(k));
    out << '\n';
  }
  for (std::size_t t = 0; t < budgets.size(); ++t) {
    const auto& b = budgets[t];
    out << b.target << "_pct," << pct(b.value) << ',' << pct(b.combined);
    for (std::size_t c = 0; c < budgets.size(); ++c) out << ',' << (c == t ? pct(b.combined) : "");
    out << '\n';
  }
  return out.str();
}

std::string closure_table(const ClosureReport& r) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-14s %5s %11s %11s %11s %11s %11s %9s %9s %6s\n", "estimator", "n",
                "mean(%)", "spread(%)", "stderr(%)", "mean_u(%)", "bias(%)", "pull_mu", "pull_var", "oor");
  out << line;
  for (const auto& s : r.summaries) {
    std::snprintf(line, sizeof(line), "%-14s %5zu %11.6f %11.6f %11.6f %11.6f %11.6f %9.3f %9.3f %6zu\n",
                  s.estimator.c_str(), s.n, 100.0 * s.mean, 100.0 * s.spread, 100.0 * s.standard_error,
                  100.0 * s.mean_uncertainty, 100.0 * s.bias, s.pull_mean, s.pull_variance, s.out_of_range);
    out << line;
  }
  std::snprintf(line, sizeof(line), "completed %zu / %zu seeds, gamma_true = %.6f %%\n", r.completed(),
                r.seeds.size(), 100.0 * r.config.gamma_true);
  out << line;
  return out.str();
}

void stamp_metadata(json& doc) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  doc["metadata"] = {{"generated_at", buf}, {"tool", "pnrcal"}};
}

json without_metadata(json doc) {
  doc.erase("metadata");
  return doc;
}

} // namespace pnrcal::report
