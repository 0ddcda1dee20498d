#include <cmath>
#include <filesystem>
#include <ostream>
#include <sstream>
#include <utility>

#include <CLI11.hpp>

#include "pnrcal/cli.hpp"
#include "pnrcal/errors.hpp"
#include "pnrcal/report.hpp"

namespace pnrcal::cli {

namespace fs = std::filesystem;
using report::json;

namespace {

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n' || c == '\r') ? ' ' : c;
  }
  return out + "\"";
}

/// One line of key=value pairs on stderr.
int fail(std::ostream& err, int code, const std::string& kind, const std::string& message,
         const std::string& extra = {}) {
  err << "status=error exit=" << code << " kind=" << kind;
  if (!extra.empty()) err << ' ' << extra;
  err << " message=" << quote(message) << '\n';
  return code;
}

/// Maps library exceptions onto the documented exit codes.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    const std::string extra = e.field().empty() ? std::string() : "field=" + e.field();
    return fail(err, kExitUsage, "config", e.what(), extra);
  } catch (const FitError& e) {
    return fail(err, kExitFitFailure, "fit", e.what(), "last_cost=" + io::format_double(e.last_cost()));
  } catch (const InitializationError& e) {
    return fail(err, kExitFitFailure, "fit_init", e.what());
  } catch (const UninformativeBinError& e) {
    return fail(err, kExitUninformative, "uninformative_bin", e.what(), "bin=" + std::to_string(e.bin()));
  } catch (const DomainError& e) {
    return fail(err, kExitUsage, "input", e.what());
  } catch (const std::exception& e) {
    return fail(err, kExitInternal, "internal", e.what());
  }
}

fs::path output_dir(const Flags& flags, const fs::path& config, const char* fallback) {
  return flags.out ? *flags.out : config.parent_path() / fallback;
}

void write_json(const fs::path& path, const json& doc) { io::write_text(path, doc.dump(2) + "\n"); }

struct GateFit {
  AmplitudeHistogram histogram;
  MixtureFit fit;
  CountVector counts;
};

/// Amplitude inputs are binned over their joint range so both gates share
/// one binning; histogram inputs are used as given.
std::pair<GateFit, GateFit> fit_gates(const PipelineConfig& c) {
  std::optional<AmplitudeRange> range;
  if (!c.on->histogram && !c.off->histogram) range = joint_range(c.on->amplitudes, c.off->amplitudes);
  auto hist = [&](const PipelineInput& in) {
    return in.histogram ? *in.histogram : build_histogram(in.amplitudes, c.bins, range);
  };
  auto on_hist = hist(*c.on);
  auto off_hist = hist(*c.off);
  std::optional<std::vector<GaussianPeak>> init;
  if (!c.init_centers.empty()) init = seed_peaks(on_hist, c.init_centers, c.init_widths);
  auto fits = fit_gate_pair(on_hist, off_hist, c.n_peaks, init, c.fit, c.shared_shape);
  auto on_counts = extract_counts(fits.on, on_hist.bin_width());
  auto off_counts = extract_counts(fits.off, off_hist.bin_width());
  return {GateFit{std::move(on_hist), std::move(fits.on), std::move(on_counts)},
          GateFit{std::move(off_hist), std::move(fits.off), std::move(off_counts)}};
}

/// Bin centre, observed count and fitted model: a gnuplot-ready data file.
std::string model_table(const GateFit& g) {
  std::ostringstream out;
  out << "# bin_center count model\n";
  for (std::size_t b = 0; b < g.histogram.n_bins(); ++b) {
    const double x = g.histogram.center(b);
    out << io::format_double(x) << ' ' << io::format_double(g.histogram.counts()[b]) << ' '
        << io::format_double(g.fit.model(x)) << '\n';
  }
  return out.str();
}

json histogram_json(const AmplitudeHistogram& h) {
  return {{"bins", h.n_bins()},
          {"bin_width", h.bin_width()},
          {"min", h.edges().front()},
          {"max", h.edges().back()},
          {"total", h.total()},
          {"underflow", h.underflow()},
          {"overflow", h.overflow()}};
}

json gate_json(const GateFit& g) {
  return {{"histogram", histogram_json(g.histogram)},
          {"fit", report::to_json(g.fit)},
          {"counts", report::to_json(g.counts)}};
}

/// Replaces the input covariance with one read from file, reordered to the
/// calibration layout. Uncertainties follow the new diagonal.
void apply_covariance_file(InputVector& inputs, const io::NamedMatrix& file) {
  if (file.names.size() != inputs.size()) {
    throw ConfigError("covariance file must cover exactly the inputs " + [&] {
      std::string s;
      for (const auto& n : inputs.names) s += (s.empty() ? "" : ",") + n;
      return s;
    }(), "covariance");
  }
  std::vector<std::size_t> pos(inputs.size());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto it = std::find(file.names.begin(), file.names.end(), inputs.names[k]);
    if (it == file.names.end()) throw ConfigError("covariance file lacks '" + inputs.names[k] + "'", "covariance");
    pos[k] = static_cast<std::size_t>(it - file.names.begin());
  }
  const auto n = static_cast<Eigen::Index>(inputs.size());
  Eigen::MatrixXd v(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < n; ++c) {
      v(r, c) = file.matrix(static_cast<Eigen::Index>(pos[static_cast<std::size_t>(r)]),
                            static_cast<Eigen::Index>(pos[static_cast<std::size_t>(c)]));
    }
  }
  for (Eigen::Index k = 0; k < n; ++k) {
    if (!(v(k, k) >= 0.0)) throw ConfigError("covariance diagonal must be non-negative", "covariance");
    inputs.uncertainties[static_cast<std::size_t>(k)] = std::sqrt(v(k, k));
  }
  inputs.covariance = v;
  try {
    inputs.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what(), "covariance");
  }
}

std::vector<double> gradient_for_budget(const Estimator& f, const InputVector& inputs) {
  try {
    return jacobian(f, inputs);
  } catch (const UninformativeBinError&) {
    throw;
  } catch (const DomainError&) {
    // A boundary value (zero count, xi == 1) leaves no room for central differences.
    return f.gradient(inputs.values);
  }
}

struct Calibration {
  std::optional<GateFit> on_fit;
  std::optional<GateFit> off_fit;
  CountVector on_counts;
  CountVector off_counts;
  HeraldPurity xi;
  std::string covariance_source;
  InputVector inputs;
  std::vector<EfficiencyEstimate> estimates;
  std::vector<UncertaintyBudget> budgets;
  std::optional<EfficiencyEstimate> mean;
};

Calibration calibrate(const PipelineConfig& c) {
  Calibration cal;
  if (c.bypass_fit) {
    if (!c.on_counts || !c.off_counts) throw ConfigError("bypass mode needs [counts] on and off", "counts");
    cal.on_counts = *c.on_counts;
    cal.off_counts = *c.off_counts;
  } else {
    auto [on, off] = fit_gates(c);
    cal.on_fit = std::move(on);
    cal.off_fit = std::move(off);
    cal.on_counts = cal.on_fit->counts;
    cal.off_counts = cal.off_fit->counts;
  }
  cal.xi = c.herald ? estimate_xi(*c.herald) : *c.xi;

  cal.inputs = calibration_inputs(cal.on_counts, cal.off_counts, cal.xi);
  cal.covariance_source = cal.inputs.covariance ? "fit" : "diagonal";
  if (c.covariance) {
    apply_covariance_file(cal.inputs, *c.covariance);
    cal.covariance_source = "file";
  }

  const CalibrationLayout layout{cal.on_counts.size()};
  std::vector<Estimator> estimators;
  for (std::size_t i = 0; i < layout.n_bins; ++i) estimators.push_back(gamma_estimator(layout, i));
  estimators.push_back(klyshko_estimator(layout));

  for (std::size_t k = 0; k < estimators.size(); ++k) {
    const auto& f = estimators[k];
    const double value = f.value(cal.inputs.values);
    auto budget = propagate(gradient_for_budget(f, cal.inputs), cal.inputs, f.name);
    budget.value = value;
    const auto source = k < layout.n_bins ? EstimateSource::photon(k) : EstimateSource::klyshko();
    cal.estimates.push_back(EfficiencyEstimate::make(value, budget.combined, source));
    cal.budgets.push_back(std::move(budget));
  }

  std::vector<EfficiencyEstimate> usable;
  for (const auto& e : cal.estimates) {
    if (e.source.kind == EstimateSource::Kind::photon_number && e.u_gamma > 0.0) usable.push_back(e);
  }
  if (!usable.empty()) cal.mean = weighted_mean(usable);
  return cal;
}

json calibration_json(const Calibration& cal, const PipelineConfig& c) {
  json estimates = json::array();
  for (const auto& e : cal.estimates) estimates.push_back(report::to_json(e));
  json budgets = json::array();
  for (const auto& b : cal.budgets) budgets.push_back(report::to_json(b));

  json doc{{"mode", c.bypass_fit ? "bypass_fit" : "fit"},
           {"counts", {{"on", report::to_json(cal.on_counts)}, {"off", report::to_json(cal.off_counts)}}},
           {"xi", report::to_json(cal.xi)},
           {"inputs",
            {{"names", cal.inputs.names},
             {"values", cal.inputs.values},
             {"uncertainties", cal.inputs.uncertainties},
             {"covariance", cal.covariance_source}}},
           {"estimates", estimates},
           {"weighted_mean", cal.mean ? report::to_json(*cal.mean) : json(nullptr)},
           {"budgets", budgets}};
  if (c.herald) {
    doc["herald"] = {{"n_on", c.herald->n_on}, {"n_off", c.herald->n_off},
                     {"u_n_on", c.herald->u_on}, {"u_n_off", c.herald->u_off}};
  }
  if (cal.on_fit) {
    doc["fits"] = {{"on", gate_json(*cal.on_fit)},
                   {"off", gate_json(*cal.off_fit)},
                   {"shared_shape", c.shared_shape}};
  }
  return doc;
}

void print_estimates(std::ostream& out, const Calibration& cal) {
  for (const auto& e : cal.estimates) {
    out << e.source.label() << " = " << report::render_percent(e.gamma, e.u_gamma) << " %";
    if (e.out_of_range()) out << " [out_of_range]";
    if (e.consistent_with_zero()) out << " [consistent_with_zero]";
    out << '\n';
  }
  if (cal.mean) out << "weighted_mean = " << report::render_percent(cal.mean->gamma, cal.mean->u_gamma) << " %\n";
}

} // namespace

int cmd_simulate(const fs::path& config, const Flags& flags, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_experiment_config(config, flags);
    const auto pileup = check_pileup(cfg);
    if (!pileup.pass) {
      return fail(err, kExitUsage, "pileup",
                  "pile-up check failed: rep_period_us is shorter than detector_recovery_us",
                  "field=experiment.rep_period_us margin_us=" + io::format_double(pileup.margin_us));
    }
    const auto run = simulate_run(cfg);
    const auto dir = output_dir(flags, config, "run");
    io::write_raw_run(dir, run, cfg);
    const auto& t = run.tallies;
    out << "pulses=" << t.pulses << " heralds=" << t.heralds << " true_heralds=" << t.true_heralds
        << " false_heralds=" << t.false_heralds << " heralded_detections=" << t.heralded_detections
        << " heralded_misses=" << t.heralded_misses << " background_photons_on=" << t.background_photons_on
        << " background_photons_off=" << t.background_photons_off << '\n';
    out << "wrote " << (dir / "on.csv").string() << ", " << (dir / "off.csv").string() << ", "
        << (dir / "truth.json").string() << '\n';
    return static_cast<int>(kExitOk);
  });
}

int cmd_fit(const fs::path& config, const Flags& flags, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto c = load_pipeline_config(config, flags);
    if (c.bypass_fit) throw ConfigError("fit has nothing to do in bypass mode", "fit.bypass");
    const auto [on, off] = fit_gates(c);
    fs::create_directories(c.out_dir);
    json doc{{"on", gate_json(on)}, {"off", gate_json(off)}};
    report::stamp_metadata(doc);
    write_json(c.out_dir / "fit.json", doc);
    io::write_histogram_csv(c.out_dir / "on_histogram.csv", on.histogram);
    io::write_histogram_csv(c.out_dir / "off_histogram.csv", off.histogram);
    io::write_text(c.out_dir / "on_model.dat", model_table(on));
    io::write_text(c.out_dir / "off_model.dat", model_table(off));
    for (const auto* g : {&on, &off}) {
      out << (g == &on ? "on " : "off") << " counts:";
      for (double n : g->counts.counts) out << ' ' << io::format_double(n);
      out << "  ratio=" << io::format_double(g->fit.quality.ratio) << '\n';
    }
    out << "wrote " << (c.out_dir / "fit.json").string() << '\n';
    return static_cast<int>(kExitOk);
  });
}

int cmd_calibrate(const fs::path& config, const Flags& flags, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto c = load_pipeline_config(config, flags);
    const auto cal = calibrate(c);
    fs::create_directories(c.out_dir);
    auto doc = calibration_json(cal, c);
    report::stamp_metadata(doc);
    write_json(c.out_dir / "calibration.json", doc);
    io::write_text(c.out_dir / "budget.csv", report::budget_csv(cal.inputs, cal.budgets));
    print_estimates(out, cal);
    out << "wrote " << (c.out_dir / "calibration.json").string() << ", " << (c.out_dir / "budget.csv").string()
        << '\n';
    return static_cast<int>(kExitOk);
  });
}

int cmd_budget(const fs::path& config, const Flags& flags, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto c = load_pipeline_config(config, flags);
    const auto cal = calibrate(c);
    fs::create_directories(c.out_dir);
    json budgets = json::array();
    for (const auto& b : cal.budgets) budgets.push_back(report::to_json(b));
    json doc{{"covariance", cal.covariance_source}, {"budgets", budgets}};
    report::stamp_metadata(doc);
    write_json(c.out_dir / "budget.json", doc);
    const auto csv = report::budget_csv(cal.inputs, cal.budgets);
    io::write_text(c.out_dir / "budget.csv", csv);
    out << csv;
    return static_cast<int>(kExitOk);
  });
}

int cmd_closure(const fs::path& config, std::optional<std::size_t> n_seeds, const Flags& flags, std::ostream& out,
                std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_experiment_config(config, flags);
    auto options = load_closure_options(config, flags);
    if (n_seeds) options.n_seeds = *n_seeds;
    if (options.n_seeds < 2) {
      return fail(err, kExitUsage, "usage", "closure needs at least 2 seeds",
                  "field=n_seeds value=" + std::to_string(options.n_seeds));
    }
    const auto result = closure_test(cfg, options);
    const auto dir = output_dir(flags, config, "closure");
    fs::create_directories(dir);
    auto doc = report::to_json(result);
    report::stamp_metadata(doc);
    write_json(dir / "closure.json", doc);
    const auto table = report::closure_table(result);
    io::write_text(dir / "closure.txt", table);
    out << table;
    const std::size_t done = result.completed();
    if (10 * done < 9 * result.seeds.size()) {
      return fail(err, kExitClosureIncomplete, "closure",
                  "fewer than 90 % of seeds completed every stage",
                  "completed=" + std::to_string(done) + " seeds=" + std::to_string(result.seeds.size()));
    }
    return static_cast<int>(kExitOk);
  });
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Calibration toolkit for photon-number-resolving detectors", "pnrcal"};
  app.require_subcommand(1);

  Flags flags;
  std::string config;
  std::string covariance;
  std::string out_dir;
  std::optional<std::size_t> n_seeds;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config, "Config file")->required();
    sub->add_option("--out", out_dir, "Output directory");
  };
  auto add_pipeline = [&](CLI::App* sub) {
    add_common(sub);
    sub->add_option("--bins", flags.bins, "Histogram bins for amplitude inputs");
    sub->add_option("--peaks", flags.peaks, "Number of Gaussian peaks");
    sub->add_flag("--bypass-fit", flags.bypass_fit, "Use the [counts] section instead of fitting");
    sub->add_option("--covariance", covariance, "Input covariance CSV");
  };

  auto* simulate = app.add_subcommand("simulate", "Simulate a raw run");
  add_common(simulate);
  simulate->add_option("--seed", flags.seed, "Override the RNG seed");

  auto* fit = app.add_subcommand("fit", "Fit the ON and OFF amplitude histograms");
  add_pipeline(fit);
  auto* calibrate_cmd = app.add_subcommand("calibrate", "Full calibration with budgets");
  add_pipeline(calibrate_cmd);
  auto* budget = app.add_subcommand("budget", "Uncertainty budgets only");
  add_pipeline(budget);

  auto* closure = app.add_subcommand("closure", "Closure test over simulated seeds");
  add_common(closure);
  closure->add_option("n_seeds", n_seeds, "Number of seeds");
  closure->add_option("--seed", flags.seed, "Override the base RNG seed");
  closure->add_option("--bins", flags.bins, "Histogram bins");
  closure->add_option("--peaks", flags.peaks, "Number of Gaussian peaks");
  closure->add_option("--jobs", flags.jobs, "Worker threads (default: available parallelism)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, kExitUsage, "usage", e.what());
  }
  if (!covariance.empty()) flags.covariance = covariance;
  if (!out_dir.empty()) flags.out = out_dir;

  const fs::path path(config);
  if (simulate->parsed()) return cmd_simulate(path, flags, out, err);
  if (fit->parsed()) return cmd_fit(path, flags, out, err);
  if (calibrate_cmd->parsed()) return cmd_calibrate(path, flags, out, err);
  if (budget->parsed()) return cmd_budget(path, flags, out, err);
  return cmd_closure(path, n_seeds, flags, out, err);
}

} // namespace pnrcal::cli
