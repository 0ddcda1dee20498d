#include <algorithm>
#include <cmath>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "pnrcal/cli.hpp"
#include "pnrcal/errors.hpp"

namespace pnrcal::cli {

namespace pt = boost::property_tree;
namespace fs = std::filesystem;

namespace {

pt::ptree read_ini(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string(), "config");
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.message(), "config");
  }
  return tree;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::optional<std::string> raw(const pt::ptree& tree, const std::string& key) {
  const auto v = tree.get_optional<std::string>(key);
  if (!v) return std::nullopt;
  return trim(*v);
}

double to_double(const std::string& text, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' is not a number: '" + text + "'", key);
  }
}

std::optional<double> opt_double(const pt::ptree& tree, const std::string& key) {
  const auto v = raw(tree, key);
  if (!v) return std::nullopt;
  return to_double(*v, key);
}

double req_double(const pt::ptree& tree, const std::string& key) {
  const auto v = opt_double(tree, key);
  if (!v) throw ConfigError("missing required field '" + key + "'", key);
  return *v;
}

/// Integers may be written in exponent form (6.7e7) as long as they are whole.
std::optional<std::uint64_t> opt_count(const pt::ptree& tree, const std::string& key) {
  const auto v = opt_double(tree, key);
  if (!v) return std::nullopt;
  if (!(*v >= 0.0) || std::floor(*v) != *v || *v > 1.8e19) {
    throw ConfigError("'" + key + "' must be a non-negative integer", key);
  }
  return static_cast<std::uint64_t>(*v);
}

std::uint64_t req_count(const pt::ptree& tree, const std::string& key) {
  const auto v = opt_count(tree, key);
  if (!v) throw ConfigError("missing required field '" + key + "'", key);
  return *v;
}

std::optional<std::vector<double>> opt_list(const pt::ptree& tree, const std::string& key) {
  const auto v = raw(tree, key);
  if (!v) return std::nullopt;
  std::vector<double> out;
  std::stringstream ss(*v);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(to_double(trim(cell), key));
  if (out.empty()) throw ConfigError("'" + key + "' is an empty list", key);
  return out;
}

std::vector<double> req_list(const pt::ptree& tree, const std::string& key) {
  const auto v = opt_list(tree, key);
  if (!v) throw ConfigError("missing required field '" + key + "'", key);
  return *v;
}

bool opt_bool(const pt::ptree& tree, const std::string& key, bool fallback) {
  const auto v = raw(tree, key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("'" + key + "' must be true or false", key);
}

FitObjective parse_objective(const std::string& text, const std::string& key) {
  if (text == "poisson") return FitObjective::poisson;
  if (text == "least_squares") return FitObjective::least_squares;
  throw ConfigError("'" + key + "' must be poisson or least_squares", key);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

PipelineInput load_input(const fs::path& path, const std::string& format, const std::string& key) {
  if (!fs::exists(path)) throw ConfigError("input file not found: " + path.string(), key);
  PipelineInput in;
  in.path = path;
  try {
    std::string kind = format;
    if (kind == "auto") kind = io::sniff_header(path) == "bin_center" ? "histogram" : "amplitudes";
    if (kind == "histogram") {
      in.format = InputFormat::histogram;
      in.histogram = io::read_histogram_csv(path);
    } else if (kind == "amplitudes") {
      in.format = InputFormat::amplitudes;
      in.amplitudes = io::read_amplitudes_csv(path);
    } else {
      throw ConfigError("inputs.format must be amplitudes, histogram or auto", "inputs.format");
    }
  } catch (const DomainError& e) {
    throw ConfigError(e.what(), key);
  }
  return in;
}

CountVector load_counts(const pt::ptree& tree, const std::string& key) {
  const auto counts = req_list(tree, "counts." + key);
  std::vector<double> u;
  if (const auto given = opt_list(tree, "counts.u_" + key)) {
    u = *given;
  } else {
    for (double c : counts) u.push_back(std::sqrt(std::max(c, 0.0)));
  }
  try {
    return CountVector(counts, u);
  } catch (const DomainError& e) {
    throw ConfigError(e.what(), "counts." + key);
  }
}

} // namespace

ExperimentConfig load_experiment_config(const fs::path& path, const Flags& flags) {
  const auto tree = read_ini(path);
  ExperimentConfig c;
  c.gamma_true = req_double(tree, "experiment.gamma");
  c.xi_true = req_double(tree, "experiment.xi");
  c.herald_prob = req_double(tree, "experiment.herald_prob");
  if (const auto table = opt_list(tree, "experiment.background_table")) {
    c.background_table = *table;
    c.background_mean = opt_double(tree, "experiment.background_mean").value_or(0.0);
  } else {
    c.background_mean = req_double(tree, "experiment.background_mean");
  }
  c.n_pulses = req_count(tree, "experiment.n_pulses");
  c.rep_period_us = req_double(tree, "experiment.rep_period_us");
  c.detector_recovery_us = req_double(tree, "experiment.detector_recovery_us");
  if (flags.seed) {
    c.seed = *flags.seed;
  } else {
    c.seed = req_count(tree, "experiment.seed");
  }

  const auto centers = req_list(tree, "peaks.centers");
  const auto widths = req_list(tree, "peaks.widths");
  if (centers.size() != widths.size()) {
    throw ConfigError("peaks.centers and peaks.widths differ in length", "peaks.widths");
  }
  for (std::size_t i = 0; i < centers.size(); ++i) c.peak_model.push_back({centers[i], widths[i]});
  try {
    c.validate();
  } catch (const ConfigError& e) {
    const auto& f = e.field();
    const bool peak_key = f == "centers" || f == "widths";
    throw ConfigError(e.what(), f.empty() ? std::string() : (peak_key ? "peaks." : "experiment.") + f);
  }
  return c;
}

ClosureOptions load_closure_options(const fs::path& path, const Flags& flags) {
  const auto tree = read_ini(path);
  ClosureOptions o;
  if (const auto n = opt_count(tree, "closure.n_seeds")) o.n_seeds = static_cast<std::size_t>(*n);
  if (const auto b = opt_count(tree, "closure.bins")) o.n_bins = static_cast<std::size_t>(*b);
  if (const auto p = opt_count(tree, "closure.peaks")) o.n_peaks = static_cast<std::size_t>(*p);
  if (const auto obj = raw(tree, "closure.objective")) o.objective = parse_objective(*obj, "closure.objective");
  o.shared_shape = opt_bool(tree, "closure.shared_shape", true);
  if (const auto d = opt_double(tree, "closure.dark_rate")) o.dark_rate = *d;
  if (flags.bins) o.n_bins = *flags.bins;
  if (flags.peaks) o.n_peaks = *flags.peaks;
  if (flags.jobs) o.jobs = *flags.jobs;
  if (o.n_bins < 2) throw ConfigError("bins must be at least 2", "bins");
  if (o.n_peaks < 1) throw ConfigError("peaks must be at least 1", "peaks");
  return o;
}

PipelineConfig load_pipeline_config(const fs::path& path, const Flags& flags) {
  const auto tree = read_ini(path);
  const fs::path base = path.parent_path();
  PipelineConfig c;

  // Fit settings.
  if (const auto n = opt_count(tree, "fit.n_peaks")) c.n_peaks = static_cast<std::size_t>(*n);
  if (const auto b = opt_count(tree, "fit.bins")) c.bins = static_cast<std::size_t>(*b);
  if (const auto obj = raw(tree, "fit.objective")) c.fit.objective = parse_objective(*obj, "fit.objective");
  c.fit.with_offset = opt_bool(tree, "fit.offset", false);
  if (const auto ic = opt_list(tree, "fit.init_centers")) c.init_centers = *ic;
  if (const auto iw = opt_list(tree, "fit.init_widths")) c.init_widths = *iw;
  c.shared_shape = opt_bool(tree, "fit.shared_shape", true);
  c.bypass_fit = opt_bool(tree, "fit.bypass", false);
  if (flags.bins) c.bins = *flags.bins;
  if (flags.peaks) c.n_peaks = *flags.peaks;
  if (flags.bypass_fit) c.bypass_fit = true;
  if (c.bins < 2) throw ConfigError("bins must be at least 2", "fit.bins");
  if (c.n_peaks < 1) throw ConfigError("n_peaks must be at least 1", "fit.n_peaks");
  if (c.init_centers.size() != c.init_widths.size()) {
    throw ConfigError("fit.init_centers and fit.init_widths differ in length", "fit.init_widths");
  }
  if (!c.init_centers.empty() && c.init_centers.size() != c.n_peaks) {
    throw ConfigError("initial peak list does not match n_peaks", "fit.init_centers");
  }

  // Herald purity: exactly one of counts or an explicit value.
  const auto n_on = opt_double(tree, "herald.n_on");
  const auto n_off = opt_double(tree, "herald.n_off");
  const auto xi = opt_double(tree, "herald.xi");
  const bool have_counts = n_on || n_off;
  if (have_counts == xi.has_value()) {
    throw ConfigError("give either herald.n_on/herald.n_off or herald.xi, not both or neither", "herald");
  }
  try {
    if (have_counts) {
      if (!n_on || !n_off) throw ConfigError("herald.n_on and herald.n_off go together", "herald.n_off");
      HeraldStats h = HeraldStats::poisson(*n_on, *n_off);
      if (const auto u = opt_double(tree, "herald.u_n_on")) h.u_on = *u;
      if (const auto u = opt_double(tree, "herald.u_n_off")) h.u_off = *u;
      h.validate();
      c.herald = h;
    } else {
      HeraldPurity p{*xi, opt_double(tree, "herald.u_xi").value_or(0.0)};
      p.validate();
      c.xi = p;
    }
  } catch (const DomainError& e) {
    throw ConfigError(e.what(), "herald");
  }

  // Data.
  if (c.bypass_fit) {
    c.on_counts = load_counts(tree, "on");
    c.off_counts = load_counts(tree, "off");
    if (c.on_counts->size() != c.off_counts->size()) {
      throw ConfigError("counts.on and counts.off differ in length", "counts.off");
    }
  } else {
    const std::string format = raw(tree, "inputs.format").value_or("auto");
    const auto on = raw(tree, "inputs.on");
    const auto off = raw(tree, "inputs.off");
    if (!on) throw ConfigError("missing required field 'inputs.on'", "inputs.on");
    if (!off) throw ConfigError("missing required field 'inputs.off'", "inputs.off");
    c.on = load_input(resolve(base, *on), format, "inputs.on");
    c.off = load_input(resolve(base, *off), format, "inputs.off");
  }

  // Reports.
  c.out_dir = resolve(base, raw(tree, "report.out").value_or("report"));
  if (flags.out) c.out_dir = *flags.out;
  if (const auto cov = raw(tree, "report.covariance")) c.covariance_path = resolve(base, *cov);
  if (flags.covariance) c.covariance_path = *flags.covariance;
  if (c.covariance_path) {
    if (!fs::exists(*c.covariance_path)) {
      throw ConfigError("covariance file not found: " + c.covariance_path->string(), "covariance");
    }
    try {
      c.covariance = io::read_covariance_csv(*c.covariance_path);
    } catch (const DomainError& e) {
      throw ConfigError(e.what(), "covariance");
    }
  }
  return c;
}

} // namespace pnrcal::cli
