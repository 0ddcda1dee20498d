#pragma once
// Command-line pipeline. Config files are INI-style: `[section]` headers,
// `key = value` lines, `;` or `#` comments, comma-separated lists.
//
// Exit codes
//   0  success
//   1  unexpected internal error
//   2  usage or configuration error (including a failed pile-up check)
//   3  a histogram fit failed
//   4  an estimator hit an uninformative photon-number bin
//   5  closure: fewer than 90 % of seeds completed every stage
//
// Diagnostics go to stderr as one line of key=value pairs.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pnrcal/histogram.hpp"
#include "pnrcal/io.hpp"
#include "pnrcal/model.hpp"
#include "pnrcal/simulator.hpp"

namespace pnrcal::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitUsage = 2,
  kExitFitFailure = 3,
  kExitUninformative = 4,
  kExitClosureIncomplete = 5,
};

/// Command-line overrides shared by the subcommands.
struct Flags {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> bins;
  std::optional<std::size_t> peaks;
  std::optional<std::size_t> jobs;
  bool bypass_fit = false;
  std::optional<std::filesystem::path> covariance;
  std::optional<std::filesystem::path> out;
};

enum class InputFormat { amplitudes, histogram };

/// Pulse-height data for one gate class, parsed up front.
struct PipelineInput {
  std::filesystem::path path;
  InputFormat format = InputFormat::amplitudes;
  std::vector<double> amplitudes;
  std::optional<AmplitudeHistogram> histogram;
};

struct PipelineConfig {
  std::optional<PipelineInput> on;
  std::optional<PipelineInput> off;
  std::optional<HeraldStats> herald;
  std::optional<HeraldPurity> xi;

  std::size_t n_peaks = 3;
  std::size_t bins = 200;
  FitOptions fit;
  std::vector<double> init_centers;
  std::vector<double> init_widths;
  bool shared_shape = true;

  bool bypass_fit = false;
  std::optional<CountVector> on_counts;
  std::optional<CountVector> off_counts;

  std::filesystem::path out_dir = "report";
  std::optional<std::filesystem::path> covariance_path;
  std::optional<io::NamedMatrix> covariance;
};

/// [experiment] and [peaks] sections. Every field is required, `seed`
/// included unless --seed is given; errors name the missing key.
ExperimentConfig load_experiment_config(const std::filesystem::path& path, const Flags& flags);

/// Optional [closure] section (n_seeds, bins, peaks, objective, dark_rate)
/// of an experiment config, with flags applied.
ClosureOptions load_closure_options(const std::filesystem::path& path, const Flags& flags);

/// [inputs], [herald], [fit], [counts], [report] sections, with flags
/// applied. All referenced files are read and validated here.
PipelineConfig load_pipeline_config(const std::filesystem::path& path, const Flags& flags);

int cmd_simulate(const std::filesystem::path& config, const Flags& flags, std::ostream& out, std::ostream& err);
int cmd_fit(const std::filesystem::path& config, const Flags& flags, std::ostream& out, std::ostream& err);
int cmd_calibrate(const std::filesystem::path& config, const Flags& flags, std::ostream& out, std::ostream& err);
int cmd_budget(const std::filesystem::path& config, const Flags& flags, std::ostream& out, std::ostream& err);
int cmd_closure(const std::filesystem::path& config, std::optional<std::size_t> n_seeds, const Flags& flags,
                std::ostream& out, std::ostream& err);

/// Parses argv and dispatches to a subcommand.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace pnrcal::cli
