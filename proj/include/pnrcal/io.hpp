#pragma once
// CSV and on-disk layouts.
//
//   amplitude files   header `amplitude`, one value per row
//   histogram files   header `bin_center,count`, uniform spacing checked on load
//   covariance files  header `quantity,<name>,...`, one row per quantity
//   raw runs          directory with on.csv, off.csv and truth.json

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pnrcal/histogram.hpp"
#include "pnrcal/simulator.hpp"

namespace pnrcal::io {

/// Shortest decimal representation that reads back to the same double.
std::string format_double(double v);

std::vector<double> read_amplitudes_csv(const std::filesystem::path& path);
void write_amplitudes_csv(const std::filesystem::path& path, std::span<const double> amplitudes);

AmplitudeHistogram read_histogram_csv(const std::filesystem::path& path);
void write_histogram_csv(const std::filesystem::path& path, const AmplitudeHistogram& hist);

/// First header cell of a CSV file, lower-cased and trimmed.
std::string sniff_header(const std::filesystem::path& path);

struct NamedMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd matrix;
};
NamedMatrix read_covariance_csv(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);

/// on.csv, off.csv and truth.json (config echo plus tallies).
void write_raw_run(const std::filesystem::path& dir, const RawRun& run, const ExperimentConfig& config);

} // namespace pnrcal::io
