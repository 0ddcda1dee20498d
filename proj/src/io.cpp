#include "pnrcal/io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "pnrcal/errors.hpp"
#include "pnrcal/report.hpp"

namespace pnrcal::io {

namespace {

std::string trim(std::string_view s) {
  auto b = s.begin();
  auto e = s.end();
  while (b != e && std::isspace(static_cast<unsigned char>(*b))) ++b;
  while (e != b && std::isspace(static_cast<unsigned char>(*(e - 1)))) --e;
  return std::string(b, e);
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_double(const std::string& cell, const std::filesystem::path& path, std::size_t line) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw DomainError(path.string() + ":" + std::to_string(line) + ": not a number: '" + cell + "'");
  }
  return v;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("cannot write " + path.string());
  return out;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

/// Reads a CSV with the expected header; returns the data rows.
std::vector<std::vector<double>> read_table(const std::filesystem::path& path,
                                            const std::vector<std::string>& header) {
  auto in = open_in(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) break;
  }
  auto cells = split(trim(line));
  std::transform(cells.begin(), cells.end(), cells.begin(), lower);
  if (cells != header) {
    std::string want;
    for (const auto& h : header) want += (want.empty() ? "" : ",") + h;
    throw DomainError(path.string() + ": expected header '" + want + "'");
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto row = split(t);
    if (row.size() != header.size()) {
      throw DomainError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " columns");
    }
    std::vector<double> values;
    for (const auto& c : row) values.push_back(parse_double(c, path, line_no));
    rows.push_back(std::move(values));
  }
  return rows;
}

} // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return ec == std::errc() ? std::string(buf, ptr) : std::string("nan");
}

std::vector<double> read_amplitudes_csv(const std::filesystem::path& path) {
  const auto rows = read_table(path, {"amplitude"});
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r[0]);
  if (out.empty()) throw DomainError(path.string() + ": no amplitudes");
  return out;
}

void write_amplitudes_csv(const std::filesystem::path& path, std::span<const double> amplitudes) {
  auto out = open_out(path);
  std::string buf = "amplitude\n";
  buf.reserve(amplitudes.size() * 22);
  for (double a : amplitudes) {
    buf += format_double(a);
    buf += '\n';
  }
  out << buf;
}

AmplitudeHistogram read_histogram_csv(const std::filesystem::path& path) {
  const auto rows = read_table(path, {"bin_center", "count"});
  std::vector<double> centers;
  std::vector<double> counts;
  for (const auto& r : rows) {
    centers.push_back(r[0]);
    counts.push_back(r[1]);
  }
  try {
    return AmplitudeHistogram::from_centers(centers, std::move(counts));
  } catch (const DomainError& e) {
    throw DomainError(path.string() + ": " + e.what());
  }
}

void write_histogram_csv(const std::filesystem::path& path, const AmplitudeHistogram& hist) {
  auto out = open_out(path);
  out << "bin_center,count\n";
  for (std::size_t b = 0; b < hist.n_bins(); ++b) {
    out << format_double(hist.center(b)) << ',' << format_double(hist.counts()[b]) << '\n';
  }
}

std::string sniff_header(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    return lower(split(t).front());
  }
  throw DomainError(path.string() + ": empty file");
}

NamedMatrix read_covariance_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  std::size_t line_no = 0;
  NamedMatrix m;
  std::vector<std::vector<double>> rows;
  std::vector<std::string> row_names;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty()) continue;
    auto cells = split(t);
    if (m.names.empty()) {
      if (cells.size() < 2 || lower(cells.front()) != "quantity") {
        throw DomainError(path.string() + ": expected header 'quantity,<name>,...'");
      }
      m.names.assign(cells.begin() + 1, cells.end());
      continue;
    }
    if (cells.size() != m.names.size() + 1) {
      throw DomainError(path.string() + ":" + std::to_string(line_no) + ": wrong number of columns");
    }
    row_names.push_back(cells.front());
    std::vector<double> values;
    for (std::size_t k = 1; k < cells.size(); ++k) values.push_back(parse_double(cells[k], path, line_no));
    rows.push_back(std::move(values));
  }
  if (m.names.empty() || rows.size() != m.names.size() || row_names != m.names) {
    throw DomainError(path.string() + ": covariance must be square with rows in header order");
  }
  const auto n = static_cast<Eigen::Index>(m.names.size());
  m.matrix.resize(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < n; ++c) {
      m.matrix(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    }
  }
  return m;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
}

void write_raw_run(const std::filesystem::path& dir, const RawRun& run, const ExperimentConfig& config) {
  std::filesystem::create_directories(dir);
  write_amplitudes_csv(dir / "on.csv", run.on_amplitudes);
  write_amplitudes_csv(dir / "off.csv", run.off_amplitudes);
  report::json truth;
  truth["config"] = report::to_json(config);
  truth["tallies"] = report::to_json(run.tallies);
  truth["pileup"] = report::to_json(check_pileup(config));
  write_text(dir / "truth.json", truth.dump(2) + "\n");
}

} // namespace pnrcal::io
