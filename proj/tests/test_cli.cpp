#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <doctest.h>

#include "pnrcal/cli.hpp"
#include "pnrcal/errors.hpp"
#include "pnrcal/io.hpp"
#include "pnrcal/report.hpp"

using namespace pnrcal;
namespace fs = std::filesystem;
using report::json;

namespace {

/// Fresh scratch directory per test case.
class Scratch {
public:
  explicit Scratch(const std::string& name) : dir_(fs::temp_directory_path() / ("pnrcal_test_" + name)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Scratch() { fs::remove_all(dir_); }
  const fs::path& dir() const { return dir_; }
  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }

private:
  fs::path dir_;
};

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "pnrcal");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

const std::string kExperiment = R"([experiment]
gamma = 0.00709
xi = 0.98794
herald_prob = 0.015
background_mean = 0.00286
n_pulses = 6.7e6
rep_period_us = 25
detector_recovery_us = 10.4
seed = 42

[peaks]
centers = 0, 1, 2
widths = 0.12, 0.12, 0.12
)";

const std::string kTableCounts = R"([counts]
on = 5.069e6, 5.0200e4, 118
u_on = 1.4e4, 200, 6
off = 5.103e6, 1.4600e4, 23.9
u_off = 1.4e4, 150, 1.5
)";

const std::string kTableBypass = "[herald]\nxi = 0.98794\nu_xi = 0.00007\n\n[fit]\nbypass = true\n\n" + kTableCounts;

double estimate(const json& doc, const std::string& source) {
  for (const auto& e : doc["estimates"]) {
    if (e["source"] == source) return e["gamma"].get<double>();
  }
  throw std::runtime_error("no estimate " + source);
}

} // namespace

TEST_CASE("simulate") {
  Scratch s("simulate");
  SUBCASE("writes the raw run") {
    const auto cfg = s.write("exp.ini", kExperiment);
    const auto r = run({"simulate", cfg.string(), "--out", (s.dir() / "run").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("heralds=") != std::string::npos);
    for (const char* f : {"on.csv", "off.csv", "truth.json"}) CHECK(fs::exists(s.dir() / "run" / f));
    const auto truth = read_json(s.dir() / "run" / "truth.json");
    const auto heralds = truth["tallies"]["heralds"].get<std::size_t>();
    CHECK(truth["tallies"]["pulses"].get<double>() == 6.7e6);
    CHECK(heralds > 90'000);
    CHECK(io::read_amplitudes_csv(s.dir() / "run" / "on.csv").size() == heralds);
    CHECK(io::read_amplitudes_csv(s.dir() / "run" / "off.csv").size() == heralds);
    CHECK(truth["pileup"]["pass"] == true);
  }
  SUBCASE("default output directory sits next to the config") {
    const auto cfg = s.write("exp.ini", kExperiment);
    REQUIRE(run({"simulate", cfg.string()}).code == 0);
    CHECK(fs::exists(s.dir() / "run" / "on.csv"));
  }
  SUBCASE("missing seed") {
    std::string text = kExperiment;
    text.replace(text.find("seed = 42"), 9, "");
    const auto cfg = s.write("exp.ini", text);
    const auto r = run({"simulate", cfg.string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("field=experiment.seed") != std::string::npos);
    CHECK(count_lines(r.err) == 1);
    CHECK(run({"simulate", cfg.string(), "--seed", "5", "--out", (s.dir() / "r").string()}).code == 0);
  }
  SUBCASE("pile-up") {
    std::string text = kExperiment;
    text.replace(text.find("rep_period_us = 25"), 18, "rep_period_us = 5");
    const auto r = run({"simulate", s.write("exp.ini", text).string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("kind=pileup") != std::string::npos);
    CHECK(r.err.find("field=experiment.rep_period_us") != std::string::npos);
    CHECK(r.err.find("margin_us=-5.4") != std::string::npos);
  }
  SUBCASE("invalid value") {
    std::string text = kExperiment;
    text.replace(text.find("gamma = 0.00709"), 15, "gamma = 1.7");
    const auto r = run({"simulate", s.write("exp.ini", text).string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("field=experiment.gamma") != std::string::npos);
  }
}

TEST_CASE("calibrate with pre-extracted counts") {
  Scratch s("bypass");
  SUBCASE("published counts") {
    const auto cfg = s.write("cal.ini", kTableBypass);
    const auto r = run({"calibrate", cfg.string(), "--out", (s.dir() / "rep").string()});
    REQUIRE(r.code == 0);
    const auto doc = read_json(s.dir() / "rep" / "calibration.json");
    CHECK(doc["mode"] == "bypass_fit");
    // Independent 40-digit evaluations of the estimators on these counts.
    CHECK(estimate(doc, "gamma0") == doctest::Approx(0.007076811884777226).epsilon(1e-12));
    CHECK(estimate(doc, "gamma1") == doctest::Approx(0.0070784061540553933).epsilon(1e-12));
    CHECK(estimate(doc, "gamma2") == doctest::Approx(0.0065318688622279871).epsilon(1e-12));
    CHECK(estimate(doc, "klyshko") == doctest::Approx(0.0070565894942022184).epsilon(1e-12));
    CHECK(r.out.find("gamma2 = 0.65 ± 0.04 %") != std::string::npos);
    CHECK(doc["inputs"]["covariance"] == "diagonal");
    CHECK(doc["budgets"].size() == 4);
    CHECK(fs::exists(s.dir() / "rep" / "budget.csv"));
    CHECK(doc.contains("metadata"));
  }
  SUBCASE("flag and config agree") {
    const auto cfg = s.write("cal.ini", "[herald]\nxi = 0.98794\nu_xi = 0.00007\n\n" + kTableCounts);
    const auto r = run({"calibrate", cfg.string(), "--bypass-fit", "--out", (s.dir() / "rep").string()});
    REQUIRE(r.code == 0);
    CHECK(estimate(read_json(s.dir() / "rep" / "calibration.json"), "gamma0") ==
          doctest::Approx(0.007076811884777226).epsilon(1e-12));
  }
  SUBCASE("identical gates give no efficiency") {
    const auto cfg = s.write("cal.ini", R"([herald]
xi = 0.98794
u_xi = 0.00007
[fit]
bypass = true
[counts]
on = 5.103e6, 1.4600e4, 23.9
u_on = 1.4e4, 150, 1.5
off = 5.103e6, 1.4600e4, 23.9
u_off = 1.4e4, 150, 1.5
)");
    const auto r = run({"calibrate", cfg.string(), "--out", (s.dir() / "rep").string()});
    REQUIRE(r.code == 0);
    const auto doc = read_json(s.dir() / "rep" / "calibration.json");
    for (const auto& e : doc["estimates"]) {
      CHECK(std::abs(e["gamma"].get<double>()) < 1e-15);
      CHECK(e["flags"].dump().find("consistent_with_zero") != std::string::npos);
    }
    CHECK(r.out.find("[consistent_with_zero]") != std::string::npos);
  }
  SUBCASE("uninformative bin") {
    const auto cfg = s.write("cal.ini", R"([herald]
xi = 0.9
[fit]
bypass = true
[counts]
on = 1000, 120, 40
off = 1000, 50, 50
)");
    const auto r = run({"calibrate", cfg.string(), "--out", (s.dir() / "rep").string()});
    CHECK(r.code == 4);
    CHECK(r.err.find("kind=uninformative_bin") != std::string::npos);
    CHECK(r.err.find("bin=2") != std::string::npos);
  }
  SUBCASE("herald statistics instead of an explicit purity") {
    const auto cfg = s.write("cal.ini", "[herald]\nn_on = 1e6\nn_off = 12060\n\n[fit]\nbypass = true\n\n" + kTableCounts);
    REQUIRE(run({"calibrate", cfg.string(), "--out", (s.dir() / "rep").string()}).code == 0);
    const auto doc = read_json(s.dir() / "rep" / "calibration.json");
    CHECK(doc["xi"]["xi"].get<double>() == doctest::Approx(0.98794).epsilon(1e-14));
    CHECK(doc["xi"]["u_xi"].get<double>() == doctest::Approx(0.00011047824944304648).epsilon(1e-12));
  }
  SUBCASE("herald needs exactly one source") {
    const auto both = s.write("both.ini", "[herald]\nn_on = 1e6\nn_off = 12060\nxi = 0.98\n[fit]\nbypass = true\n" +
                                              kTableCounts);
    auto r = run({"calibrate", both.string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("field=herald") != std::string::npos);
    const auto none = s.write("none.ini", "[fit]\nbypass = true\n" + kTableCounts);
    r = run({"calibrate", none.string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("field=herald") != std::string::npos);
  }
  SUBCASE("missing input file is reported before any work") {
    const auto cfg = s.write("cal.ini", "[herald]\nxi = 0.98\n[inputs]\non = nowhere.csv\noff = nowhere.csv\n");
    const auto r = run({"calibrate", cfg.string(), "--out", (s.dir() / "rep").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("field=inputs.on") != std::string::npos);
    CHECK_FALSE(fs::exists(s.dir() / "rep"));
  }
}

TEST_CASE("covariance file") {
  Scratch s("covariance");
  const auto cfg = s.write("cal.ini", kTableBypass);
  // Published uncertainties on the diagonal, permuted order, and a positive
  // C0-C0_off covariance (correlation 0.5).
  const std::vector<std::string> names{"xi", "C2_off", "C1_off", "C0_off", "C2", "C1", "C0"};
  const std::vector<double> u{0.00007, 1.5, 150, 1.4e4, 6, 200, 1.4e4};
  std::ostringstream csv;
  csv << "quantity";
  for (const auto& n : names) csv << ',' << n;
  csv << '\n';
  for (std::size_t r = 0; r < names.size(); ++r) {
    csv << names[r];
    for (std::size_t c = 0; c < names.size(); ++c) {
      double v = r == c ? u[r] * u[r] : 0.0;
      if ((r == 3 && c == 6) || (r == 6 && c == 3)) v = 0.5 * 1.4e4 * 1.4e4;
      csv << ',' << io::format_double(v);
    }
    csv << '\n';
  }
  const auto cov = s.write("cov.csv", csv.str());

  REQUIRE(run({"calibrate", cfg.string(), "--out", (s.dir() / "diag").string()}).code == 0);
  REQUIRE(run({"calibrate", cfg.string(), "--covariance", cov.string(), "--out", (s.dir() / "full").string()}).code ==
          0);
  const auto diag = read_json(s.dir() / "diag" / "calibration.json");
  const auto full = read_json(s.dir() / "full" / "calibration.json");
  CHECK(full["inputs"]["covariance"] == "file");
  CHECK(full["inputs"]["uncertainties"] == diag["inputs"]["uncertainties"]);
  // C0 and C0_off pull gamma_0 in opposite directions, so the correlation lowers u.
  const double u_diag = diag["estimates"][0]["u_gamma"].get<double>();
  const double u_full = full["estimates"][0]["u_gamma"].get<double>();
  CHECK(u_full < u_diag);
  CHECK(full["budgets"][0]["covariance"] == "full");

  SUBCASE("the config can name the file") {
    const auto cfg2 = s.write("cal2.ini", kTableBypass + "[report]\ncovariance = cov.csv\nout = rep2\n");
    REQUIRE(run({"calibrate", cfg2.string()}).code == 0);
    CHECK(read_json(s.dir() / "rep2" / "calibration.json")["estimates"][0]["u_gamma"].get<double>() ==
          doctest::Approx(u_full).epsilon(1e-14));
  }
  SUBCASE("names must match the inputs") {
    std::string text = csv.str();
    text.replace(text.find("C2_off"), 6, "C9_off");
    text.replace(text.find("C2_off"), 6, "C9_off");
    const auto bad = s.write("bad.csv", text);
    const auto r = run({"calibrate", cfg.string(), "--covariance", bad.string(), "--out", (s.dir() / "x").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("field=covariance") != std::string::npos);
  }
  SUBCASE("budget command") {
    const auto r = run({"budget", cfg.string(), "--covariance", cov.string(), "--out", (s.dir() / "b").string()});
    REQUIRE(r.code == 0);
    const auto doc = read_json(s.dir() / "b" / "budget.json");
    CHECK(doc["covariance"] == "file");
    CHECK(doc["budgets"][0]["combined"].get<double>() == doctest::Approx(u_full).epsilon(1e-14));
    CHECK(r.out.rfind("quantity,value,standard_uncertainty", 0) == 0);
  }
}

TEST_CASE("fit and calibrate simulated amplitudes") {
  Scratch s("pipeline");
  std::string text = kExperiment;
  text.replace(text.find("n_pulses = 6.7e6"), 16, "n_pulses = 6.7e7");
  const auto exp = s.write("exp.ini", text);
  REQUIRE(run({"simulate", exp.string(), "--out", (s.dir() / "run").string()}).code == 0);
  const auto cfg = s.write("cal.ini", R"([inputs]
on = run/on.csv
off = run/off.csv
[herald]
xi = 0.98794
u_xi = 0.00007
[fit]
n_peaks = 3
bins = 200
init_centers = 0, 1, 2
init_widths = 0.12, 0.12, 0.12
[report]
out = rep
)");

  SUBCASE("recovered efficiency is within three claimed uncertainties") {
    const auto r = run({"calibrate", cfg.string()});
    REQUIRE(r.code == 0);
    const auto doc = read_json(s.dir() / "rep" / "calibration.json");
    CHECK(doc["mode"] == "fit");
    CHECK(doc["inputs"]["covariance"] == "fit");
    const auto& g0 = doc["estimates"][0];
    CHECK(std::abs(g0["gamma"].get<double>() - 0.00709) <= 3.0 * g0["u_gamma"].get<double>());
    CHECK(doc["fits"]["on"]["fit"]["quality"]["ratio"].get<double>() < 1e-4);
  }
  SUBCASE("reports are reproducible") {
    REQUIRE(run({"calibrate", cfg.string(), "--out", (s.dir() / "a").string()}).code == 0);
    REQUIRE(run({"calibrate", cfg.string(), "--out", (s.dir() / "b").string()}).code == 0);
    const auto a = report::without_metadata(read_json(s.dir() / "a" / "calibration.json"));
    const auto b = report::without_metadata(read_json(s.dir() / "b" / "calibration.json"));
    CHECK(a.dump() == b.dump());
  }
  SUBCASE("fit command writes fits, histograms and model tables") {
    const auto r = run({"fit", cfg.string(), "--out", (s.dir() / "fit").string()});
    REQUIRE(r.code == 0);
    for (const char* f : {"fit.json", "on_histogram.csv", "off_histogram.csv", "on_model.dat", "off_model.dat"}) {
      CHECK(fs::exists(s.dir() / "fit" / f));
    }
    const auto hist = io::read_histogram_csv(s.dir() / "fit" / "on_histogram.csv");
    CHECK(hist.n_bins() == 200);
    const auto doc = read_json(s.dir() / "fit" / "fit.json");
    CHECK(doc["on"]["fit"]["peaks"].size() == 3);
    CHECK(doc["on"]["histogram"]["bins"] == 200);
  }
  SUBCASE("histogram inputs") {
    REQUIRE(run({"fit", cfg.string(), "--out", (s.dir() / "fit").string()}).code == 0);
    const auto hcfg = s.write("hist.ini", R"([inputs]
on = fit/on_histogram.csv
off = fit/off_histogram.csv
format = histogram
[herald]
xi = 0.98794
[fit]
n_peaks = 3
)");
    const auto r = run({"calibrate", hcfg.string(), "--out", (s.dir() / "h").string()});
    REQUIRE(r.code == 0);
    const auto doc = read_json(s.dir() / "h" / "calibration.json");
    CHECK(doc["fits"]["on"]["histogram"]["bins"] == 200);
  }
  SUBCASE("a peak count the data cannot support is a fit failure") {
    const auto bad = s.write("bad.ini", R"([inputs]
on = run/on.csv
off = run/off.csv
[herald]
xi = 0.98794
[fit]
n_peaks = 9
bins = 60
)");
    const auto r = run({"calibrate", bad.string(), "--out", (s.dir() / "bad").string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("kind=fit") != std::string::npos);
  }
}

TEST_CASE("closure") {
  Scratch s("closure");
  const auto cfg = s.write("exp.ini", kExperiment + "[closure]\nn_seeds = 3\nbins = 120\npeaks = 3\n");
  SUBCASE("one seed is a usage error") {
    const auto r = run({"closure", cfg.string(), "1"});
    CHECK(r.code == 2);
    CHECK(r.err.find("field=n_seeds") != std::string::npos);
  }
  SUBCASE("small run is well formed and reproducible") {
    const auto a = run({"closure", cfg.string(), "2", "--jobs", "2", "--out", (s.dir() / "a").string()});
    REQUIRE(a.code == 0);
    const auto doc = read_json(s.dir() / "a" / "closure.json");
    CHECK(doc["seeds"].size() == 2);
    CHECK(doc["summaries"].size() == 4);
    CHECK(fs::exists(s.dir() / "a" / "closure.txt"));
    CHECK(a.out.find("completed 2 / 2 seeds") != std::string::npos);
    REQUIRE(run({"closure", cfg.string(), "2", "--jobs", "1", "--out", (s.dir() / "b").string()}).code == 0);
    CHECK(report::without_metadata(doc).dump() ==
          report::without_metadata(read_json(s.dir() / "b" / "closure.json")).dump());
  }
  SUBCASE("config default seed count") {
    REQUIRE(run({"closure", cfg.string(), "--out", (s.dir() / "c").string()}).code == 0);
    CHECK(read_json(s.dir() / "c" / "closure.json")["seeds"].size() == 3);
  }
  SUBCASE("incomplete closure") {
    const auto bad = s.write("bad.ini", kExperiment + "[closure]\nbins = 4\npeaks = 3\n");
    const auto r = run({"closure", bad.string(), "2", "--out", (s.dir() / "d").string()});
    CHECK(r.code == 5);
    CHECK(r.err.find("completed=0") != std::string::npos);
  }
}

TEST_CASE("command line parsing") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"calibrate"}).code == 2);
  CHECK(run({"closure", "x.ini", "--bins", "abc"}).code == 2);
  const auto r = run({"calibrate", "/nonexistent/config.ini"});
  CHECK(r.code == 2);
  CHECK(count_lines(r.err) == 1);
}

TEST_CASE("installed binary exit codes") {
  Scratch s("binary");
  const auto cfg = s.write("cal.ini", kTableBypass);
  const auto exit_of = [](const std::string& cmd) {
    const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  const std::string bin = PNRCAL_BINARY;
  CHECK(exit_of(bin + " calibrate " + cfg.string() + " --out " + (s.dir() / "r").string()) == 0);
  CHECK(exit_of(bin + " closure " + cfg.string() + " 1") == 2);
  CHECK(exit_of(bin + " --help") == 0);
}

TEST_CASE("file formats and rendering") {
  Scratch s("io");
  SUBCASE("amplitudes round trip") {
    const std::vector<double> a{0.1, -2.5e-7, 3.0, 1.0 / 3.0};
    io::write_amplitudes_csv(s.dir() / "a.csv", a);
    CHECK(io::read_amplitudes_csv(s.dir() / "a.csv") == a);
    CHECK(io::sniff_header(s.dir() / "a.csv") == "amplitude");
  }
  SUBCASE("histogram round trip") {
    const std::vector<double> samples{0.0, 0.1, 0.1, 0.35, 0.9, 1.0};
    const auto h = build_histogram(samples, 7);
    io::write_histogram_csv(s.dir() / "h.csv", h);
    const auto back = io::read_histogram_csv(s.dir() / "h.csv");
    CHECK(back.counts() == h.counts());
    CHECK(back.bin_width() == doctest::Approx(h.bin_width()).epsilon(1e-12));
    CHECK(io::sniff_header(s.dir() / "h.csv") == "bin_center");
  }
  SUBCASE("malformed files") {
    s.write("bad.csv", "amplitude\n1.0\nnot-a-number\n");
    CHECK_THROWS_AS(io::read_amplitudes_csv(s.dir() / "bad.csv"), DomainError);
    s.write("gap.csv", "bin_center,count\n0,1\n1,2\n3,4\n");
    CHECK_THROWS(io::read_histogram_csv(s.dir() / "gap.csv"));
  }
  SUBCASE("shortest round-trip decimal") {
    for (double v : {0.1, 1.0 / 3.0, 6.7e7, -1e-300, 0.0}) CHECK(std::stod(io::format_double(v)) == v);
    CHECK(io::format_double(0.1) == "0.1");
  }
  SUBCASE("percent rendering") {
    CHECK(report::render_percent(0.0070768, 0.000059) == "0.708 ± 0.006");
    CHECK(report::render_percent(0.0065319, 0.00042) == "0.65 ± 0.04");
    CHECK(report::render_percent(0.0070889, 0.0000212) == "0.709 ± 0.002");
    CHECK(report::render_percent(0.0070768, 0.0) == "0.708");
    CHECK(report::render_percent(0.5, 0.00096) == "50.0 ± 0.1");
  }
  SUBCASE("budget table layout") {
    const CountVector on({5.069e6, 5.0200e4, 118}, {1.4e4, 200, 6});
    const CountVector off({5.103e6, 1.4600e4, 23.9}, {1.4e4, 150, 1.5});
    const auto in = calibration_inputs(on, off, HeraldPurity{0.98794, 0.00007});
    const CalibrationLayout layout{3};
    const auto b0 = evaluate_budget(gamma_estimator(layout, 0), in);
    const auto csv = report::budget_csv(in, {b0});
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "quantity,value,standard_uncertainty,contrib_gamma0_pct");
    std::getline(lines, line);
    CHECK(line.rfind("C0,5069000,14000,", 0) == 0);
    CHECK(count_lines(csv) == 9);
  }
}
