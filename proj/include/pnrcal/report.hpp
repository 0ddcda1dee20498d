#pragma once
// JSON documents and human-readable renderings. Efficiencies become percent
// here and nowhere else.

#include <string>
#include <vector>

#include <json.hpp>

#include "pnrcal/histogram.hpp"
#include "pnrcal/model.hpp"
#include "pnrcal/simulator.hpp"
#include "pnrcal/uncertainty.hpp"

namespace pnrcal::report {

using nlohmann::json;

/// "0.708 ± 0.006" with the uncertainty rounded to one significant digit and
/// the value aligned to it; three significant digits when u == 0.
std::string render_percent(double fraction, double u_fraction);

json to_json(const EfficiencyEstimate& e);
json to_json(const UncertaintyBudget& b);
json to_json(const CountVector& c);
json to_json(const HeraldPurity& xi);
json to_json(const FitQuality& q);
json to_json(const MixtureFit& fit);
json to_json(const ExperimentConfig& c);
json to_json(const RunTallies& t);
json to_json(const PileupReport& p);
json to_json(const ClosureReport& r);

/// Budget CSV: one row per input with its value, standard uncertainty
/// and signed contribution (in %) to each target, then one row per target.
std::string budget_csv(const InputVector& inputs, const std::vector<UncertaintyBudget>& budgets);

/// Aligned text table of per-estimator closure statistics.
std::string closure_table(const ClosureReport& r);

/// Adds {"metadata": {"generated_at": ..., "tool": "pnrcal"}}; everything
/// else in a report is a deterministic function of its inputs.
void stamp_metadata(json& doc);

/// Copy without the metadata field, for reproducibility comparisons.
json without_metadata(json doc);

} // namespace pnrcal::report
