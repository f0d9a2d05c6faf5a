// SPDX-License-Identifier: Apache-2.0
#pragma once

// Timestamp-level metrics, whole-series disaggregation, calendar period
// totals and the ablation driver.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nilmformer/dataio.hpp"
#include "nilmformer/model.hpp"
#include "nilmformer/training.hpp"

namespace nilm {

// (1/T) sum |pred - truth|. Lengths must match and be nonzero.
double mae(std::span<const double> pred, std::span<const double> truth);

// sum min(pred, truth) / sum max(pred, truth) for nonnegative inputs; 1 when
// both are identically zero.
double matching_ratio(std::span<const double> pred, std::span<const double> truth);

// ---- series ---------------------------------------------------------------

struct DisaggregateOptions {
  std::size_t window = 0;  // required
  double tau_max = 1.0;
  bool clamp = false;  // bound outputs to [0, tau_max]
  std::size_t chunk = 128;
};

// Tumbling windows over the clipped/scaled aggregate (raw watts in), one
// forward pass per window, outputs concatenated and unscaled to watts. The
// trailing partial window is padded by repeating the final sample and its
// prediction truncated. Every sample of a window that contains a missing value
// is emitted as missing.
MeterSeries disaggregate_series(const NILMFormer& model, const MeterSeries& aggregate, const DisaggregateOptions& opt);

enum class Granularity { day, week, month };
Granularity parse_granularity(const std::string& s);
std::string to_string(Granularity g);

// A sample stamped t averages (t - delta_t, t] and so belongs to the period
// containing t - delta_t. Weeks start on Monday, all boundaries are UTC.
struct PeriodEstimate {
  Instant start{};
  Instant end{};  // exclusive
  double predicted = 0.0;  // sum of the present samples
  std::optional<double> actual;
  std::size_t samples = 0;   // present samples
  std::size_t expected = 0;  // grid samples the period spans
  std::size_t missing = 0;   // grid samples inside the series that are missing

  // Every grid sample of the period is present (in both series when compared).
  bool complete() const { return missing == 0 && samples == expected; }
};

// Calendar totals. Day totals are summed sample by sample; weeks and months
// are the sums of their day totals in order, so coarser totals are exactly
// the sum of the finer ones. delta_t must divide one day.
std::vector<PeriodEstimate> aggregate_period(const MeterSeries& pred, Granularity g);
// Same, with truth totals attached. Both series share delta_t; periods cover
// the union of the two grids and a sample counts only if both are present.
std::vector<PeriodEstimate> aggregate_period(const MeterSeries& pred, const MeterSeries& truth, Granularity g);

// ---- reports --------------------------------------------------------------

struct PeriodMetric {
  double mae = 0.0;  // over complete periods, in summed watts
  std::size_t periods = 0;
};

struct MetricReport {
  std::string appliance;
  double mae = 0.0;  // watts
  double mr = 0.0;
  std::size_t samples = 0;
  std::optional<PeriodMetric> day, week, month;  // empty when no period is complete
};

// Metrics over timestamps where both series are present. Throws ConfigError
// "no overlapping samples" when there are none.
MetricReport evaluate_series(const std::string& appliance, const MeterSeries& pred, const MeterSeries& truth);

void to_json(nlohmann::json& j, const MetricReport& r);

// ---- files ----------------------------------------------------------------

// "timestamp,watts" rows, one per grid sample; a missing sample has an empty
// watts field.
void write_series_csv(const std::filesystem::path& path, const MeterSeries& s);
// Rows must be strictly increasing and lie on one grid; delta_t is the
// smallest spacing (or `fallback` for a single row). Absent grid points and
// empty fields become missing samples.
MeterSeries read_series_csv(const std::filesystem::path& path, Seconds fallback = Seconds{0});
// "start,end,predicted,actual,samples,expected,missing,complete"
void write_periods_csv(std::ostream& os, std::span<const PeriodEstimate> periods);

// ---- ablation -------------------------------------------------------------

struct AblationData {
  WindowBatch train, validation, test;
  std::string appliance;
  double tau_max = 1.0;
};

struct SplitOptions {
  std::string appliance;
  std::size_t window = 96;
  std::uint64_t seed = 0;  // house shuffle
  double validation_fraction = 0.15;
  double test_fraction = 0.15;
};

// Splits preprocessed houses by id and cuts each split into windows. All
// houses must share tau_max.
AblationData split_windows(std::span<const House> houses, const SplitOptions& opt);

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  double mae = 0.0;  // watts on the test windows, predictions clamped at 0
  double mr = 0.0;
  double score = 0.0;  // normalized overall score within this seed
  TrainReport report;
};

struct AblationRow {
  std::string variant;
  double mae_mean = 0.0, mae_spread = 0.0;
  double mr_mean = 0.0, mr_spread = 0.0;
  double score_mean = 0.0, score_spread = 0.0;  // spread = sample std over seeds
};

struct AblationTable {
  std::vector<AblationRun> runs;
  std::vector<AblationRow> rows;  // ranked by score_mean, best first
};

// Per seed, MAE and MR are min-max normalized across variants (lower MAE and
// higher MR map to 1; a metric equal for all variants maps to 1) and averaged
// into the overall score.
void score_runs(std::vector<AblationRun>& runs);
std::vector<AblationRow> summarize_runs(const std::vector<AblationRun>& runs);

using AblationProgress = std::function<void(const AblationRun&)>;
using AblationEpochProgress = std::function<void(const std::string& variant, std::uint64_t seed, const EpochRecord&)>;

AblationTable run_ablation(const AblationData& data, const NILMFormerConfig& base, const TrainConfig& train_cfg,
                           std::span<const std::string> variants, std::span<const std::uint64_t> seeds,
                           const AblationProgress& on_run = {}, const AblationEpochProgress& on_epoch = {});

void to_json(nlohmann::json& j, const AblationTable& t);
// Delimited: variant,mae_mean,mae_spread,mr_mean,mr_spread,score_mean,score_spread
std::string ablation_csv(const AblationTable& t);

}  // namespace nilm
