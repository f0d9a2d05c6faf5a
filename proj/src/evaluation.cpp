// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "nilmformer/error.hpp"

namespace nilm {

double mae(std::span<const double> pred, std::span<const double> truth) {
  NILM_EXPECT(pred.size() == truth.size(), "mae: length mismatch");
  NILM_EXPECT(!pred.empty(), "mae: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

double matching_ratio(std::span<const double> pred, std::span<const double> truth) {
  NILM_EXPECT(pred.size() == truth.size(), "matching_ratio: length mismatch");
  double lo = 0.0, hi = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    NILM_EXPECT(pred[i] >= 0.0 && truth[i] >= 0.0, "matching_ratio: inputs must be nonnegative");
    lo += std::min(pred[i], truth[i]);
    hi += std::max(pred[i], truth[i]);
  }
  return hi == 0.0 ? 1.0 : lo / hi;
}

// ---- series ---------------------------------------------------------------

MeterSeries disaggregate_series(const NILMFormer& model, const MeterSeries& aggregate, const DisaggregateOptions& opt) {
  const std::size_t w = opt.window;
  NILM_EXPECT(w > 0, "disaggregate_series: window length must be positive");
  NILM_EXPECT(opt.tau_max > 0.0, "disaggregate_series: tau_max must be positive");
  MeterSeries out{aggregate.start, aggregate.delta_t, std::vector<std::optional<double>>(aggregate.size())};
  const std::size_t n = aggregate.size();
  if (n == 0) return out;
  const MeterSeries scaled = clip_scale(aggregate, opt.tau_max);

  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s < n; s += w) {
    bool complete = true;
    for (std::size_t i = s; i < s + w && complete; ++i) complete = scaled.values[std::min(i, n - 1)].has_value();
    if (complete) starts.push_back(s);
  }
  if (starts.empty()) return out;

  Tensor windows({starts.size(), 1, w});
  std::vector<CovariateWindow> covs;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    for (std::size_t i = 0; i < w; ++i) windows[k * w + i] = *scaled.values[std::min(starts[k] + i, n - 1)];
    covs.push_back(covariates_for_grid(scaled.time_at(starts[k]), scaled.delta_t, w));
  }
  const Tensor pred = model.predict(windows, covs, opt.chunk);
  for (std::size_t k = 0; k < starts.size(); ++k)
    for (std::size_t i = 0; i < w && starts[k] + i < n; ++i) {
      double v = pred[k * w + i] * opt.tau_max;
      if (opt.clamp) v = std::clamp(v, 0.0, opt.tau_max);
      out.values[starts[k] + i] = v;
    }
  return out;
}

Granularity parse_granularity(const std::string& s) {
  if (s == "day") return Granularity::day;
  if (s == "week") return Granularity::week;
  if (s == "month") return Granularity::month;
  throw ConfigError("unknown period '" + s + "' (expected day, week or month)");
}

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::day:
      return "day";
    case Granularity::week:
      return "week";
    case Granularity::month:
      return "month";
  }
  return "?";
}

namespace {

constexpr Seconds kDay{86400};

std::vector<PeriodEstimate> period_totals(const MeterSeries& pred, const MeterSeries* truth, Granularity g) {
  const Seconds dt = pred.delta_t;
  NILM_EXPECT(dt.count() > 0, "aggregate_period: delta_t must be positive");
  if (kDay % dt != Seconds{0}) throw ConfigError("aggregate_period: delta_t must divide one day");
  Instant first = pred.start;
  Instant last = pred.time_at(pred.size());  // one past the end
  if (truth) {
    NILM_EXPECT(truth->delta_t == dt, "aggregate_period: series have different delta_t");
    NILM_EXPECT((truth->start - pred.start) % dt == Seconds{0}, "aggregate_period: series grids are not aligned");
    if (pred.size() == 0) {
      first = truth->start;
      last = truth->time_at(truth->size());
    } else if (truth->size() > 0) {
      first = std::min(first, truth->start);
      last = std::max(last, truth->time_at(truth->size()));
    }
  }
  if (first >= last) return {};

  auto value_at = [](const MeterSeries& s, Instant t) -> std::optional<double> {
    if (t < s.start) return std::nullopt;
    const auto i = static_cast<std::size_t>((t - s.start) / s.delta_t);
    return i < s.size() ? s.values[i] : std::nullopt;
  };

  const auto per_day = static_cast<std::size_t>(kDay / dt);
  std::vector<PeriodEstimate> days;
  for (Instant t = first; t < last; t += dt) {
    const Instant day = floor_day(t - dt);
    if (days.empty() || days.back().start != day) {
      PeriodEstimate e;
      e.start = day;
      e.end = day + kDay;
      e.expected = per_day;
      if (truth) e.actual = 0.0;
      days.push_back(e);
    }
    auto& d = days.back();
    const auto p = value_at(pred, t);
    const auto a = truth ? value_at(*truth, t) : std::optional<double>(0.0);
    if (p && a) {
      d.predicted += *p;
      if (truth) *d.actual += *a;
      ++d.samples;
    } else {
      ++d.missing;
    }
  }
  if (g == Granularity::day) return days;

  std::vector<PeriodEstimate> out;
  for (const auto& d : days) {
    const Instant start = g == Granularity::week ? floor_week(d.start) : floor_month(d.start);
    if (out.empty() || out.back().start != start) {
      PeriodEstimate e;
      e.start = start;
      e.end = g == Granularity::week ? start + 7 * kDay : next_month(start);
      e.expected = static_cast<std::size_t>((e.end - e.start) / dt);
      if (truth) e.actual = 0.0;
      out.push_back(e);
    }
    auto& p = out.back();
    p.predicted += d.predicted;
    if (truth) *p.actual += *d.actual;
    p.samples += d.samples;
    p.missing += d.missing;
  }
  return out;
}

}  // namespace

std::vector<PeriodEstimate> aggregate_period(const MeterSeries& pred, Granularity g) {
  return period_totals(pred, nullptr, g);
}

std::vector<PeriodEstimate> aggregate_period(const MeterSeries& pred, const MeterSeries& truth, Granularity g) {
  return period_totals(pred, &truth, g);
}

// ---- reports --------------------------------------------------------------

MetricReport evaluate_series(const std::string& appliance, const MeterSeries& pred, const MeterSeries& truth) {
  if (pred.delta_t != truth.delta_t) throw ConfigError("prediction and truth have different sampling intervals");
  if ((truth.start - pred.start) % pred.delta_t != Seconds{0})
    throw ConfigError("prediction and truth grids are not aligned");
  std::vector<double> p, a;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Instant t = pred.time_at(i);
    if (t < truth.start || !pred.values[i]) continue;
    const auto j = static_cast<std::size_t>((t - truth.start) / truth.delta_t);
    if (j >= truth.size() || !truth.values[j]) continue;
    p.push_back(*pred.values[i]);
    a.push_back(*truth.values[j]);
  }
  if (p.empty()) throw ConfigError("no overlapping samples");

  MetricReport r;
  r.appliance = appliance;
  r.samples = p.size();
  r.mae = mae(p, a);
  // Negative predicted power has no overlap meaning.
  std::vector<double> pc(p.size());
  std::transform(p.begin(), p.end(), pc.begin(), [](double v) { return std::max(v, 0.0); });
  r.mr = matching_ratio(pc, a);

  auto per_period = [&](Granularity g) -> std::optional<PeriodMetric> {
    PeriodMetric m;
    double s = 0.0;
    for (const auto& e : aggregate_period(pred, truth, g)) {
      if (!e.complete()) continue;
      s += std::abs(e.predicted - *e.actual);
      ++m.periods;
    }
    if (m.periods == 0) return std::nullopt;
    m.mae = s / static_cast<double>(m.periods);
    return m;
  };
  if (Seconds{86400} % pred.delta_t == Seconds{0}) {
    r.day = per_period(Granularity::day);
    r.week = per_period(Granularity::week);
    r.month = per_period(Granularity::month);
  }
  return r;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"appliance", r.appliance}, {"mae", r.mae}, {"mr", r.mr}, {"samples", r.samples}};
  auto put = [&](const char* key, const std::optional<PeriodMetric>& m) {
    j["period_mae"][key] = m ? nlohmann::json{{"mae", m->mae}, {"periods", m->periods}} : nlohmann::json(nullptr);
  };
  put("day", r.day);
  put("week", r.week);
  put("month", r.month);
}

// ---- files ----------------------------------------------------------------

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_series_csv(const std::filesystem::path& path, const MeterSeries& s) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open " + path.string() + " for writing");
  os << "timestamp,watts\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    os << format_utc(s.time_at(i)) << ',';
    if (s.values[i]) os << shortest(*s.values[i]);
    os << '\n';
  }
}

MeterSeries read_series_csv(const std::filesystem::path& path, Seconds fallback) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open series file " + path.string());
  std::vector<std::pair<Instant, std::optional<double>>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("timestamp", 0) == 0) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
      throw ConfigError(where + ": expected timestamp,watts");
    const Instant t = parse_utc(line.substr(0, comma));
    const std::string field = line.substr(comma + 1);
    std::optional<double> v;
    if (!field.empty()) {
      double x = 0.0;
      const auto res = std::from_chars(field.data(), field.data() + field.size(), x);
      if (res.ec != std::errc() || res.ptr != field.data() + field.size() || !std::isfinite(x))
        throw ConfigError(where + ": bad watts value '" + field + "'");
      v = x;
    }
    if (!rows.empty() && t <= rows.back().first) throw ConfigError(where + ": timestamps must be strictly increasing");
    rows.emplace_back(t, v);
  }
  if (rows.empty()) throw ConfigError(path.string() + ": no rows");
  Seconds dt = fallback;
  if (rows.size() > 1) {
    dt = rows[1].first - rows[0].first;
    for (std::size_t i = 1; i < rows.size(); ++i) dt = std::min(dt, rows[i].first - rows[i - 1].first);
  }
  if (dt <= Seconds{0}) throw ConfigError(path.string() + ": cannot infer the sampling interval from one row");
  MeterSeries s{rows.front().first, dt, {}};
  s.values.resize(static_cast<std::size_t>((rows.back().first - s.start) / dt) + 1);
  for (const auto& [t, v] : rows) {
    if ((t - s.start) % dt != Seconds{0}) throw ConfigError(path.string() + ": " + format_utc(t) + " is off the grid");
    s.values[static_cast<std::size_t>((t - s.start) / dt)] = v;
  }
  return s;
}

void write_periods_csv(std::ostream& os, std::span<const PeriodEstimate> periods) {
  os << "start,end,predicted,actual,samples,expected,missing,complete\n";
  for (const auto& p : periods)
    os << format_utc(p.start) << ',' << format_utc(p.end) << ',' << shortest(p.predicted) << ','
       << (p.actual ? shortest(*p.actual) : "") << ',' << p.samples << ',' << p.expected << ',' << p.missing << ','
       << (p.complete() ? "true" : "false") << '\n';
}

// ---- ablation -------------------------------------------------------------

AblationData split_windows(std::span<const House> houses, const SplitOptions& opt) {
  if (houses.empty()) throw ConfigError("no houses to split");
  std::vector<std::string> ids;
  for (const auto& h : houses) {
    if (h.tau_max != houses.front().tau_max) throw ConfigError("houses disagree on tau_max");
    ids.push_back(h.id);
  }
  const DatasetSplit split = split_houses(ids, opt.seed, opt.validation_fraction, opt.test_fraction);
  auto windows = [&](const std::vector<std::string>& want) {
    std::vector<WindowBatch> parts;
    for (const auto& id : want) {
      const auto it = std::find_if(houses.begin(), houses.end(), [&](const House& h) { return h.id == id; });
      parts.push_back(make_windows(*it, opt.appliance, opt.window));
    }
    return WindowBatch::concat(parts);
  };
  return {windows(split.train), windows(split.validation), windows(split.test), opt.appliance, houses.front().tau_max};
}

void score_runs(std::vector<AblationRun>& runs) {
  std::map<std::uint64_t, std::vector<AblationRun*>> by_seed;
  for (auto& r : runs) by_seed[r.seed].push_back(&r);
  for (auto& [seed, group] : by_seed) {
    auto [mae_lo, mae_hi] = std::minmax_element(group.begin(), group.end(),
                                                [](auto* x, auto* y) { return x->mae < y->mae; });
    auto [mr_lo, mr_hi] = std::minmax_element(group.begin(), group.end(),
                                              [](auto* x, auto* y) { return x->mr < y->mr; });
    const double a0 = (*mae_lo)->mae, a1 = (*mae_hi)->mae, m0 = (*mr_lo)->mr, m1 = (*mr_hi)->mr;
    for (auto* r : group) {
      const double s_mae = a1 > a0 ? (a1 - r->mae) / (a1 - a0) : 1.0;
      const double s_mr = m1 > m0 ? (r->mr - m0) / (m1 - m0) : 1.0;
      r->score = 0.5 * (s_mae + s_mr);
    }
  }
}

namespace {

std::pair<double, double> mean_spread(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

std::vector<AblationRow> summarize_runs(const std::vector<AblationRun>& runs) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRun*>> by_variant;
  for (const auto& r : runs) {
    if (!by_variant.count(r.variant)) order.push_back(r.variant);
    by_variant[r.variant].push_back(&r);
  }
  std::vector<AblationRow> rows;
  for (const auto& v : order) {
    std::vector<double> a, m, s;
    for (const auto* r : by_variant[v]) {
      a.push_back(r->mae);
      m.push_back(r->mr);
      s.push_back(r->score);
    }
    AblationRow row;
    row.variant = v;
    std::tie(row.mae_mean, row.mae_spread) = mean_spread(a);
    std::tie(row.mr_mean, row.mr_spread) = mean_spread(m);
    std::tie(row.score_mean, row.score_spread) = mean_spread(s);
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) { return x.score_mean > y.score_mean; });
  return rows;
}

AblationTable run_ablation(const AblationData& data, const NILMFormerConfig& base, const TrainConfig& train_cfg,
                           std::span<const std::string> variants, std::span<const std::uint64_t> seeds,
                           const AblationProgress& on_run, const AblationEpochProgress& on_epoch) {
  if (variants.empty()) throw ConfigError("ablation needs at least one variant");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (data.test.empty()) throw ConfigError("ablation test set is empty");
  std::vector<double> truth(data.test.targets.size());
  for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = data.test.targets[i] * data.tau_max;

  AblationTable table;
  for (const auto seed : seeds) {
    for (const auto& v : variants) {
      const NILMFormerConfig cfg = apply_variant(base, v);
      NILMFormer model(cfg, set_seed(seed).init);
      TrainConfig tc = train_cfg;
      tc.seed = seed;
      EpochCallback cb;
      if (on_epoch) cb = [&](const EpochRecord& e) { on_epoch(v, seed, e); };
      AblationRun run;
      run.variant = v;
      run.seed = seed;
      run.report = train(model, data.train, data.validation, tc, cb);
      const Tensor pred = model.predict(data.test.windows, data.test.covariates);
      std::vector<double> p(pred.size());
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::clamp(pred[i], 0.0, 1.0) * data.tau_max;
      run.mae = mae(p, truth);
      run.mr = matching_ratio(p, truth);
      if (on_run) on_run(run);
      table.runs.push_back(std::move(run));
    }
  }
  score_runs(table.runs);
  table.rows = summarize_runs(table.runs);
  return table;
}

void to_json(nlohmann::json& j, const AblationTable& t) {
  j = {{"runs", nlohmann::json::array()}, {"rows", nlohmann::json::array()}};
  for (const auto& r : t.runs)
    j["runs"].push_back(
        {{"variant", r.variant}, {"seed", r.seed}, {"mae", r.mae}, {"mr", r.mr}, {"score", r.score}, {"train", r.report}});
  for (const auto& r : t.rows)
    j["rows"].push_back({{"variant", r.variant},
                         {"mae_mean", r.mae_mean},
                         {"mae_spread", r.mae_spread},
                         {"mr_mean", r.mr_mean},
                         {"mr_spread", r.mr_spread},
                         {"score_mean", r.score_mean},
                         {"score_spread", r.score_spread}});
}

std::string ablation_csv(const AblationTable& t) {
  std::ostringstream os;
  os.precision(17);
  os << "variant,mae_mean,mae_spread,mr_mean,mr_spread,score_mean,score_spread\n";
  for (const auto& r : t.rows)
    os << r.variant << ',' << r.mae_mean << ',' << r.mae_spread << ',' << r.mr_mean << ',' << r.mr_spread << ','
       << r.score_mean << ',' << r.score_spread << '\n';
  return os.str();
}

}  // namespace nilm
