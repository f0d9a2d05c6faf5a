// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <random>

#include "nilmformer/error.hpp"
#include "nilmformer/evaluation.hpp"
#include "nilmformer/synthgen.hpp"

namespace nilm {
namespace {

using Vec = std::vector<double>;

MeterSeries series(const char* start, long dt, std::vector<std::optional<double>> v) {
  return {parse_utc(start), Seconds{dt}, std::move(v)};
}

MeterSeries constant_series(const char* start, long dt, std::size_t n, double value) {
  return series(start, dt, std::vector<std::optional<double>>(n, value));
}

NILMFormerConfig small() {
  NILMFormerConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  return c;
}

TEST(Metrics, HandExamples) {
  EXPECT_EQ(mae(Vec{1, 2, 3}, Vec{1, 2, 3}), 0.0);
  EXPECT_EQ(mae(Vec{50, 50}, Vec{0, 100}), 50.0);
  EXPECT_EQ(matching_ratio(Vec{2, 1, 0}, Vec{1, 2, 0}), 0.5);
  EXPECT_EQ(matching_ratio(Vec{3, 4}, Vec{3, 4}), 1.0);
  EXPECT_EQ(matching_ratio(Vec{0, 0}, Vec{3, 4}), 0.0);
  EXPECT_EQ(matching_ratio(Vec{0, 0}, Vec{0, 0}), 1.0);
  EXPECT_EQ(matching_ratio(Vec{}, Vec{}), 1.0);
}

TEST(Metrics, Errors) {
  EXPECT_THROW(mae(Vec{1}, Vec{1, 2}), ContractError);
  EXPECT_THROW(mae(Vec{}, Vec{}), ContractError);
  EXPECT_THROW(matching_ratio(Vec{1}, Vec{1, 2}), ContractError);
  EXPECT_THROW(matching_ratio(Vec{-1}, Vec{1}), ContractError);
}

TEST(Metrics, MatchBruteForceOnRandomPairs) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng() % 64;
    Vec p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng() % 4 == 0 ? 0.0 : uniform01(rng);
      y[i] = rng() % 4 == 0 ? 0.0 : uniform01(rng);
    }
    long double e = 0, lo = 0, hi = 0;
    for (std::size_t i = 0; i < n; ++i) {
      e += std::fabs((long double)p[i] - y[i]);
      lo += p[i] < y[i] ? p[i] : y[i];
      hi += p[i] < y[i] ? y[i] : p[i];
    }
    ASSERT_NEAR(mae(p, y), double(e / n), 1e-12);
    ASSERT_NEAR(matching_ratio(p, y), hi == 0 ? 1.0 : double(lo / hi), 1e-12);
  }
}

TEST(Metrics, SymmetryAndScaling) {
  std::mt19937_64 rng(22);
  Vec p(200), y(200);
  for (std::size_t i = 0; i < 200; ++i) p[i] = 5 * uniform01(rng), y[i] = 5 * uniform01(rng);
  EXPECT_EQ(matching_ratio(p, y), matching_ratio(y, p));
  Vec ps = p, ys = y;
  for (std::size_t i = 0; i < 200; ++i) ps[i] *= 3.7, ys[i] *= 3.7;
  EXPECT_NEAR(matching_ratio(ps, ys), matching_ratio(p, y), 1e-12);
  EXPECT_NEAR(mae(ps, ys), 3.7 * mae(p, y), 1e-12);
}

TEST(Periods, HalfHourDay) {
  const auto s = constant_series("2024-03-04T00:30:00Z", 1800, 48, 1000.0);
  const auto d = aggregate_period(s, Granularity::day);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].start, parse_utc("2024-03-04T00:00:00Z"));
  EXPECT_EQ(d[0].end, parse_utc("2024-03-05T00:00:00Z"));
  EXPECT_EQ(d[0].predicted, 48000.0);
  EXPECT_EQ(d[0].samples, 48u);
  EXPECT_TRUE(d[0].complete());
  EXPECT_FALSE(d[0].actual.has_value());
}

TEST(Periods, SampleBelongsToTheIntervalItCloses) {
  // 00:00 closes the previous day's last interval.
  const auto s = constant_series("2024-03-04T00:00:00Z", 3600, 3, 1.0);
  const auto d = aggregate_period(s, Granularity::day);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].start, parse_utc("2024-03-03T00:00:00Z"));
  EXPECT_EQ(d[0].samples, 1u);
  EXPECT_FALSE(d[0].complete());
  EXPECT_EQ(d[1].samples, 2u);
  EXPECT_EQ(d[1].expected, 24u);
}

TEST(Periods, JanFebCalendarAndConservation) {
  std::mt19937_64 rng(23);
  const std::size_t n = 60 * 96;  // 2024-01-01 .. 2024-02-29
  auto s = constant_series("2024-01-01T00:15:00Z", 900, n, 0.0);
  for (auto& v : s.values) v = 3000.0 * uniform01(rng);
  const auto days = aggregate_period(s, Granularity::day);
  const auto weeks = aggregate_period(s, Granularity::week);
  const auto months = aggregate_period(s, Granularity::month);
  ASSERT_EQ(days.size(), 60u);
  ASSERT_EQ(months.size(), 2u);
  EXPECT_EQ(months[0].start, parse_utc("2024-01-01T00:00:00Z"));
  EXPECT_EQ(months[0].end, parse_utc("2024-02-01T00:00:00Z"));
  EXPECT_EQ(months[1].end, parse_utc("2024-03-01T00:00:00Z"));
  EXPECT_EQ(months[0].samples, 31u * 96);
  EXPECT_EQ(months[1].samples, 29u * 96);
  EXPECT_TRUE(months[0].complete() && months[1].complete());
  // 2024-01-01 is a Monday: 8 full weeks and a 4-day tail.
  ASSERT_EQ(weeks.size(), 9u);
  EXPECT_TRUE(weeks[7].complete());
  EXPECT_FALSE(weeks[8].complete());

  for (const auto* coarse : {&weeks, &months}) {
    std::size_t k = 0;
    for (const auto& c : *coarse) {
      double s2 = 0.0;
      while (k < days.size() && days[k].start < c.end) s2 += days[k++].predicted;
      EXPECT_EQ(c.predicted, s2);
    }
    EXPECT_EQ(k, days.size());
  }
  for (std::size_t k = 0; k < days.size(); ++k) {
    double s2 = 0.0;
    for (std::size_t i = 0; i < 96; ++i) s2 += *s.values[k * 96 + i];
    EXPECT_EQ(days[k].predicted, s2);
  }
}

TEST(Periods, MissingSamplesFlagThePeriod) {
  auto s = constant_series("2024-03-04T01:00:00Z", 3600, 48, 2.0);
  s.values[30].reset();
  const auto d = aggregate_period(s, Granularity::day);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_TRUE(d[0].complete());
  EXPECT_EQ(d[1].missing, 1u);
  EXPECT_FALSE(d[1].complete());
  EXPECT_EQ(d[1].predicted, 46.0);
}

TEST(Periods, PairedTotalsAndErrors) {
  const auto p = constant_series("2024-03-04T01:00:00Z", 3600, 24, 2.0);
  auto t = constant_series("2024-03-04T02:00:00Z", 3600, 23, 1.0);
  const auto d = aggregate_period(p, t, Granularity::day);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].samples, 23u);
  EXPECT_EQ(d[0].missing, 1u);
  EXPECT_EQ(*d[0].actual, 23.0);
  EXPECT_EQ(d[0].predicted, 46.0);
  EXPECT_THROW(aggregate_period(constant_series("2024-03-04T00:00:00Z", 7 * 3600, 3, 1.0), Granularity::day),
               ConfigError);
  EXPECT_THROW(parse_granularity("year"), ConfigError);
  EXPECT_EQ(parse_granularity("week"), Granularity::week);
}

TEST(EvaluateSeries, IdenticalDisjointAndPeriods) {
  const auto a = constant_series("2024-03-04T00:15:00Z", 900, 96 * 8, 100.0);
  const auto r = evaluate_series("fridge", a, a);
  EXPECT_EQ(r.mae, 0.0);
  EXPECT_EQ(r.mr, 1.0);
  EXPECT_EQ(r.samples, 96u * 8);
  ASSERT_TRUE(r.day.has_value());
  EXPECT_EQ(r.day->periods, 8u);
  EXPECT_EQ(r.day->mae, 0.0);
  ASSERT_TRUE(r.week.has_value());
  EXPECT_EQ(r.week->periods, 1u);
  EXPECT_FALSE(r.month.has_value());

  const auto b = constant_series("2025-03-04T00:15:00Z", 900, 10, 100.0);
  try {
    evaluate_series("fridge", a, b);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_STREQ(e.what(), "no overlapping samples");
  }
  EXPECT_THROW(evaluate_series("fridge", a, constant_series("2024-03-04T00:15:00Z", 1800, 10, 1.0)), ConfigError);
}

TEST(EvaluateSeries, MatchesMetricOracleOnOverlap) {
  auto p = series("2024-03-04T00:00:00Z", 60, {1.0, 2.0, std::nullopt, 4.0, 5.0});
  auto t = series("2024-03-04T00:01:00Z", 60, {2.0, 2.0, 0.0, 1.0, 9.0});
  const auto r = evaluate_series("x", p, t);
  // overlap: (2,2) (4,0) (5,1)
  EXPECT_EQ(r.samples, 3u);
  EXPECT_EQ(r.mae, mae(Vec{2, 4, 5}, Vec{2, 0, 1}));
  EXPECT_EQ(r.mr, matching_ratio(Vec{2, 4, 5}, Vec{2, 0, 1}));
  nlohmann::json j = r;
  EXPECT_EQ(j["appliance"], "x");
  EXPECT_TRUE(j["period_mae"]["day"].is_null());
}

class Disaggregate : public ::testing::Test {
 protected:
  NILMFormer model{small(), 31};
  std::mt19937_64 rng{32};

  MeterSeries random_aggregate(std::size_t n) {
    auto s = constant_series("2024-05-01T00:15:00Z", 900, n, 0.0);
    for (auto& v : s.values) v = 5000.0 * uniform01(rng);
    return s;
  }
  // Independent windowing: every tumbling window (tail padded with the last
  // sample) in one batch, as [count, w].
  Tensor forward_all(const MeterSeries& agg, std::size_t w, double tau, bool one_at_a_time = false) {
    const std::size_t n = agg.size(), count = (n + w - 1) / w;
    Tensor x({count, 1, w});
    std::vector<CovariateWindow> c;
    for (std::size_t k = 0; k < count; ++k) {
      for (std::size_t i = 0; i < w; ++i)
        x[k * w + i] = std::clamp(*agg.values[std::min(k * w + i, n - 1)], 0.0, tau) / tau;
      c.push_back(covariates_for_grid(agg.time_at(k * w), agg.delta_t, w));
    }
    return model.predict(x, c, one_at_a_time ? 1 : 128);
  }
};

TEST_F(Disaggregate, TumblingWindowsInOrder) {
  const std::size_t w = 16;
  const auto agg = random_aggregate(3 * w);
  const auto out = disaggregate_series(model, agg, {.window = w, .tau_max = 6000.0});
  ASSERT_EQ(out.size(), 3 * w);
  EXPECT_EQ(out.start, agg.start);
  EXPECT_EQ(out.delta_t, agg.delta_t);
  const Tensor y = forward_all(agg, w, 6000.0);
  const Tensor y1 = forward_all(agg, w, 6000.0, true);
  for (std::size_t k = 0; k < 3; ++k) {
    double s_out = 0.0, s_ref = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
      EXPECT_EQ(*out.values[k * w + i], y[k * w + i] * 6000.0);
      // single-window batches agree to round-off only
      EXPECT_NEAR(*out.values[k * w + i], y1[k * w + i] * 6000.0, 1e-9);
      s_out += *out.values[k * w + i];
      s_ref += y[k * w + i] * 6000.0;
    }
    EXPECT_EQ(s_out, s_ref);
  }
}

TEST_F(Disaggregate, PartialTailPaddedAndTruncated) {
  const std::size_t w = 16;
  const auto agg = random_aggregate(2 * w + 5);
  const auto out = disaggregate_series(model, agg, {.window = w, .tau_max = 6000.0});
  ASSERT_EQ(out.size(), 2 * w + 5);
  const Tensor y = forward_all(agg, w, 6000.0);
  for (std::size_t i = 0; i < 2 * w + 5; ++i) EXPECT_EQ(*out.values[i], y[i] * 6000.0);
}

TEST_F(Disaggregate, MissingWindowsAndClamp) {
  const std::size_t w = 8;
  auto agg = random_aggregate(3 * w);
  agg.values[w + 3].reset();
  const auto out = disaggregate_series(model, agg, {.window = w, .tau_max = 10.0, .clamp = true});
  for (std::size_t i = 0; i < 3 * w; ++i) {
    if (i >= w && i < 2 * w) {
      EXPECT_FALSE(out.values[i].has_value());
    } else {
      ASSERT_TRUE(out.values[i].has_value());
      EXPECT_GE(*out.values[i], 0.0);
      EXPECT_LE(*out.values[i], 10.0);
    }
  }
  EXPECT_THROW(disaggregate_series(model, agg, {.window = 0}), ContractError);
  EXPECT_EQ(disaggregate_series(model, MeterSeries{agg.start, agg.delta_t, {}}, {.window = w}).size(), 0u);
}

TEST(Ablation, ScoringHandExample) {
  std::vector<AblationRun> runs(3);
  runs[0] = {"a", 0, 10.0, 0.8};
  runs[1] = {"b", 0, 20.0, 0.6};
  runs[2] = {"c", 0, 15.0, 0.8};
  score_runs(runs);
  EXPECT_EQ(runs[0].score, 1.0);
  EXPECT_EQ(runs[1].score, 0.0);
  EXPECT_EQ(runs[2].score, 0.75);
  const auto rows = summarize_runs(runs);
  EXPECT_EQ(rows[0].variant, "a");
  EXPECT_EQ(rows[1].variant, "c");
  EXPECT_EQ(rows[2].variant, "b");
}

TEST(Ablation, IdenticalVariantsTieAndSpreadIsSampleStd) {
  std::vector<AblationRun> runs;
  for (std::uint64_t s : {0, 1, 2}) {
    runs.push_back({"x", s, 10.0 + s, 0.5});
    runs.push_back({"y", s, 10.0 + s, 0.5});
  }
  score_runs(runs);
  for (const auto& r : runs) EXPECT_EQ(r.score, 1.0);
  const auto rows = summarize_runs(runs);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].score_mean, rows[1].score_mean);
  EXPECT_EQ(rows[0].mae_mean, 11.0);
  EXPECT_DOUBLE_EQ(rows[0].mae_spread, 1.0);
}

TEST(Ablation, SmallEndToEnd) {
  BenchmarkSpec spec = standard_benchmark_spec();
  spec.houses = 4;
  spec.days = 3;
  std::vector<WindowBatch> parts;
  for (const auto& h : generate_benchmark(spec, 1)) parts.push_back(make_windows(preprocess(h, spec.max_gap), "fridge", 32));
  AblationData data{WindowBatch::concat(std::span(parts).first(2)), parts[2], parts[3], "fridge", spec.tau_max};
  TrainConfig tc;
  tc.max_epochs = 2;
  tc.patience = 0;
  tc.early_stop = 1;
  tc.lr = 1e-3;
  tc.batch_size = 8;
  const std::vector<std::string> variants{"full", "nope"};
  const std::vector<std::uint64_t> seeds{0, 1};
  std::size_t runs_seen = 0;
  const auto t1 = run_ablation(data, small(), tc, variants, seeds, [&](const AblationRun&) { ++runs_seen; });
  EXPECT_EQ(runs_seen, 4u);
  ASSERT_EQ(t1.runs.size(), 4u);
  ASSERT_EQ(t1.rows.size(), 2u);
  for (const auto& r : t1.runs) {
    EXPECT_GE(r.score, 0.0);
    EXPECT_LE(r.score, 1.0);
    EXPECT_GE(r.mr, 0.0);
    EXPECT_LE(r.mr, 1.0);
    EXPECT_GE(r.mae, 0.0);
  }
  const auto t2 = run_ablation(data, small(), tc, variants, seeds);
  EXPECT_EQ(ablation_csv(t1), ablation_csv(t2));
  EXPECT_NE(ablation_csv(t1).find("variant,mae_mean"), std::string::npos);
  EXPECT_THROW(run_ablation(data, small(), tc, {}, seeds), ConfigError);
}

class SeriesFiles : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() / ("nilm_series_" + std::to_string(::getpid()));
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }
  std::filesystem::path write(const char* name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
  }
};

TEST_F(SeriesFiles, RoundTripKeepsValuesAndGaps) {
  const auto s = series("2024-03-01T00:15:00Z", 900, {1.5, std::nullopt, 0.1 + 0.2, 1e-300, 12345.678});
  write_series_csv(dir / "s.csv", s);
  const auto back = read_series_csv(dir / "s.csv");
  EXPECT_EQ(back.start, s.start);
  EXPECT_EQ(back.delta_t, s.delta_t);
  EXPECT_EQ(back.values, s.values);
}

TEST_F(SeriesFiles, AbsentRowsBecomeMissing) {
  const auto s = read_series_csv(write("a.csv", "timestamp,watts\n2024-01-01T00:00:00Z,1\n2024-01-01T00:30:00Z,3\r\n"
                                                "2024-01-01T00:45:00Z,4\n"));
  EXPECT_EQ(s.delta_t, Seconds{900});
  ASSERT_EQ(s.size(), 4u);
  EXPECT_FALSE(s.values[1].has_value());
  EXPECT_EQ(*s.values[3], 4.0);
}

TEST_F(SeriesFiles, SingleRowNeedsFallback) {
  const auto p = write("one.csv", "2024-01-01T00:00:00Z,7\n");
  EXPECT_THROW(read_series_csv(p), ConfigError);
  const auto s = read_series_csv(p, Seconds{60});
  EXPECT_EQ(s.delta_t, Seconds{60});
  EXPECT_EQ(s.size(), 1u);
}

TEST_F(SeriesFiles, MalformedInputIsRejected) {
  EXPECT_THROW(read_series_csv(dir / "absent.csv"), ConfigError);
  EXPECT_THROW(read_series_csv(write("e.csv", "timestamp,watts\n")), ConfigError);
  EXPECT_THROW(read_series_csv(write("off.csv", "2024-01-01T00:00:00Z,1\n2024-01-01T00:10:00Z,1\n"
                                                "2024-01-01T00:25:00Z,1\n")),
               ConfigError);
  EXPECT_THROW(read_series_csv(write("ord.csv", "2024-01-01T00:15:00Z,1\n2024-01-01T00:00:00Z,1\n")), ConfigError);
  EXPECT_THROW(read_series_csv(write("dup.csv", "2024-01-01T00:15:00Z,1\n2024-01-01T00:15:00Z,1\n")), ConfigError);
  EXPECT_THROW(read_series_csv(write("num.csv", "2024-01-01T00:15:00Z,12W\n")), ConfigError);
  EXPECT_THROW(read_series_csv(write("nan.csv", "2024-01-01T00:15:00Z,nan\n")), ConfigError);
  EXPECT_THROW(read_series_csv(write("cols.csv", "2024-01-01T00:15:00Z,1,2\n")), ConfigError);
}

TEST(SplitWindows, HousesLandInExactlyOneSplit) {
  BenchmarkSpec spec = standard_benchmark_spec();
  spec.houses = 10;
  spec.days = 2;
  std::vector<House> houses;
  for (const auto& h : generate_benchmark(spec, 1)) houses.push_back(preprocess(h, spec.max_gap));
  SplitOptions opt{.appliance = "fridge", .window = 48, .seed = 4, .validation_fraction = 0.2, .test_fraction = 0.2};
  const auto d = split_windows(houses, opt);
  std::set<std::string> tr, va, te;
  for (const auto& p : d.train.provenance) tr.insert(p.house_id);
  for (const auto& p : d.validation.provenance) va.insert(p.house_id);
  for (const auto& p : d.test.provenance) te.insert(p.house_id);
  EXPECT_EQ(tr.size(), 6u);
  EXPECT_EQ(va.size(), 2u);
  EXPECT_EQ(te.size(), 2u);
  for (const auto& id : va) EXPECT_FALSE(tr.count(id) || te.count(id));
  for (const auto& id : te) EXPECT_FALSE(tr.count(id));
  EXPECT_EQ(d.train.size() + d.validation.size() + d.test.size(), 10u * 4u);
  EXPECT_EQ(d.train.window_length(), 48u);
  EXPECT_EQ(d.tau_max, spec.tau_max);
  EXPECT_EQ(d.appliance, "fridge");

  const auto again = split_windows(houses, opt);
  EXPECT_EQ(again.test.windows, d.test.windows);

  EXPECT_THROW(split_windows({}, opt), ConfigError);
  houses[3].tau_max = 1.0;
  EXPECT_THROW(split_windows(houses, opt), ConfigError);
}

}  // namespace
}  // namespace nilm
