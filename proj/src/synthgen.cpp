// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "nilmformer/error.hpp"
#include "nilmformer/layers.hpp"

namespace nilm {

namespace {

constexpr long kDay = 86400;

struct Interval {
  long on;   // seconds since epoch
  long off;
  double power;
};

double jitter(std::mt19937_64& rng, double amplitude) { return amplitude * (2.0 * uniform01(rng) - 1.0); }

long window_open(long day, const ApplianceSpec& a) { return day + a.window_start_hour * 3600L; }

long window_length(const ApplianceSpec& a) {
  const int end = a.window_end_hour <= a.window_start_hour ? a.window_end_hour + 24 : a.window_end_hour;
  return (end - a.window_start_hour) * 3600L;
}

double activation_power(const ApplianceSpec& a, std::mt19937_64& rng) {
  return a.power * (1.0 + jitter(rng, a.power_jitter));
}

// One activation inside today's window, or none.
void daily_activation(const ApplianceSpec& a, long day, std::mt19937_64& rng, std::vector<Interval>& out) {
  if (uniform01(rng) >= a.probability) return;
  const long span = window_length(a);
  const double raw = static_cast<double>(a.on_duration.count()) + jitter(rng, static_cast<double>(a.duration_jitter.count()));
  const long dur = std::clamp(std::lround(raw), 60L, span);
  const long slack = span - dur;
  const long offset = static_cast<long>(std::floor(uniform01(rng) * static_cast<double>(slack + 1)));
  const long on = window_open(day, a) + offset;
  out.push_back({on, on + dur, activation_power(a, rng)});
}

std::vector<Interval> activations(const ApplianceSpec& a, long t0, long t1, std::mt19937_64& rng) {
  std::vector<Interval> out;
  switch (a.archetype) {
    case Archetype::always_on:
      out.push_back({t0, t1, a.power});
      break;
    case Archetype::cyclic: {
      const long period = a.period.count();
      const long phase = static_cast<long>(uniform01(rng) * static_cast<double>(period));
      for (long c = t0 - period + phase; c < t1; c += period) {
        const double raw = static_cast<double>(a.on_duration.count()) +
                           jitter(rng, static_cast<double>(a.duration_jitter.count()));
        const long dur = std::clamp(std::lround(raw), 0L, period);
        out.push_back({c, c + dur, activation_power(a, rng)});
      }
      break;
    }
    case Archetype::scheduled:
    case Archetype::weekly: {
      const long first_day = (t0 / kDay - 1) * kDay;
      for (long day = first_day; day < t1; day += kDay) {
        if (a.archetype == Archetype::weekly) {
          const int wd = calendar_fields(Instant{Seconds{day}}).weekday;
          if (std::find(a.active_weekdays.begin(), a.active_weekdays.end(), wd) == a.active_weekdays.end()) continue;
        }
        daily_activation(a, day, rng, out);
      }
      break;
    }
  }
  return out;
}

// Exact average power of the intervals over each bucket (start + (i-1)dt, start + i*dt].
std::vector<double> bucket_average(const std::vector<Interval>& intervals, long start, long dt, std::size_t n) {
  std::vector<double> out(n, 0.0);
  const long grid_lo = start - dt;
  for (const auto& iv : intervals) {
    const long lo = std::max(iv.on, grid_lo);
    const long hi = std::min(iv.off, start + static_cast<long>(n - 1) * dt);
    if (hi <= lo) continue;
    for (long b = (lo - grid_lo) / dt; b < static_cast<long>(n); ++b) {
      const long b_lo = grid_lo + b * dt;
      const long b_hi = b_lo + dt;
      if (b_lo >= hi) break;
      const long overlap = std::min(hi, b_hi) - std::max(lo, b_lo);
      if (overlap > 0) out[b] += iv.power * static_cast<double>(overlap) / static_cast<double>(dt);
    }
  }
  return out;
}

const char* archetype_name(Archetype a) {
  switch (a) {
    case Archetype::always_on: return "always-on";
    case Archetype::cyclic: return "cyclic";
    case Archetype::scheduled: return "scheduled";
    case Archetype::weekly: return "weekly";
  }
  return "?";
}

Archetype parse_archetype(const std::string& s) {
  if (s == "always-on") return Archetype::always_on;
  if (s == "cyclic") return Archetype::cyclic;
  if (s == "scheduled") return Archetype::scheduled;
  if (s == "weekly") return Archetype::weekly;
  throw ConfigError("unknown appliance archetype '" + s + "'");
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void ApplianceSpec::validate() const {
  if (name.empty()) throw ConfigError("appliance name must not be empty");
  if (name == "aggregate") throw ConfigError("'aggregate' is reserved and cannot name an appliance");
  if (!(power >= 0.0) || !std::isfinite(power)) throw ConfigError(name + ": power must be >= 0");
  if (probability < 0.0 || probability > 1.0) throw ConfigError(name + ": probability must lie in [0, 1]");
  if (power_jitter < 0.0 || power_jitter > 1.0) throw ConfigError(name + ": power_jitter must lie in [0, 1]");
  if (duration_jitter.count() < 0) throw ConfigError(name + ": duration_jitter must be >= 0");
  if (archetype == Archetype::cyclic && (period.count() <= 0 || on_duration.count() < 0 || on_duration > period))
    throw ConfigError(name + ": cyclic appliances need 0 <= on_duration <= period");
  if (archetype == Archetype::scheduled || archetype == Archetype::weekly) {
    if (window_start_hour < 0 || window_start_hour > 23 || window_end_hour < 0 || window_end_hour > 24)
      throw ConfigError(name + ": activation window hours out of range");
    if (on_duration.count() <= 0 || on_duration.count() > window_length(*this))
      throw ConfigError(name + ": on_duration must be positive and fit inside the activation window");
  }
  if (archetype == Archetype::weekly) {
    if (active_weekdays.empty()) throw ConfigError(name + ": weekly appliances need active_weekdays");
    for (int d : active_weekdays)
      if (d < 0 || d > 6) throw ConfigError(name + ": weekday out of range 0-6");
  }
}

void HouseSpec::validate() const {
  if (delta_t.count() <= 0) throw ConfigError("delta_t must be positive");
  if (duration.count() <= 0 || duration.count() % delta_t.count() != 0)
    throw ConfigError("duration must be a positive multiple of delta_t");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (!(tau_max > 0.0)) throw ConfigError("tau_max must be positive");
  for (std::size_t i = 0; i < appliances.size(); ++i) {
    appliances[i].validate();
    for (std::size_t j = 0; j < i; ++j)
      if (appliances[j].name == appliances[i].name) throw ConfigError("duplicate appliance '" + appliances[i].name + "'");
  }
}

std::vector<double> noise_draws(const HouseSpec& spec) {
  const auto n = static_cast<std::size_t>(spec.duration / spec.delta_t);
  std::vector<double> out(n, 0.0);
  if (spec.noise_std == 0.0) return out;
  std::mt19937_64 rng(mix_seed(spec.seed, 0xA0153));
  for (auto& v : out) v = spec.noise_std * standard_normal(rng);
  return out;
}

House generate_house(const HouseSpec& spec) {
  spec.validate();
  const auto n = static_cast<std::size_t>(spec.duration / spec.delta_t);
  const long start = spec.start.time_since_epoch().count();
  const long dt = spec.delta_t.count();
  House house;
  house.id = spec.id;
  house.tau_max = spec.tau_max;
  std::vector<double> total(n, 0.0);
  for (std::size_t k = 0; k < spec.appliances.size(); ++k) {
    const auto& a = spec.appliances[k];
    std::mt19937_64 rng(mix_seed(spec.seed, k));
    const auto values = bucket_average(activations(a, start - dt, start + static_cast<long>(n) * dt, rng), start, dt, n);
    MeterSeries s{spec.start, spec.delta_t, {}};
    s.values.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      s.values.emplace_back(values[i]);
      total[i] += values[i];
    }
    house.appliances.emplace(a.name, std::move(s));
  }
  const auto noise = noise_draws(spec);
  house.aggregate = {spec.start, spec.delta_t, {}};
  house.aggregate.values.reserve(n);
  for (std::size_t i = 0; i < n; ++i) house.aggregate.values.emplace_back(std::max(0.0, total[i] + noise[i]));
  return house;
}

double expected_mean_power(const ApplianceSpec& a) {
  const double day = static_cast<double>(kDay);
  switch (a.archetype) {
    case Archetype::always_on: return a.power;
    case Archetype::cyclic:
      return a.power * static_cast<double>(a.on_duration.count()) / static_cast<double>(a.period.count());
    case Archetype::scheduled:
      return a.power * a.probability * static_cast<double>(a.on_duration.count()) / day;
    case Archetype::weekly:
      return a.power * a.probability * static_cast<double>(a.on_duration.count()) *
             static_cast<double>(a.active_weekdays.size()) / (7.0 * day);
  }
  return 0.0;
}

void BenchmarkSpec::validate() const {
  if (houses == 0 || days == 0) throw ConfigError("benchmark needs at least one house and one day");
  if (max_gap.count() < 0) throw ConfigError("max_gap must be >= 0");
  HouseSpec probe{"probe", appliances, noise_std, start, Seconds{static_cast<long>(days) * kDay}, delta_t, tau_max, 0};
  probe.validate();
}

BenchmarkSpec standard_benchmark_spec() {
  using namespace std::chrono;
  BenchmarkSpec s;
  s.start = sys_days{2024y / January / 1};
  ApplianceSpec base;
  base.name = "base";
  base.power = 80.0;

  ApplianceSpec fridge;
  fridge.name = "fridge";
  fridge.archetype = Archetype::cyclic;
  fridge.power = 100.0;
  fridge.period = Seconds{3600};
  fridge.on_duration = Seconds{1200};
  fridge.duration_jitter = Seconds{120};

  ApplianceSpec heater;
  heater.name = "water-heater";
  heater.archetype = Archetype::scheduled;
  heater.power = 2000.0;
  heater.on_duration = Seconds{2 * 3600};
  heater.duration_jitter = Seconds{1800};
  heater.window_start_hour = 22;
  heater.window_end_hour = 2;
  heater.probability = 0.9;

  ApplianceSpec ev;
  ev.name = "ev";
  ev.archetype = Archetype::weekly;
  ev.power = 3500.0;
  ev.on_duration = Seconds{3 * 3600};
  ev.window_start_hour = 8;
  ev.window_end_hour = 20;
  ev.probability = 0.6;
  ev.active_weekdays = {5, 6};

  s.appliances = {base, fridge, heater, ev};
  return s;
}

std::vector<HouseSpec> house_specs(const BenchmarkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<HouseSpec> out;
  for (std::size_t h = 0; h < spec.houses; ++h) {
    char id[32];
    std::snprintf(id, sizeof(id), "house_%02zu", h);
    out.push_back({id, spec.appliances, spec.noise_std, spec.start, Seconds{static_cast<long>(spec.days) * kDay},
                   spec.delta_t, spec.tau_max, mix_seed(seed, 1000 + h)});
  }
  return out;
}

std::vector<House> generate_benchmark(const BenchmarkSpec& spec, std::uint64_t seed) {
  std::vector<House> out;
  for (const auto& hs : house_specs(spec, seed)) out.push_back(generate_house(hs));
  return out;
}

std::vector<House> standard_benchmark(std::uint64_t seed) { return generate_benchmark(standard_benchmark_spec(), seed); }

void to_json(nlohmann::json& j, const ApplianceSpec& a) {
  j = {{"name", a.name},
       {"archetype", archetype_name(a.archetype)},
       {"power", a.power},
       {"period_s", a.period.count()},
       {"on_duration_s", a.on_duration.count()},
       {"window_start_hour", a.window_start_hour},
       {"window_end_hour", a.window_end_hour},
       {"probability", a.probability},
       {"active_weekdays", a.active_weekdays},
       {"duration_jitter_s", a.duration_jitter.count()},
       {"power_jitter", a.power_jitter}};
}

void from_json(const nlohmann::json& j, ApplianceSpec& a) {
  static const std::vector<std::string> known{"name", "archetype", "power", "period_s", "on_duration_s",
                                              "window_start_hour", "window_end_hour", "probability",
                                              "active_weekdays", "duration_jitter_s", "power_jitter"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown appliance key '" + key + "'");
  a = ApplianceSpec{};
  a.name = j.at("name").get<std::string>();
  a.archetype = parse_archetype(j.at("archetype").get<std::string>());
  a.power = j.at("power").get<double>();
  a.period = Seconds{j.value("period_s", 3600L)};
  a.on_duration = Seconds{j.value("on_duration_s", 1200L)};
  a.window_start_hour = j.value("window_start_hour", 0);
  a.window_end_hour = j.value("window_end_hour", 24);
  a.probability = j.value("probability", 1.0);
  a.active_weekdays = j.value("active_weekdays", std::vector<int>{});
  a.duration_jitter = Seconds{j.value("duration_jitter_s", 0L)};
  a.power_jitter = j.value("power_jitter", 0.0);
}

void to_json(nlohmann::json& j, const BenchmarkSpec& s) {
  j = {{"houses", s.houses},         {"days", s.days},         {"delta_t_s", s.delta_t.count()},
       {"start", format_utc(s.start)}, {"noise_std", s.noise_std}, {"tau_max", s.tau_max},
       {"max_gap_s", s.max_gap.count()}, {"appliances", s.appliances}};
}

void from_json(const nlohmann::json& j, BenchmarkSpec& s) {
  static const std::vector<std::string> known{"houses", "days", "delta_t_s", "start", "noise_std",
                                              "tau_max", "max_gap_s", "appliances"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown benchmark key '" + key + "'");
  const BenchmarkSpec d = standard_benchmark_spec();
  s.houses = j.value("houses", d.houses);
  s.days = j.value("days", d.days);
  s.delta_t = Seconds{j.value("delta_t_s", d.delta_t.count())};
  s.start = j.contains("start") ? parse_utc(j.at("start").get<std::string>()) : d.start;
  s.noise_std = j.value("noise_std", d.noise_std);
  s.tau_max = j.value("tau_max", d.tau_max);
  s.max_gap = Seconds{j.value("max_gap_s", d.max_gap.count())};
  s.appliances = j.contains("appliances") ? j.at("appliances").get<std::vector<ApplianceSpec>>() : d.appliances;
}

}  // namespace nilm
