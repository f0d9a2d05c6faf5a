// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic households: x(t) = sum_i a_i(t) + noise(t).
//
// Appliances are described by on-intervals in continuous time; each grid
// sample t holds the exact average power over (t - delta_t, t], the same
// convention the resampler uses.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "nilmformer/dataio.hpp"

namespace nilm {

enum class Archetype { always_on, cyclic, scheduled, weekly };

struct ApplianceSpec {
  std::string name;
  Archetype archetype = Archetype::always_on;
  double power = 0.0;  // watts while on

  // cyclic: on for on_duration at the start of every period, random phase
  Seconds period{3600};
  Seconds on_duration{1200};

  // scheduled / weekly: at most one activation per day, starting inside
  // [window_start_hour, window_end_hour) and finishing before the window
  // closes; the window wraps midnight when end <= start.
  int window_start_hour = 0;
  int window_end_hour = 24;
  double probability = 1.0;
  std::vector<int> active_weekdays;  // weekly only, Monday = 0

  // each activation's duration is on_duration + U(-duration_jitter, +duration_jitter)
  Seconds duration_jitter{0};
  // each activation's power is power * (1 + U(-power_jitter, +power_jitter))
  double power_jitter = 0.0;

  void validate() const;
};

struct HouseSpec {
  std::string id;
  std::vector<ApplianceSpec> appliances;
  double noise_std = 0.0;
  Instant start{};
  Seconds duration{0};
  Seconds delta_t{900};
  double tau_max = 6000.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Aggregate = max(0, sum of appliance channels + N(0, noise_std^2)).
// Deterministic given the spec (including its seed).
House generate_house(const HouseSpec& spec);

// The gaussian draws generate_house adds for this spec, before truncation.
std::vector<double> noise_draws(const HouseSpec& spec);

// Recipe for a set of houses sharing one appliance template.
struct BenchmarkSpec {
  std::size_t houses = 20;
  std::size_t days = 60;
  Seconds delta_t{900};
  Instant start{};
  double noise_std = 20.0;
  double tau_max = 6000.0;
  Seconds max_gap{3600};
  std::vector<ApplianceSpec> appliances;

  void validate() const;
};

// 20 houses, 60 days from 2024-01-01 at 15 min: base 80 W always-on, fridge
// 100 W cycling 20 min on / 40 min off, water-heater 2000 W scheduled in
// 22:00-02:00 with p = 0.9, EV 3500 W in 3 h weekend blocks; noise 20 W.
BenchmarkSpec standard_benchmark_spec();

// Per-house seeds derive from `seed` and the house index.
std::vector<HouseSpec> house_specs(const BenchmarkSpec& spec, std::uint64_t seed);
std::vector<House> generate_benchmark(const BenchmarkSpec& spec, std::uint64_t seed);
std::vector<House> standard_benchmark(std::uint64_t seed);

// Long-run mean power of one appliance implied by its parameters, in watts.
double expected_mean_power(const ApplianceSpec& a);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

void to_json(nlohmann::json& j, const ApplianceSpec& a);
void from_json(const nlohmann::json& j, ApplianceSpec& a);
void to_json(nlohmann::json& j, const BenchmarkSpec& s);
void from_json(const nlohmann::json& j, BenchmarkSpec& s);

}  // namespace nilm
