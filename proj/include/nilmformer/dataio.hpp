// SPDX-License-Identifier: Apache-2.0
#pragma once

// Smart-meter ingestion: raw readings -> regular grid -> gap filling ->
// clipping/scaling -> tumbling windows with calendar covariates.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nilmformer/container.hpp"
#include "nilmformer/tensor.hpp"
#include "nilmformer/timerpe.hpp"
#include "nilmformer/timeutil.hpp"

namespace nilm {

struct RawReading {
  Instant timestamp;
  double watts;  // average power over the preceding interval
};

// Regular grid start + i*delta_t. Missing samples are std::nullopt.
struct MeterSeries {
  Instant start{};
  Seconds delta_t{0};
  std::vector<std::optional<double>> values;

  std::size_t size() const { return values.size(); }
  Instant time_at(std::size_t i) const { return start + delta_t * static_cast<long>(i); }
  std::size_t missing_count() const;
};

struct House {
  std::string id;
  MeterSeries aggregate;
  std::map<std::string, MeterSeries> appliances;
  double tau_max = 1.0;

  // Contract violation unless every channel shares start, delta_t and length.
  void validate() const;
};

struct WindowProvenance {
  std::string house_id;
  std::size_t start_index = 0;
  Instant start_time{};
};

struct WindowBatch {
  Tensor windows;  // [b x 1 x w], scaled to [0, 1]
  Tensor targets;  // [b x 1 x w], scaled to [0, 1]
  std::vector<CovariateWindow> covariates;
  std::vector<WindowProvenance> provenance;

  std::size_t size() const { return provenance.size(); }
  std::size_t window_length() const { return empty() ? 0 : windows.dim(2); }
  bool empty() const { return provenance.empty(); }

  // Rows `indices` in the given order.
  WindowBatch select(std::span<const std::size_t> indices) const;
  static WindowBatch concat(std::span<const WindowBatch> parts);
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
};

// Grid anchored at multiples of delta_t since the Unix epoch; each grid point
// t averages the readings in (t - delta_t, t]. Empty buckets are missing.
MeterSeries resample(std::span<const RawReading> readings, Seconds delta_t);
// Same, on an explicit grid.
MeterSeries resample(std::span<const RawReading> readings, Seconds delta_t, Instant grid_start, std::size_t length);

// Fills each run of missing samples that follows an observed value with that
// value iff run_length * delta_t <= max_gap. Leading gaps stay missing.
MeterSeries forward_fill(const MeterSeries& series, Seconds max_gap);

// v -> min(max(v, 0), tau_max) / tau_max; missing stays missing.
MeterSeries clip_scale(const MeterSeries& series, double tau_max);

// forward_fill + clip_scale on every channel.
House preprocess(const House& raw, Seconds max_gap);

// Tumbling windows of length w over the aggregate and one appliance. Windows
// with a missing sample in either channel and the trailing partial window are
// dropped.
WindowBatch make_windows(const House& house, const std::string& appliance, std::size_t w);

// Seeded shuffle of the ids, then train/validation/test by count.
DatasetSplit split_houses(std::vector<std::string> house_ids, std::uint64_t seed, SplitCounts counts);
// Fractions for validation and test are rounded; train takes the rest.
DatasetSplit split_houses(std::vector<std::string> house_ids, std::uint64_t seed, double validation_fraction,
                          double test_fraction);

// ---- files ----------------------------------------------------------------

// Delimited readings: header "timestamp,channel,watts", ISO-8601 UTC times.
std::map<std::string, std::vector<RawReading>> read_readings(const std::filesystem::path& path);
void write_readings(const std::filesystem::path& path, const House& house);

enum class ChannelRole { aggregate, appliance };

struct HouseManifest {
  std::string house_id;
  std::filesystem::path readings;  // relative paths resolve against the manifest
  Seconds delta_t{0};
  Seconds max_gap{0};
  double tau_max = 0.0;
  std::map<std::string, ChannelRole> channels;
};

HouseManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const HouseManifest& manifest);

// Reads a manifest and its readings, resamples every channel onto one shared
// grid. Values are raw watts.
House load_house(const std::filesystem::path& manifest_path);
// Every *.json manifest in a directory, sorted by house id.
std::vector<std::filesystem::path> find_manifests(const std::filesystem::path& dir);

void write_windows(const std::filesystem::path& path, const WindowBatch& batch);
WindowBatch read_windows(const std::filesystem::path& path);
ArrayFile windows_to_arrays(const WindowBatch& batch);
WindowBatch windows_from_arrays(const ArrayFile& file);

}  // namespace nilm
