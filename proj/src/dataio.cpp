// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "nilmformer/error.hpp"

namespace nilm {

namespace {

using std::chrono::ceil;
using std::chrono::duration_cast;

// Smallest grid index i with start + i*dt >= t.
long ceil_index(Instant t, Instant start, Seconds dt) {
  const long off = (t - start).count();
  const long step = dt.count();
  return off >= 0 ? (off + step - 1) / step : -((-off) / step);
}

Instant grid_ceil(Instant t, Seconds dt) {
  return Instant{} + dt * ceil_index(t, Instant{}, dt);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
    std::size_t s = 0;
    while (s < field.size() && field[s] == ' ') ++s;
    out.push_back(field.substr(s));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError(where + ": invalid number '" + s + "'");
  return v;
}

}  // namespace

std::size_t MeterSeries::missing_count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::nullopt));
}

void House::validate() const {
  for (const auto& [name, ch] : appliances)
    NILM_EXPECT(ch.start == aggregate.start && ch.delta_t == aggregate.delta_t && ch.size() == aggregate.size(),
                "house " + id + ": channel '" + name + "' is not on the aggregate grid");
}

WindowBatch WindowBatch::select(std::span<const std::size_t> indices) const {
  WindowBatch out;
  if (indices.empty()) return out;
  const std::size_t w = window_length();
  out.windows = Tensor({indices.size(), 1, w});
  out.targets = Tensor({indices.size(), 1, w});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    NILM_EXPECT(i < size(), "window index out of range");
    std::copy_n(windows.data() + i * w, w, out.windows.data() + k * w);
    std::copy_n(targets.data() + i * w, w, out.targets.data() + k * w);
    out.covariates.push_back(covariates[i]);
    out.provenance.push_back(provenance[i]);
  }
  return out;
}

WindowBatch WindowBatch::concat(std::span<const WindowBatch> parts) {
  WindowBatch out;
  std::size_t total = 0, w = 0;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    NILM_EXPECT(w == 0 || p.window_length() == w, "window batches differ in window length");
    w = p.window_length();
    total += p.size();
  }
  if (total == 0) return out;
  out.windows = Tensor({total, 1, w});
  out.targets = Tensor({total, 1, w});
  std::size_t k = 0;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    std::copy_n(p.windows.data(), p.size() * w, out.windows.data() + k * w);
    std::copy_n(p.targets.data(), p.size() * w, out.targets.data() + k * w);
    out.covariates.insert(out.covariates.end(), p.covariates.begin(), p.covariates.end());
    out.provenance.insert(out.provenance.end(), p.provenance.begin(), p.provenance.end());
    k += p.size();
  }
  return out;
}

MeterSeries resample(std::span<const RawReading> readings, Seconds delta_t) {
  NILM_EXPECT(delta_t.count() > 0, "resample: delta_t must be positive");
  if (readings.empty()) return {Instant{}, delta_t, {}};
  const Instant start = grid_ceil(readings.front().timestamp, delta_t);
  const Instant end = grid_ceil(readings.back().timestamp, delta_t);
  const auto length = static_cast<std::size_t>((end - start) / delta_t) + 1;
  return resample(readings, delta_t, start, length);
}

MeterSeries resample(std::span<const RawReading> readings, Seconds delta_t, Instant grid_start, std::size_t length) {
  NILM_EXPECT(delta_t.count() > 0, "resample: delta_t must be positive");
  std::vector<double> sums(length, 0.0);
  std::vector<std::size_t> counts(length, 0);
  for (std::size_t i = 0; i < readings.size(); ++i) {
    NILM_EXPECT(i == 0 || readings[i].timestamp > readings[i - 1].timestamp,
                "resample: reading timestamps must be strictly increasing");
    const long idx = ceil_index(readings[i].timestamp, grid_start, delta_t);
    if (idx < 0 || idx >= static_cast<long>(length)) continue;
    sums[idx] += readings[i].watts;
    ++counts[idx];
  }
  MeterSeries out{grid_start, delta_t, std::vector<std::optional<double>>(length)};
  for (std::size_t i = 0; i < length; ++i)
    if (counts[i] > 0) out.values[i] = sums[i] / static_cast<double>(counts[i]);
  return out;
}

MeterSeries forward_fill(const MeterSeries& series, Seconds max_gap) {
  MeterSeries out = series;
  const std::size_t n = series.size();
  std::size_t i = 0;
  while (i < n && !series.values[i]) ++i;  // leading gap stays
  while (i < n) {
    if (series.values[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && !series.values[j]) ++j;
    if (series.delta_t * static_cast<long>(j - i) <= max_gap)
      std::fill(out.values.begin() + static_cast<long>(i), out.values.begin() + static_cast<long>(j),
                series.values[i - 1]);
    i = j;
  }
  return out;
}

MeterSeries clip_scale(const MeterSeries& series, double tau_max) {
  NILM_EXPECT(tau_max > 0.0, "clip_scale: tau_max must be positive");
  MeterSeries out = series;
  for (auto& v : out.values)
    if (v) v = std::clamp(*v, 0.0, tau_max) / tau_max;
  return out;
}

House preprocess(const House& raw, Seconds max_gap) {
  raw.validate();
  House out;
  out.id = raw.id;
  out.tau_max = raw.tau_max;
  out.aggregate = clip_scale(forward_fill(raw.aggregate, max_gap), raw.tau_max);
  for (const auto& [name, ch] : raw.appliances)
    out.appliances.emplace(name, clip_scale(forward_fill(ch, max_gap), raw.tau_max));
  return out;
}

WindowBatch make_windows(const House& house, const std::string& appliance, std::size_t w) {
  NILM_EXPECT(w > 0, "make_windows: window length must be positive");
  house.validate();
  auto it = house.appliances.find(appliance);
  if (it == house.appliances.end()) throw ConfigError("house " + house.id + " has no appliance '" + appliance + "'");
  const MeterSeries& agg = house.aggregate;
  const MeterSeries& tgt = it->second;
  const std::size_t count = agg.size() / w;
  std::vector<std::size_t> starts;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t s = k * w;
    bool complete = true;
    for (std::size_t i = s; i < s + w && complete; ++i) complete = agg.values[i] && tgt.values[i];
    if (complete) starts.push_back(s);
  }
  WindowBatch out;
  if (starts.empty()) return out;
  out.windows = Tensor({starts.size(), 1, w});
  out.targets = Tensor({starts.size(), 1, w});
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const std::size_t s = starts[k];
    for (std::size_t i = 0; i < w; ++i) {
      out.windows[k * w + i] = *agg.values[s + i];
      out.targets[k * w + i] = *tgt.values[s + i];
    }
    out.covariates.push_back(covariates_for_grid(agg.time_at(s), agg.delta_t, w));
    out.provenance.push_back({house.id, s, agg.time_at(s)});
  }
  return out;
}

DatasetSplit split_houses(std::vector<std::string> house_ids, std::uint64_t seed, SplitCounts counts) {
  if (counts.train + counts.validation + counts.test > house_ids.size())
    throw ConfigError("split asks for " + std::to_string(counts.train + counts.validation + counts.test) +
                      " houses but only " + std::to_string(house_ids.size()) + " exist");
  std::sort(house_ids.begin(), house_ids.end());
  if (std::adjacent_find(house_ids.begin(), house_ids.end()) != house_ids.end())
    throw ConfigError("duplicate house id in split");
  std::mt19937_64 rng(seed);
  // Fisher-Yates with a portable index draw.
  for (std::size_t i = house_ids.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(house_ids[i - 1], house_ids[j]);
  }
  DatasetSplit split;
  auto it = house_ids.begin();
  split.test.assign(it, it + static_cast<long>(counts.test));
  it += static_cast<long>(counts.test);
  split.validation.assign(it, it + static_cast<long>(counts.validation));
  it += static_cast<long>(counts.validation);
  split.train.assign(it, it + static_cast<long>(counts.train));
  return split;
}

DatasetSplit split_houses(std::vector<std::string> house_ids, std::uint64_t seed, double validation_fraction,
                          double test_fraction) {
  if (validation_fraction < 0 || test_fraction < 0 || validation_fraction + test_fraction >= 1.0)
    throw ConfigError("split fractions must be nonnegative and sum below 1");
  const auto n = static_cast<double>(house_ids.size());
  SplitCounts c;
  c.validation = static_cast<std::size_t>(std::lround(validation_fraction * n));
  c.test = static_cast<std::size_t>(std::lround(test_fraction * n));
  c.train = house_ids.size() - std::min(house_ids.size(), c.validation + c.test);
  return split_houses(std::move(house_ids), seed, c);
}

std::map<std::string, std::vector<RawReading>> read_readings(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open readings file " + path.string());
  std::map<std::string, std::vector<RawReading>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    if (lineno == 1 && !f.empty() && f[0] == "timestamp") continue;
    if (f.size() != 3) throw ConfigError(where + ": expected timestamp,channel,watts");
    const double watts = parse_double(f[2], where);
    if (!std::isfinite(watts) || watts < 0.0) throw ConfigError(where + ": watts must be finite and nonnegative");
    auto& ch = out[f[1]];
    const Instant t = parse_utc(f[0]);
    if (!ch.empty() && t <= ch.back().timestamp)
      throw ConfigError(where + ": timestamps must be strictly increasing within channel '" + f[1] + "'");
    ch.push_back({t, watts});
  }
  return out;
}

void write_readings(const std::filesystem::path& path, const House& house) {
  house.validate();
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open " + path.string() + " for writing");
  os << "timestamp,channel,watts\n";
  for (std::size_t i = 0; i < house.aggregate.size(); ++i) {
    const std::string ts = format_utc(house.aggregate.time_at(i));
    if (house.aggregate.values[i]) os << ts << ",aggregate," << format_double(*house.aggregate.values[i]) << '\n';
    for (const auto& [name, ch] : house.appliances)
      if (ch.values[i]) os << ts << ',' << name << ',' << format_double(*ch.values[i]) << '\n';
  }
}

HouseManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
    HouseManifest m;
    for (const auto& [key, _] : j.items())
      if (key != "house_id" && key != "readings" && key != "delta_t_s" && key != "max_gap_s" && key != "tau_max" &&
          key != "channels")
        throw ConfigError(path.string() + ": unknown manifest key '" + key + "'");
    m.house_id = j.at("house_id").get<std::string>();
    m.readings = j.at("readings").get<std::string>();
    if (m.readings.is_relative()) m.readings = path.parent_path() / m.readings;
    m.delta_t = Seconds{j.at("delta_t_s").get<long>()};
    m.max_gap = Seconds{j.value("max_gap_s", 0L)};
    m.tau_max = j.at("tau_max").get<double>();
    std::size_t aggregates = 0;
    for (const auto& [name, role] : j.at("channels").items()) {
      const auto r = role.get<std::string>();
      if (r == "aggregate") {
        m.channels[name] = ChannelRole::aggregate;
        ++aggregates;
      } else if (r == "appliance") {
        m.channels[name] = ChannelRole::appliance;
      } else {
        throw ConfigError(path.string() + ": channel '" + name + "' has unknown role '" + r + "'");
      }
    }
    if (aggregates != 1) throw ConfigError(path.string() + ": exactly one aggregate channel is required");
    if (m.delta_t.count() <= 0 || m.max_gap.count() < 0 || !(m.tau_max > 0))
      throw ConfigError(path.string() + ": delta_t_s and tau_max must be positive, max_gap_s nonnegative");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_manifest(const std::filesystem::path& path, const HouseManifest& m) {
  nlohmann::json j;
  j["house_id"] = m.house_id;
  j["readings"] = m.readings.string();
  j["delta_t_s"] = m.delta_t.count();
  j["max_gap_s"] = m.max_gap.count();
  j["tau_max"] = m.tau_max;
  j["channels"] = nlohmann::json::object();
  for (const auto& [name, role] : m.channels) j["channels"][name] = role == ChannelRole::aggregate ? "aggregate" : "appliance";
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

House load_house(const std::filesystem::path& manifest_path) {
  const HouseManifest m = read_manifest(manifest_path);
  const auto readings = read_readings(m.readings);
  for (const auto& [name, _] : readings)
    if (!m.channels.contains(name))
      throw ConfigError(m.readings.string() + ": channel '" + name + "' is not declared in the manifest");
  bool any = false;
  Instant first{}, last{};
  for (const auto& [name, rs] : readings) {
    if (rs.empty()) continue;
    const Instant a = grid_ceil(rs.front().timestamp, m.delta_t);
    const Instant b = grid_ceil(rs.back().timestamp, m.delta_t);
    first = any ? std::min(first, a) : a;
    last = any ? std::max(last, b) : b;
    any = true;
  }
  if (!any) throw ConfigError(m.readings.string() + ": no readings");
  const auto length = static_cast<std::size_t>((last - first) / m.delta_t) + 1;
  House house;
  house.id = m.house_id;
  house.tau_max = m.tau_max;
  for (const auto& [name, role] : m.channels) {
    auto it = readings.find(name);
    const std::span<const RawReading> rs =
        it == readings.end() ? std::span<const RawReading>{} : std::span<const RawReading>(it->second);
    MeterSeries s = resample(rs, m.delta_t, first, length);
    if (role == ChannelRole::aggregate) house.aggregate = std::move(s);
    else house.appliances.emplace(name, std::move(s));
  }
  return house;
}

std::vector<std::filesystem::path> find_manifests(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json") out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ConfigError("no house manifests (*.json) in " + dir.string());
  return out;
}

ArrayFile windows_to_arrays(const WindowBatch& batch) {
  ArrayFile f;
  f.meta["format"] = "nilmformer-windows";
  f.meta["count"] = batch.size();
  std::vector<std::string> ids;
  for (const auto& p : batch.provenance) ids.push_back(p.house_id);
  f.meta["house_ids"] = ids;
  if (batch.empty()) return f;
  const std::size_t b = batch.size(), w = batch.window_length();
  f.arrays.emplace("windows", batch.windows);
  f.arrays.emplace("targets", batch.targets);
  Tensor cov({b, 4, w});
  Tensor start_index({b}), start_time({b});
  for (std::size_t k = 0; k < b; ++k) {
    const auto vals = batch.covariates[k].values();
    std::copy(vals.begin(), vals.end(), cov.data() + k * 4 * w);
    start_index[k] = static_cast<double>(batch.provenance[k].start_index);
    start_time[k] = static_cast<double>(batch.provenance[k].start_time.time_since_epoch().count());
  }
  f.arrays.emplace("covariates", std::move(cov));
  f.arrays.emplace("start_index", std::move(start_index));
  f.arrays.emplace("start_time", std::move(start_time));
  return f;
}

WindowBatch windows_from_arrays(const ArrayFile& f) {
  if (f.meta.value("format", "") != "nilmformer-windows") throw ConfigError("container does not hold windows");
  WindowBatch batch;
  const auto count = f.meta.at("count").get<std::size_t>();
  if (count == 0) return batch;
  const auto ids = f.meta.at("house_ids").get<std::vector<std::string>>();
  batch.windows = f.arrays.at("windows");
  batch.targets = f.arrays.at("targets");
  const Tensor& cov = f.arrays.at("covariates");
  const std::size_t w = batch.windows.dim(2);
  if (ids.size() != count || batch.windows.dim(0) != count || cov.dim(0) != count)
    throw ConfigError("window container is inconsistent");
  for (std::size_t k = 0; k < count; ++k) {
    CovariateWindow c(w);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t i = 0; i < w; ++i) c.at(static_cast<Covariate>(r), i) = static_cast<int>(cov.at({k, r, i}));
    batch.covariates.push_back(std::move(c));
    batch.provenance.push_back({ids[k], static_cast<std::size_t>(f.arrays.at("start_index")[k]),
                                Instant{Seconds{static_cast<long>(f.arrays.at("start_time")[k])}}});
  }
  return batch;
}

void write_windows(const std::filesystem::path& path, const WindowBatch& batch) {
  write_arrays(path, windows_to_arrays(batch));
}

WindowBatch read_windows(const std::filesystem::path& path) { return windows_from_arrays(read_arrays(path)); }

}  // namespace nilm
