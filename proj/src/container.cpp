// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nilmformer/error.hpp"

namespace nilm {
namespace {

constexpr char kMagic[8] = {'N', 'I', 'L', 'M', 'A', 'R', 'R', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace

std::string encode_arrays(const ArrayFile& file) {
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["meta"] = file.meta;
  manifest["arrays"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : file.arrays) {
    manifest["arrays"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const std::string header = manifest.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, header.size());
  out += header;
  out.reserve(out.size() + offset * 8);
  for (const auto& [name, t] : file.arrays)
    for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

ArrayFile decode_arrays(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw ConfigError("not a named-array container (bad magic)");
  const std::uint64_t header_len = get_u64(bytes, 8);
  if (header_len > bytes.size() - 16) throw ConfigError("container manifest is truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("container manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("version", 0) != 1) throw ConfigError("unsupported container version");
  const std::size_t payload = 16 + header_len;
  const std::size_t payload_elems = (bytes.size() - payload) / 8;
  ArrayFile file;
  file.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = numel(shape);
    if (offset + n > payload_elems) throw ConfigError("array '" + name + "' runs past the payload");
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i)
      values[i] = std::bit_cast<double>(get_u64(bytes, payload + 8 * (offset + i)));
    file.arrays.emplace(name, Tensor(shape, std::move(values)));
  }
  return file;
}

void write_arrays(const std::filesystem::path& path, const ArrayFile& file) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_arrays(file);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ConfigError("failed writing " + path.string());
}

ArrayFile read_arrays(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_arrays(ss.str());
}

}  // namespace nilm
