// SPDX-License-Identifier: Apache-2.0
#pragma once

// Named-array container. Byte layout (see docs/FORMAT.md):
//
//   [0, 8)        magic "NILMARR1"
//   [8, 16)       u64 little-endian: manifest length L in bytes
//   [16, 16+L)    manifest, UTF-8 JSON:
//                   {"arrays":[{"name":..,"offset":..,"shape":[..]}, ..],
//                    "meta":{..}, "version":1}
//                 offset counts float64 elements from the payload start
//   [16+L, end)   payload: IEEE-754 binary64, little-endian, row-major
//
// Arrays are written in name order and the manifest is emitted with sorted
// keys, so equal inputs give byte-identical files.

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "nilmformer/tensor.hpp"

namespace nilm {

struct ArrayFile {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> arrays;
};

std::string encode_arrays(const ArrayFile& file);
ArrayFile decode_arrays(const std::string& bytes);

void write_arrays(const std::filesystem::path& path, const ArrayFile& file);
ArrayFile read_arrays(const std::filesystem::path& path);

}  // namespace nilm
