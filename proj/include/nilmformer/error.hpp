// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nilm {

// Bad user input: malformed files, inconsistent configuration, shape mismatch
// between configured layers.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A caller broke an operation's precondition.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

#define NILM_EXPECT(cond, msg)                       \
  do {                                               \
    if (!(cond)) throw ::nilm::ContractError(msg);   \
  } while (0)

}  // namespace nilm
