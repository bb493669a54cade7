#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace treereg {

// Violated precondition or type invariant.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value produced by numeric code.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed external input (CSV cells, labels, config files).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Warnings go to stderr; kept as a function so tests can count emissions.
void warn(const std::string& msg);
std::uint64_t warn_count();

}  // namespace treereg
