#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace treereg {

struct BlockSpec {
  std::string name;
  std::vector<int> shape;
  std::int64_t offset = 0;

  std::int64_t size() const;
};

// Flat double vector with named, shaped, non-overlapping blocks covering the
// whole range. This is the unit the tape differentiates and Adam updates.
class ParamVector {
 public:
  std::vector<double> values;
  std::vector<BlockSpec> blocks;

  ParamVector() = default;

  // Zero-initialized vector from (name, shape) pairs laid out contiguously.
  static ParamVector create(
      const std::vector<std::pair<std::string, std::vector<int>>>& block_defs);

  std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }

  bool has_block(std::string_view name) const;
  const BlockSpec& block_spec(std::string_view name) const;
  std::span<double> block(std::string_view name);
  std::span<const double> block(std::string_view name) const;

  // Throws ContractError on overlap/gap/shape mismatch or non-finite values.
  void validate() const;

  // prefix.bin holds raw little-endian doubles, prefix.json the block layout
  // plus an optional caller payload (model architecture, seed, ...).
  void save(const std::string& path_prefix, const nlohmann::json& meta) const;
  void save(const std::string& path_prefix) const;
  static ParamVector load(const std::string& path_prefix, nlohmann::json* meta_out = nullptr);
};

}  // namespace treereg
