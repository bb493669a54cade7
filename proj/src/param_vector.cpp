#include "treereg/param_vector.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "treereg/common.hpp"
#include "treereg/io.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace treereg {

std::int64_t BlockSpec::size() const {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

ParamVector ParamVector::create(
    const std::vector<std::pair<std::string, std::vector<int>>>& block_defs) {
  ParamVector pv;
  std::int64_t offset = 0;
  for (const auto& [name, shape] : block_defs) {
    BlockSpec spec{name, shape, offset};
    if (spec.size() <= 0) throw ContractError("block " + name + " has non-positive size");
    offset += spec.size();
    pv.blocks.push_back(std::move(spec));
  }
  pv.values.assign(static_cast<std::size_t>(offset), 0.0);
  return pv;
}

bool ParamVector::has_block(std::string_view name) const {
  return std::any_of(blocks.begin(), blocks.end(),
                     [&](const BlockSpec& b) { return b.name == name; });
}

const BlockSpec& ParamVector::block_spec(std::string_view name) const {
  for (const auto& b : blocks)
    if (b.name == name) return b;
  throw ContractError("no block named '" + std::string(name) + "'");
}

std::span<double> ParamVector::block(std::string_view name) {
  const BlockSpec& b = block_spec(name);
  return {values.data() + b.offset, static_cast<std::size_t>(b.size())};
}

std::span<const double> ParamVector::block(std::string_view name) const {
  const BlockSpec& b = block_spec(name);
  return {values.data() + b.offset, static_cast<std::size_t>(b.size())};
}

void ParamVector::validate() const {
  std::int64_t expect = 0;
  for (const auto& b : blocks) {
    if (b.offset != expect)
      throw ContractError("block " + b.name + " offset " + std::to_string(b.offset) +
                          " leaves a gap or overlap (expected " + std::to_string(expect) + ")");
    if (b.size() <= 0) throw ContractError("block " + b.name + " has non-positive size");
    expect += b.size();
  }
  if (expect != size())
    throw ContractError("blocks cover " + std::to_string(expect) + " of " +
                        std::to_string(size()) + " values");
  for (double v : values)
    if (!std::isfinite(v)) throw ContractError("non-finite parameter value");
}

void ParamVector::save(const std::string& path_prefix, const nlohmann::json& meta) const {
  std::string raw(values.size() * sizeof(double), '\0');
  std::memcpy(raw.data(), values.data(), raw.size());
  atomic_write_file(path_prefix + ".bin", raw);

  nlohmann::json side;
  side["format"] = "param-vector-v1";
  side["count"] = size();
  side["blocks"] = nlohmann::json::array();
  for (const auto& b : blocks)
    side["blocks"].push_back({{"name", b.name}, {"shape", b.shape}, {"offset", b.offset}});
  if (!meta.is_null()) side["meta"] = meta;
  atomic_write_file(path_prefix + ".json", side.dump(2) + "\n");
}

void ParamVector::save(const std::string& path_prefix) const {
  save(path_prefix, nlohmann::json());
}

ParamVector ParamVector::load(const std::string& path_prefix, nlohmann::json* meta_out) {
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_file(path_prefix + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path_prefix + ".json: " + e.what());
  }
  if (side.value("format", "") != "param-vector-v1")
    throw DataError(path_prefix + ".json: unknown format");

  ParamVector pv;
  for (const auto& jb : side.at("blocks")) {
    BlockSpec b;
    b.name = jb.at("name").get<std::string>();
    b.shape = jb.at("shape").get<std::vector<int>>();
    b.offset = jb.at("offset").get<std::int64_t>();
    pv.blocks.push_back(std::move(b));
  }
  std::string raw = read_file(path_prefix + ".bin");
  std::int64_t count = side.at("count").get<std::int64_t>();
  if (raw.size() != static_cast<std::size_t>(count) * sizeof(double))
    throw DataError(path_prefix + ".bin: size mismatch with sidecar count");
  pv.values.resize(static_cast<std::size_t>(count));
  std::memcpy(pv.values.data(), raw.data(), raw.size());
  pv.validate();
  if (meta_out) *meta_out = side.value("meta", nlohmann::json());
  return pv;
}

}  // namespace treereg
