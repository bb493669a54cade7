#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "treereg/common.hpp"

namespace treereg {

// Dense row-major table of doubles; the exchange format between the data
// module, the tree code, and model prediction outputs.
struct Matrix {
  std::vector<double> data;
  int rows = 0;
  int cols = 0;

  Matrix() = default;
  Matrix(int r, int c) : data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0),
                         rows(r), cols(c) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols,
                                         static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
};

}  // namespace treereg
