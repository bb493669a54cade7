#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "treereg/matrix.hpp"

namespace treereg {

enum class SplitTag : int { train = 0, valid = 1, test = 2 };

struct Sequence {
  std::string id;
  Matrix x;  // T x F
  Matrix y;  // T x L, entries 0/1
};

// Ordered collection of sequences with shared feature/label columns.
// Static tasks are sequences of length 1.
struct SequenceDataset {
  std::vector<Sequence> sequences;
  std::vector<std::string> feature_names;
  std::vector<std::string> label_names;
  std::vector<int> split_tag;  // parallel to sequences, values of SplitTag

  int n_features() const { return static_cast<int>(feature_names.size()); }
  int n_labels() const { return static_cast<int>(label_names.size()); }
  std::int64_t total_timesteps() const;
  std::vector<int> indices_of(SplitTag tag) const;

  // Shapes consistent, labels binary, split tags in range.
  void validate() const;
};

// 2-D points, uniform on the unit square, labeled by whether x1 clears the
// parabola 5*(x0-0.5)^2 + 0.4; labels within vertical distance 0.2 of the
// boundary (inclusive) flip with probability flip_rate.
SequenceDataset gen_parabola(int n, double flip_rate, std::uint64_t seed);

inline constexpr int kSignalStates = 5;
inline constexpr int kSignalFeatures = 7;
extern const std::array<std::array<double, kSignalFeatures>, kSignalStates> kSignalEmission;
extern const std::array<std::array<double, kSignalStates>, kSignalStates> kSignalTransition;
extern const std::array<std::array<double, kSignalFeatures>, kSignalStates> kNoiseEmission;
extern const std::array<std::array<double, kSignalStates>, kSignalStates> kNoiseTransition;

struct SignalNoiseTrace {
  SequenceDataset data;
  std::vector<std::vector<int>> signal_states;  // per sequence, length T
  std::vector<std::vector<int>> noise_states;
};

// Two independent 5-state chains (uniform initial distribution) emit 7 binary
// features each; dims 0-6 come from the signal chain, 7-13 from the noise
// chain. y_t = 1 iff the signal chain is in state 0 and x_t[0] == 1.
SignalNoiseTrace gen_signal_noise_traced(int n_seqs, int t_len, std::uint64_t seed);
SequenceDataset gen_signal_noise(int n_seqs, int t_len, std::uint64_t seed);

// Seeded shuffle of sequences, then contiguous assignment by floor(frac * n)
// with any remainder going to train. Fractions must sum to 1.
void assign_splits(SequenceDataset& data, double train_frac, double valid_frac, double test_frac,
                   std::uint64_t seed);

struct ZscoreStats {
  std::vector<double> mean, stdev;
  std::vector<bool> scaled;  // false for constant features, left untouched
};

// Standardizes features in place using train-split statistics.
ZscoreStats zscore(SequenceDataset& data);

// CSV schema: header `seq_id,t,x_<name>...,y_<name>...[,split]`; rows grouped
// by seq_id with t ascending. Labels must be 0/1.
SequenceDataset ingest_csv(const std::string& path);
std::string dataset_to_csv(const SequenceDataset& data, bool include_split = true);
void write_dataset_csv(const SequenceDataset& data, const std::string& path,
                       bool include_split = true);

// Per-timestep rows with a lag window: columns are x_t, x_{t-1}, ...,
// x_{t-window+1} (zero-padded before the sequence start).
struct FlatRows {
  Matrix x;  // rows x (F * window)
  Matrix y;  // rows x L
  std::vector<std::pair<int, int>> origin;  // (sequence index, t)
};
FlatRows flatten(const SequenceDataset& data, SplitTag tag, int window);
FlatRows flatten_indices(const SequenceDataset& data, const std::vector<int>& seq_indices,
                         int window);

}  // namespace treereg
