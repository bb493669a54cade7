#include "treereg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "treereg/common.hpp"
#include "treereg/io.hpp"
#include "treereg/rng.hpp"

namespace treereg {

namespace {

constexpr std::uint64_t kStreamMix = 0x9e3779b97f4a7c15ULL;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> numeric_names(int n) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) names.push_back(std::to_string(i));
  return names;
}

const char* split_name(int tag) {
  switch (static_cast<SplitTag>(tag)) {
    case SplitTag::train: return "train";
    case SplitTag::valid: return "valid";
    case SplitTag::test: return "test";
  }
  throw ContractError("unknown split tag " + std::to_string(tag));
}

}  // namespace

std::int64_t SequenceDataset::total_timesteps() const {
  std::int64_t total = 0;
  for (const auto& s : sequences) total += s.x.rows;
  return total;
}

std::vector<int> SequenceDataset::indices_of(SplitTag tag) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(sequences.size()); ++i)
    if (split_tag[static_cast<std::size_t>(i)] == static_cast<int>(tag)) out.push_back(i);
  return out;
}

void SequenceDataset::validate() const {
  if (split_tag.size() != sequences.size())
    throw ContractError("split_tag size does not match sequence count");
  const int f = n_features();
  const int l = n_labels();
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& s = sequences[i];
    if (s.x.cols != f)
      throw ContractError("sequence " + s.id + ": feature count " + std::to_string(s.x.cols) +
                          " != " + std::to_string(f));
    if (s.y.cols != l)
      throw ContractError("sequence " + s.id + ": label count " + std::to_string(s.y.cols) +
                          " != " + std::to_string(l));
    if (s.x.rows != s.y.rows)
      throw ContractError("sequence " + s.id + ": x has " + std::to_string(s.x.rows) +
                          " timesteps but y has " + std::to_string(s.y.rows));
    if (s.x.rows <= 0) throw ContractError("sequence " + s.id + " is empty");
    for (double v : s.y.data)
      if (v != 0.0 && v != 1.0)
        throw ContractError("sequence " + s.id + ": non-binary label " + fmt_double(v));
    const int tag = split_tag[i];
    if (tag < 0 || tag > 2)
      throw ContractError("sequence " + s.id + ": split tag " + std::to_string(tag) +
                          " out of range");
  }
}

SequenceDataset gen_parabola(int n, double flip_rate, std::uint64_t seed) {
  if (n <= 0) throw ContractError("gen_parabola: n must be positive");
  if (flip_rate < 0.0 || flip_rate > 1.0)
    throw ContractError("gen_parabola: flip_rate must be in [0, 1]");
  SequenceDataset data;
  data.feature_names = numeric_names(2);
  data.label_names = numeric_names(1);
  Rng rng(seed);
  data.sequences.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Sequence s;
    s.id = std::to_string(i);
    s.x = Matrix(1, 2);
    s.y = Matrix(1, 1);
    const double x0 = rng.uniform();
    const double x1 = rng.uniform();
    const double boundary = 5.0 * (x0 - 0.5) * (x0 - 0.5) + 0.4;
    double label = x1 >= boundary ? 1.0 : 0.0;
    // Noise only near the boundary; the flip decision is drawn just for those
    // points so flip_rate does not perturb the labels of far-away points.
    if (std::abs(x1 - boundary) <= 0.2 && rng.bernoulli(flip_rate)) label = 1.0 - label;
    s.x.at(0, 0) = x0;
    s.x.at(0, 1) = x1;
    s.y.at(0, 0) = label;
    data.sequences.push_back(std::move(s));
  }
  data.split_tag.assign(static_cast<std::size_t>(n), static_cast<int>(SplitTag::train));
  return data;
}

// Signal chain: each state emits the three common features plus one
// state-specific feature; transitions drift between neighbouring states.
const std::array<std::array<double, kSignalFeatures>, kSignalStates> kSignalEmission = {{
    {0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0},
    {0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0},
    {0.5, 0.5, 0.5, 0.0, 0.5, 0.0, 0.0},
    {0.5, 0.5, 0.5, 0.0, 0.0, 0.5, 0.0},
    {0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.5},
}};

const std::array<std::array<double, kSignalStates>, kSignalStates> kSignalTransition = {{
    {0.7, 0.3, 0.0, 0.0, 0.0},
    {0.5, 0.25, 0.25, 0.0, 0.0},
    {0.0, 0.25, 0.5, 0.25, 0.0},
    {0.0, 0.0, 0.25, 0.25, 0.5},
    {0.0, 0.0, 0.0, 0.5, 0.5},
}};

// Noise chain: a 0.5-emission diagonal band that shifts with the state; every
// transition is equally likely, so these features carry no usable structure.
const std::array<std::array<double, kSignalFeatures>, kSignalStates> kNoiseEmission = {{
    {0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0},
    {0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0},
    {0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0},
    {0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0},
    {0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5},
}};

const std::array<std::array<double, kSignalStates>, kSignalStates> kNoiseTransition = {{
    {0.2, 0.2, 0.2, 0.2, 0.2},
    {0.2, 0.2, 0.2, 0.2, 0.2},
    {0.2, 0.2, 0.2, 0.2, 0.2},
    {0.2, 0.2, 0.2, 0.2, 0.2},
    {0.2, 0.2, 0.2, 0.2, 0.2},
}};

SignalNoiseTrace gen_signal_noise_traced(int n_seqs, int t_len, std::uint64_t seed) {
  if (n_seqs <= 0 || t_len <= 0)
    throw ContractError("gen_signal_noise: n_seqs and t_len must be positive");
  SignalNoiseTrace trace;
  SequenceDataset& data = trace.data;
  data.feature_names = numeric_names(2 * kSignalFeatures);
  data.label_names = numeric_names(1);
  const std::array<double, kSignalStates> uniform_init = {0.2, 0.2, 0.2, 0.2, 0.2};
  Rng root(seed);
  for (int i = 0; i < n_seqs; ++i) {
    // Per-sequence stream: the first k sequences are identical for any n_seqs.
    Rng rng = root.derive(kStreamMix * static_cast<std::uint64_t>(i + 1));
    Sequence s;
    s.id = std::to_string(i);
    s.x = Matrix(t_len, 2 * kSignalFeatures);
    s.y = Matrix(t_len, 1);
    std::vector<int> sig_states(static_cast<std::size_t>(t_len));
    std::vector<int> noise_states(static_cast<std::size_t>(t_len));
    int sig = rng.categorical(uniform_init);
    int noise = rng.categorical(uniform_init);
    for (int t = 0; t < t_len; ++t) {
      if (t > 0) {
        sig = rng.categorical(kSignalTransition[static_cast<std::size_t>(sig)]);
        noise = rng.categorical(kNoiseTransition[static_cast<std::size_t>(noise)]);
      }
      sig_states[static_cast<std::size_t>(t)] = sig;
      noise_states[static_cast<std::size_t>(t)] = noise;
      for (int d = 0; d < kSignalFeatures; ++d)
        s.x.at(t, d) =
            rng.bernoulli(kSignalEmission[static_cast<std::size_t>(sig)][static_cast<std::size_t>(d)])
                ? 1.0
                : 0.0;
      for (int d = 0; d < kSignalFeatures; ++d)
        s.x.at(t, kSignalFeatures + d) =
            rng.bernoulli(
                kNoiseEmission[static_cast<std::size_t>(noise)][static_cast<std::size_t>(d)])
                ? 1.0
                : 0.0;
      s.y.at(t, 0) = (sig == 0 && s.x.at(t, 0) == 1.0) ? 1.0 : 0.0;
    }
    data.sequences.push_back(std::move(s));
    trace.signal_states.push_back(std::move(sig_states));
    trace.noise_states.push_back(std::move(noise_states));
  }
  data.split_tag.assign(static_cast<std::size_t>(n_seqs), static_cast<int>(SplitTag::train));
  return trace;
}

SequenceDataset gen_signal_noise(int n_seqs, int t_len, std::uint64_t seed) {
  return gen_signal_noise_traced(n_seqs, t_len, seed).data;
}

void assign_splits(SequenceDataset& data, double train_frac, double valid_frac, double test_frac,
                   std::uint64_t seed) {
  if (train_frac < 0.0 || valid_frac < 0.0 || test_frac < 0.0)
    throw ContractError("assign_splits: fractions must be non-negative");
  if (std::abs(train_frac + valid_frac + test_frac - 1.0) > 1e-9)
    throw ContractError("assign_splits: fractions must sum to 1");
  const int n = static_cast<int>(data.sequences.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<int>(order));
  int n_valid = static_cast<int>(std::floor(valid_frac * n));
  int n_test = static_cast<int>(std::floor(test_frac * n));
  int n_train = n - n_valid - n_test;  // floor(train_frac*n) plus the leftovers
  data.split_tag.assign(static_cast<std::size_t>(n), static_cast<int>(SplitTag::train));
  for (int pos = 0; pos < n; ++pos) {
    SplitTag tag = pos < n_train                ? SplitTag::train
                   : pos < n_train + n_valid    ? SplitTag::valid
                                                : SplitTag::test;
    data.split_tag[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] =
        static_cast<int>(tag);
  }
}

ZscoreStats zscore(SequenceDataset& data) {
  data.validate();
  const int f = data.n_features();
  std::vector<double> sum(static_cast<std::size_t>(f), 0.0);
  std::vector<double> sum_sq(static_cast<std::size_t>(f), 0.0);
  std::int64_t count = 0;
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    if (data.split_tag[i] != static_cast<int>(SplitTag::train)) continue;
    const Matrix& x = data.sequences[i].x;
    for (int t = 0; t < x.rows; ++t) {
      for (int d = 0; d < f; ++d) {
        const double v = x.at(t, d);
        sum[static_cast<std::size_t>(d)] += v;
        sum_sq[static_cast<std::size_t>(d)] += v * v;
      }
      ++count;
    }
  }
  if (count == 0) throw ContractError("zscore: no train-split timesteps to fit statistics on");
  ZscoreStats stats;
  stats.mean.resize(static_cast<std::size_t>(f));
  stats.stdev.resize(static_cast<std::size_t>(f));
  stats.scaled.resize(static_cast<std::size_t>(f));
  for (int d = 0; d < f; ++d) {
    const auto di = static_cast<std::size_t>(d);
    const double mean = sum[di] / static_cast<double>(count);
    const double var = std::max(0.0, sum_sq[di] / static_cast<double>(count) - mean * mean);
    const double sd = std::sqrt(var);
    stats.mean[di] = mean;
    stats.stdev[di] = sd;
    stats.scaled[di] = sd > 1e-12;
    if (!stats.scaled[di])
      warn("zscore: feature " + data.feature_names[di] + " is constant on train; left unscaled");
  }
  for (auto& s : data.sequences)
    for (int t = 0; t < s.x.rows; ++t)
      for (int d = 0; d < f; ++d) {
        const auto di = static_cast<std::size_t>(d);
        if (stats.scaled[di]) s.x.at(t, d) = (s.x.at(t, d) - stats.mean[di]) / stats.stdev[di];
      }
  return stats;
}

std::string dataset_to_csv(const SequenceDataset& data, bool include_split) {
  data.validate();
  std::ostringstream out;
  out << "seq_id,t";
  for (const auto& name : data.feature_names) out << ",x_" << name;
  for (const auto& name : data.label_names) out << ",y_" << name;
  if (include_split) out << ",split";
  out << '\n';
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    const Sequence& s = data.sequences[i];
    if (s.id.find_first_of(",\n\r") != std::string::npos)
      throw DataError("sequence id '" + s.id + "' contains a delimiter");
    for (int t = 0; t < s.x.rows; ++t) {
      out << s.id << ',' << t;
      for (int d = 0; d < s.x.cols; ++d) out << ',' << fmt_double(s.x.at(t, d));
      for (int d = 0; d < s.y.cols; ++d) out << ',' << (s.y.at(t, d) != 0.0 ? 1 : 0);
      if (include_split) out << ',' << split_name(data.split_tag[i]);
      out << '\n';
    }
  }
  return out.str();
}

void write_dataset_csv(const SequenceDataset& data, const std::string& path, bool include_split) {
  atomic_write_file(path, dataset_to_csv(data, include_split));
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    std::string cell = comma == std::string::npos ? line.substr(start)
                                                  : line.substr(start, comma - start);
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(std::move(cell));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return cells;
}

double parse_cell(const std::string& cell, int line_no, const std::string& col) {
  double v = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw DataError("line " + std::to_string(line_no) + ", column " + col +
                    ": cannot parse '" + cell + "' as a number");
  return v;
}

int parse_split_cell(const std::string& cell, int line_no) {
  if (cell == "train") return static_cast<int>(SplitTag::train);
  if (cell == "valid") return static_cast<int>(SplitTag::valid);
  if (cell == "test") return static_cast<int>(SplitTag::test);
  throw DataError("line " + std::to_string(line_no) + ", column split: unknown value '" + cell +
                  "'");
}

}  // namespace

SequenceDataset ingest_csv(const std::string& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  const std::vector<std::string> header = split_line(line);
  if (header.size() < 4 || header[0] != "seq_id" || header[1] != "t")
    throw DataError(path + ": header must start with seq_id,t and have feature/label columns");
  SequenceDataset data;
  std::size_t col = 2;
  while (col < header.size() && header[col].rfind("x_", 0) == 0) {
    data.feature_names.push_back(header[col].substr(2));
    ++col;
  }
  while (col < header.size() && header[col].rfind("y_", 0) == 0) {
    data.label_names.push_back(header[col].substr(2));
    ++col;
  }
  bool has_split = false;
  if (col < header.size() && header[col] == "split") {
    has_split = true;
    ++col;
  }
  if (col != header.size())
    throw DataError(path + ": unexpected header column '" + header[col] + "'");
  if (data.feature_names.empty() || data.label_names.empty())
    throw DataError(path + ": need at least one x_ and one y_ column");

  const std::size_t expect = header.size();
  const int f = data.n_features();
  const int l = data.n_labels();
  std::vector<std::vector<double>> x_rows, y_rows;
  std::string cur_id;
  int cur_tag = static_cast<int>(SplitTag::train);
  bool open = false;
  int line_no = 1;

  auto close_sequence = [&]() {
    Sequence s;
    s.id = cur_id;
    s.x = Matrix(static_cast<int>(x_rows.size()), f);
    s.y = Matrix(static_cast<int>(y_rows.size()), l);
    for (std::size_t t = 0; t < x_rows.size(); ++t) {
      std::copy(x_rows[t].begin(), x_rows[t].end(), s.x.row(static_cast<int>(t)).begin());
      std::copy(y_rows[t].begin(), y_rows[t].end(), s.y.row(static_cast<int>(t)).begin());
    }
    data.sequences.push_back(std::move(s));
    data.split_tag.push_back(cur_tag);
    x_rows.clear();
    y_rows.clear();
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != expect)
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(expect) +
                      " cells, got " + std::to_string(cells.size()));
    const std::string& id = cells[0];
    const int t = static_cast<int>(parse_cell(cells[1], line_no, "t"));
    const int tag = has_split ? parse_split_cell(cells.back(), line_no)
                              : static_cast<int>(SplitTag::train);
    if (!open || id != cur_id) {
      if (open) close_sequence();
      cur_id = id;
      cur_tag = tag;
      open = true;
      if (t != 0)
        throw DataError("line " + std::to_string(line_no) + ": sequence " + id +
                        " must start at t=0, got t=" + std::to_string(t));
    } else {
      if (t != static_cast<int>(x_rows.size()))
        throw DataError("line " + std::to_string(line_no) + ": sequence " + id +
                        " has t=" + std::to_string(t) + ", expected " +
                        std::to_string(x_rows.size()));
      if (tag != cur_tag)
        throw DataError("line " + std::to_string(line_no) + ": sequence " + id +
                        " changes split tag mid-sequence");
    }
    std::vector<double> xr(static_cast<std::size_t>(f));
    std::vector<double> yr(static_cast<std::size_t>(l));
    for (int d = 0; d < f; ++d)
      xr[static_cast<std::size_t>(d)] =
          parse_cell(cells[2 + static_cast<std::size_t>(d)], line_no,
                     "x_" + data.feature_names[static_cast<std::size_t>(d)]);
    for (int d = 0; d < l; ++d) {
      const double v = parse_cell(cells[2 + static_cast<std::size_t>(f + d)], line_no,
                                  "y_" + data.label_names[static_cast<std::size_t>(d)]);
      if (v != 0.0 && v != 1.0)
        throw DataError("line " + std::to_string(line_no) + ", column y_" +
                        data.label_names[static_cast<std::size_t>(d)] + ": label must be 0 or 1, got " +
                        cells[2 + static_cast<std::size_t>(f + d)]);
      yr[static_cast<std::size_t>(d)] = v;
    }
    x_rows.push_back(std::move(xr));
    y_rows.push_back(std::move(yr));
  }
  if (open) close_sequence();
  if (data.sequences.empty()) throw DataError(path + ": no data rows");
  data.validate();
  return data;
}

FlatRows flatten_indices(const SequenceDataset& data, const std::vector<int>& seq_indices,
                         int window) {
  if (window < 1) throw ContractError("flatten: window must be >= 1");
  const int f = data.n_features();
  const int l = data.n_labels();
  std::int64_t rows = 0;
  for (int i : seq_indices) rows += data.sequences[static_cast<std::size_t>(i)].x.rows;
  FlatRows out;
  out.x = Matrix(static_cast<int>(rows), f * window);
  out.y = Matrix(static_cast<int>(rows), l);
  out.origin.reserve(static_cast<std::size_t>(rows));
  int r = 0;
  for (int i : seq_indices) {
    const Sequence& s = data.sequences[static_cast<std::size_t>(i)];
    for (int t = 0; t < s.x.rows; ++t) {
      for (int lag = 0; lag < window; ++lag) {
        const int src = t - lag;
        if (src < 0) continue;  // rows are zero-initialized; pad stays 0
        for (int d = 0; d < f; ++d) out.x.at(r, lag * f + d) = s.x.at(src, d);
      }
      for (int d = 0; d < l; ++d) out.y.at(r, d) = s.y.at(t, d);
      out.origin.emplace_back(i, t);
      ++r;
    }
  }
  return out;
}

FlatRows flatten(const SequenceDataset& data, SplitTag tag, int window) {
  return flatten_indices(data, data.indices_of(tag), window);
}

}  // namespace treereg
