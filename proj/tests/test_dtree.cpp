#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "treereg/dtree.hpp"
#include "treereg/matrix.hpp"
#include "treereg/rng.hpp"

using treereg::DecisionTree;
using treereg::Matrix;
using treereg::Rng;
using treereg::TreeConfig;

namespace reference {

// Exhaustive Gini split enumeration, written independently of train_tree:
// direct counting loops over rows for every (feature, midpoint) candidate.
struct Split {
  int feature = -1;
  double threshold = 0.0;
  double gain = -1.0;
};

double gini_of(std::int64_t pos, std::int64_t n) {
  if (n == 0) return 0.0;
  double p = double(pos) / double(n);
  return 2.0 * p * (1.0 - p);
}

Split exhaustive_best_split(const Matrix& x, const std::vector<int>& y, int min_leaf) {
  min_leaf = std::max(1, min_leaf);
  std::int64_t n = x.rows, pos = 0;
  for (int v : y) pos += v;
  double parent = gini_of(pos, n);
  Split best;
  for (int f = 0; f < x.cols; ++f) {
    std::vector<double> vals;
    for (int r = 0; r < x.rows; ++r) vals.push_back(x.at(r, f));
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
      double thr = (vals[i] + vals[i + 1]) / 2.0;
      std::int64_t nl = 0, pl = 0;
      for (int r = 0; r < x.rows; ++r) {
        if (x.at(r, f) <= thr) {
          ++nl;
          pl += y[std::size_t(r)];
        }
      }
      std::int64_t nr = n - nl;
      if (nl < min_leaf || nr < min_leaf) continue;
      double child = (double(nl) * gini_of(pl, nl) + double(nr) * gini_of(pos - pl, nr)) / double(n);
      double gain = parent - child;
      if (gain > best.gain + 1e-12) best = {f, thr, gain};
    }
  }
  return best;
}

// Independent recursive traversal: prediction and edge count.
int node_visit(const DecisionTree& t, std::span<const double> row, int id, int depth,
               double* prob_out) {
  const auto& n = t.nodes[std::size_t(id)];
  if (n.feature < 0) {
    if (prob_out) *prob_out = n.prob;
    return depth;
  }
  int next = row[std::size_t(n.feature)] <= n.threshold ? n.left : n.right;
  return node_visit(t, row, next, depth + 1, prob_out);
}

int path_length(const DecisionTree& t, std::span<const double> row) {
  return node_visit(t, row, 0, 0, nullptr);
}

double predict(const DecisionTree& t, std::span<const double> row) {
  double p = 0.0;
  node_visit(t, row, 0, 0, &p);
  return p;
}

double val_error(const DecisionTree& t, const Matrix& xv, const std::vector<int>& yv) {
  double e = 0.0;
  for (int r = 0; r < xv.rows; ++r) {
    double d = predict(t, xv.row(r)) - yv[std::size_t(r)];
    e += d * d;
  }
  return e;
}

}  // namespace reference

namespace {

Matrix make_matrix(const std::vector<std::vector<double>>& rows) {
  Matrix m(int(rows.size()), int(rows[0].size()));
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) m.at(r, c) = rows[std::size_t(r)][std::size_t(c)];
  return m;
}

}  // namespace

TEST_CASE("dtree: 1-D threshold rule learns one split near 0.5 with pure leaves") {
  Rng rng(21);
  Matrix x(100, 1);
  std::vector<int> y(100);
  for (int i = 0; i < 100; ++i) {
    x.at(i, 0) = rng.uniform();
    y[std::size_t(i)] = x.at(i, 0) > 0.5 ? 1 : 0;
  }
  auto tree = treereg::train_tree(x, y, {1, false});
  REQUIRE(tree.node_count() == 3);
  CHECK(tree.nodes[0].feature == 0);
  // The split lands between the largest value below 0.5 and the smallest above.
  double lo = -1.0, hi = 2.0;
  for (int i = 0; i < 100; ++i) {
    if (x.at(i, 0) <= 0.5) lo = std::max(lo, x.at(i, 0));
    else hi = std::min(hi, x.at(i, 0));
  }
  CHECK(tree.nodes[0].threshold > lo);
  CHECK(tree.nodes[0].threshold < hi);
  for (int id = 1; id < 3; ++id) {
    CHECK(tree.is_leaf(id));
    CHECK((tree.nodes[std::size_t(id)].prob == 0.0 || tree.nodes[std::size_t(id)].prob == 1.0));
  }
  CHECK(treereg::tree_predict(tree, std::vector<double>{0.2}) == 0.0);
  CHECK(treereg::tree_predict(tree, std::vector<double>{0.9}) == 1.0);
  CHECK(treereg::average_path_length(tree, x) == 1.0);
}

TEST_CASE("dtree: balanced XOR quadrants produce the depth-2 tree with path length 2") {
  // Equal counts per quadrant; all root candidates have zero Gini decrease but
  // the children of any admissible split are perfectly splittable.
  std::vector<std::vector<double>> rows;
  std::vector<int> y;
  for (int rep = 0; rep < 10; ++rep) {
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        rows.push_back({double(a), double(b)});
        y.push_back(a ^ b);
      }
    }
  }
  Matrix x = make_matrix(rows);
  auto tree = treereg::train_tree(x, y, {1, false});
  CHECK(tree.depth() == 2);
  CHECK(tree.leaf_count() == 4);
  for (int id = 0; id < tree.node_count(); ++id)
    if (tree.is_leaf(id))
      CHECK((tree.nodes[std::size_t(id)].prob == 0.0 || tree.nodes[std::size_t(id)].prob == 1.0));
  CHECK(treereg::average_path_length(tree, x) == 2.0);
}

TEST_CASE("dtree: min_leaf_samples blocks splits that isolate small groups") {
  Matrix x(10, 1);
  std::vector<int> y(10, 0);
  for (int i = 0; i < 10; ++i) x.at(i, 0) = i;
  y[0] = 1;
  auto unrestricted = treereg::train_tree(x, y, {1, false});
  CHECK(unrestricted.nodes[0].threshold == doctest::Approx(0.5));

  auto restricted = treereg::train_tree(x, y, {3, false});
  CHECK(restricted.nodes[0].threshold == doctest::Approx(2.5));
  CHECK(restricted.nodes[restricted.nodes[0].left].count >= 3);
  CHECK(restricted.nodes[restricted.nodes[0].right].count >= 3);
}

TEST_CASE("dtree: pruning collapses a noise-fit subtree when validation improves") {
  Rng rng(5);
  Matrix x(200, 1);
  std::vector<int> y(200);
  for (int i = 0; i < 200; ++i) {
    x.at(i, 0) = rng.uniform();
    // Right half follows the rule; left half is labeled by coin flips.
    y[std::size_t(i)] = x.at(i, 0) > 0.5 ? 1 : (rng.bernoulli(0.5) ? 1 : 0);
  }
  auto tree = treereg::train_tree(x, y, {5, false});
  REQUIRE(tree.node_count() > 3);

  Matrix xv(100, 1);
  std::vector<int> yv(100);
  for (int i = 0; i < 100; ++i) {
    xv.at(i, 0) = rng.uniform();
    yv[std::size_t(i)] = xv.at(i, 0) > 0.5 ? 1 : 0;  // clean rule on validation
  }
  double before = treereg::validation_sq_error(tree, xv, yv);
  auto pruned = treereg::prune_tree(tree, xv, yv);
  double after = treereg::validation_sq_error(pruned, xv, yv);
  CHECK(pruned.node_count() < tree.node_count());
  CHECK(after < before);
}

TEST_CASE("dtree: pruning leaves a validation-consistent tree alone") {
  Rng rng(9);
  Matrix x(100, 1);
  std::vector<int> y(100);
  for (int i = 0; i < 100; ++i) {
    x.at(i, 0) = rng.uniform();
    y[std::size_t(i)] = x.at(i, 0) > 0.3 ? 1 : 0;
  }
  auto tree = treereg::train_tree(x, y, {1, false});
  auto pruned = treereg::prune_tree(tree, x, y);
  CHECK(pruned.node_count() == tree.node_count());

  // Single-leaf tree is returned unchanged.
  std::vector<int> pure(100, 1);
  auto leaf = treereg::train_tree(x, pure, {1, false});
  REQUIRE(leaf.node_count() == 1);
  auto leaf_pruned = treereg::prune_tree(leaf, x, pure);
  CHECK(leaf_pruned.node_count() == 1);
}

TEST_CASE("dtree: average path length ignores leaf probabilities and row order") {
  Rng rng(33);
  Matrix x(50, 2);
  std::vector<int> y(50);
  for (int i = 0; i < 50; ++i) {
    x.at(i, 0) = rng.uniform();
    x.at(i, 1) = rng.uniform();
    y[std::size_t(i)] = (x.at(i, 0) + x.at(i, 1) > 1.0) ? 1 : 0;
  }
  auto tree = treereg::train_tree(x, y, {5, false});
  double apl = treereg::average_path_length(tree, x);

  DecisionTree scrambled = tree;
  for (auto& n : scrambled.nodes)
    if (n.feature < 0) n.prob = 1.0 - n.prob;
  CHECK(treereg::average_path_length(scrambled, x) == apl);

  Matrix rev(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i)
    std::copy_n(x.row(x.rows - 1 - i).data(), x.cols, rev.row(i).data());
  CHECK(treereg::average_path_length(tree, rev) == doctest::Approx(apl).epsilon(1e-12));
}

TEST_CASE("dtree: omega is 0 for a constant model and 1 for a step rule") {
  Rng rng(8);
  Matrix ref(100, 1);
  for (int i = 0; i < 100; ++i) ref.at(i, 0) = rng.uniform();

  Matrix constant(100, 1);
  for (int i = 0; i < 100; ++i) constant.at(i, 0) = 0.7;
  CHECK(treereg::omega(ref, constant, {1, false}, 0) == 0.0);

  Matrix step(100, 1);
  for (int i = 0; i < 100; ++i) step.at(i, 0) = ref.at(i, 0) > 0.5 ? 0.9 : 0.1;
  CHECK(treereg::omega(ref, step, {1, false}, 0) == 1.0);
}

TEST_CASE("dtree: omega sums per-output path lengths") {
  // Binary feature clusters: output 0 needs one split, output 1 is XOR (two).
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<double>> preds;
  for (int rep = 0; rep < 10; ++rep) {
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        rows.push_back({double(a), double(b)});
        preds.push_back({a == 1 ? 0.9 : 0.1, (a ^ b) == 1 ? 0.8 : 0.2});
      }
    }
  }
  Matrix ref = make_matrix(rows);
  Matrix yhat = make_matrix(preds);
  CHECK(treereg::omega(ref, yhat, {1, false}, 0) == 3.0);
}

TEST_CASE("dtree: fidelity counts agreements and rejects mismatched lengths") {
  std::vector<int> a = {1, 0, 1, 1}, b = {1, 0, 1, 1}, c = {0, 1, 0, 0}, d = {1, 0};
  CHECK(treereg::fidelity(a, b) == 1.0);
  CHECK(treereg::fidelity(a, c) == 0.0);
  std::vector<int> e = {1, 0, 1, 0};
  CHECK(treereg::fidelity(a, e) == 0.75);
  CHECK_THROWS_AS((void)treereg::fidelity(a, d), treereg::ContractError);
}

TEST_CASE("dtree: training is deterministic") {
  Rng rng(44);
  Matrix x(150, 3);
  std::vector<int> y(150);
  for (int i = 0; i < 150; ++i) {
    for (int c = 0; c < 3; ++c) x.at(i, c) = rng.uniform();
    y[std::size_t(i)] = (x.at(i, 1) > 0.4 && x.at(i, 2) < 0.7) ? 1 : 0;
  }
  auto t1 = treereg::train_tree(x, y, {5, false});
  auto t2 = treereg::train_tree(x, y, {5, false});
  REQUIRE(t1.node_count() == t2.node_count());
  for (int i = 0; i < t1.node_count(); ++i) {
    CHECK(t1.nodes[std::size_t(i)].feature == t2.nodes[std::size_t(i)].feature);
    CHECK(t1.nodes[std::size_t(i)].threshold == t2.nodes[std::size_t(i)].threshold);
  }
}

TEST_CASE("dtree: DOT and JSON exports round-trip the structure") {
  Rng rng(3);
  Matrix x(60, 2);
  std::vector<int> y(60);
  for (int i = 0; i < 60; ++i) {
    x.at(i, 0) = rng.uniform();
    x.at(i, 1) = rng.uniform();
    y[std::size_t(i)] = x.at(i, 0) > 0.6 ? 1 : 0;
  }
  auto tree = treereg::train_tree(x, y, {5, false});

  std::string dot = treereg::tree_to_dot(tree);
  CHECK(dot.find("digraph") != std::string::npos);
  CHECK(dot.find("x[0] <=") != std::string::npos);
  CHECK(dot.find("p=") != std::string::npos);

  auto j = treereg::tree_to_json(tree);
  auto back = treereg::tree_from_json(j);
  REQUIRE(back.node_count() == tree.node_count());
  for (int i = 0; i < 40; ++i) {
    std::vector<double> probe = {rng.uniform(), rng.uniform()};
    CHECK(treereg::tree_predict(back, probe) == treereg::tree_predict(tree, probe));
    CHECK(treereg::tree_path_length(back, probe) == treereg::tree_path_length(tree, probe));
  }
}

TEST_CASE("dtree: random datasets match the exhaustive-split and traversal oracles") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed * 131 + 7);
    int n = 20 + rng.uniform_int(181);
    int f_dim = 1 + rng.uniform_int(3);
    int min_leaf = 1 + rng.uniform_int(8);
    bool binary_features = rng.bernoulli(0.4);

    Matrix x(n, f_dim);
    std::vector<int> y(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < f_dim; ++c)
        x.at(i, c) = binary_features ? double(rng.uniform_int(2)) : rng.uniform();
      bool rule = x.at(i, 0) > 0.5;
      y[std::size_t(i)] = (rule != rng.bernoulli(0.2)) ? 1 : 0;
    }

    auto tree = treereg::train_tree(x, y, {min_leaf, false});
    auto oracle = reference::exhaustive_best_split(x, y, min_leaf);

    std::int64_t pos = 0;
    for (int v : y) pos += v;
    bool pure = pos == 0 || pos == n;
    if (pure || oracle.feature < 0) {
      CHECK(tree.is_leaf(0));
    } else {
      REQUIRE_FALSE(tree.is_leaf(0));
      CHECK(tree.nodes[0].feature == oracle.feature);
      CHECK(tree.nodes[0].threshold == doctest::Approx(oracle.threshold).epsilon(1e-9));
    }

    // Path lengths against the independent traversal on fresh reference rows.
    Matrix probe(25, f_dim);
    for (int i = 0; i < 25; ++i)
      for (int c = 0; c < f_dim; ++c)
        probe.at(i, c) = binary_features ? double(rng.uniform_int(2)) : rng.uniform();
    double total = 0.0;
    for (int i = 0; i < 25; ++i) {
      CHECK(treereg::tree_path_length(tree, probe.row(i)) ==
            reference::path_length(tree, probe.row(i)));
      CHECK(treereg::tree_predict(tree, probe.row(i)) == reference::predict(tree, probe.row(i)));
      total += reference::path_length(tree, probe.row(i));
    }
    CHECK(treereg::average_path_length(tree, probe) == doctest::Approx(total / 25).epsilon(1e-12));

    // Pruning never increases validation squared error (independent metric).
    Matrix xv(40, f_dim);
    std::vector<int> yv(40);
    for (int i = 0; i < 40; ++i) {
      for (int c = 0; c < f_dim; ++c)
        xv.at(i, c) = binary_features ? double(rng.uniform_int(2)) : rng.uniform();
      yv[std::size_t(i)] = rng.bernoulli(0.5) ? 1 : 0;
    }
    auto pruned = treereg::prune_tree(tree, xv, yv);
    CHECK(reference::val_error(pruned, xv, yv) <= reference::val_error(tree, xv, yv) + 1e-12);
    CHECK(pruned.node_count() <= tree.node_count());
  }
}
