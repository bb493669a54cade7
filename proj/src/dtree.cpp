#include "treereg/dtree.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

#include <nlohmann/json.hpp>

#include "treereg/common.hpp"
#include "treereg/rng.hpp"

namespace treereg {

namespace {

constexpr double kGainTie = 1e-12;

double gini(std::int64_t pos, std::int64_t n) {
  if (n == 0) return 0.0;
  double p = static_cast<double>(pos) / static_cast<double>(n);
  return 2.0 * p * (1.0 - p);
}

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = -1.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& x, std::span<const int> y, const TreeConfig& cfg)
      : x_(x), y_(y), cfg_(cfg) {}

  DecisionTree build() {
    DecisionTree tree;
    tree.n_features = x_.cols;
    std::vector<int> idx(static_cast<std::size_t>(x_.rows));
    std::iota(idx.begin(), idx.end(), 0);
    grow(tree, idx);
    return tree;
  }

 private:
  int grow(DecisionTree& tree, std::vector<int>& idx) {
    std::int64_t n = static_cast<std::int64_t>(idx.size());
    std::int64_t pos = 0;
    for (int i : idx) pos += y_[static_cast<std::size_t>(i)];

    int id = tree.node_count();
    tree.nodes.push_back({});
    tree.nodes.back().count = static_cast<int>(n);
    tree.nodes.back().prob = n > 0 ? static_cast<double>(pos) / static_cast<double>(n) : 0.0;

    if (pos == 0 || pos == n) return id;  // pure

    SplitChoice best = best_split(idx, pos);
    if (best.feature < 0) return id;  // no candidate satisfies min_leaf

    std::vector<int> left, right;
    left.reserve(idx.size());
    right.reserve(idx.size());
    for (int i : idx) {
      if (x_.at(i, best.feature) <= best.threshold)
        left.push_back(i);
      else
        right.push_back(i);
    }
    idx.clear();
    idx.shrink_to_fit();

    tree.nodes[static_cast<std::size_t>(id)].feature = best.feature;
    tree.nodes[static_cast<std::size_t>(id)].threshold = best.threshold;
    int l = grow(tree, left);
    tree.nodes[static_cast<std::size_t>(id)].left = l;
    int r = grow(tree, right);
    tree.nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  SplitChoice best_split(const std::vector<int>& idx, std::int64_t pos_total) {
    std::int64_t n = static_cast<std::int64_t>(idx.size());
    double parent = gini(pos_total, n);
    SplitChoice best;
    int min_leaf = std::max(1, cfg_.min_leaf_samples);

    std::vector<int> order;
    for (int f = 0; f < x_.cols; ++f) {
      order = idx;
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        return x_.at(a, f) < x_.at(b, f);
      });
      std::int64_t pos_left = 0;
      for (std::int64_t i = 0; i + 1 < n; ++i) {
        pos_left += y_[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        double lo = x_.at(order[static_cast<std::size_t>(i)], f);
        double hi = x_.at(order[static_cast<std::size_t>(i + 1)], f);
        if (!(hi > lo)) continue;
        std::int64_t n_left = i + 1, n_right = n - n_left;
        if (n_left < min_leaf || n_right < min_leaf) continue;
        double thr = lo + (hi - lo) / 2.0;
        double child =
            (static_cast<double>(n_left) * gini(pos_left, n_left) +
             static_cast<double>(n_right) * gini(pos_total - pos_left, n_right)) /
            static_cast<double>(n);
        double gain = parent - child;
        // Ascending (feature, threshold) scan: strict improvement keeps the
        // lowest-index candidate among ties.
        if (gain > best.gain + kGainTie) best = {f, thr, gain};
      }
    }
    return best;
  }

  const Matrix& x_;
  std::span<const int> y_;
  const TreeConfig& cfg_;
};

int walk(const DecisionTree& tree, std::span<const double> row, int* hops) {
  int id = 0;
  int steps = 0;
  while (!tree.is_leaf(id)) {
    const TreeNode& n = tree.nodes[static_cast<std::size_t>(id)];
    id = row[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    ++steps;
  }
  if (hops) *hops = steps;
  return id;
}

void collect_reachable(const DecisionTree& tree, int id, std::vector<int>& out) {
  out.push_back(id);
  if (!tree.is_leaf(id)) {
    collect_reachable(tree, tree.nodes[static_cast<std::size_t>(id)].left, out);
    collect_reachable(tree, tree.nodes[static_cast<std::size_t>(id)].right, out);
  }
}

DecisionTree compact(const DecisionTree& tree) {
  std::vector<int> keep;
  collect_reachable(tree, 0, keep);
  std::vector<int> remap(static_cast<std::size_t>(tree.node_count()), -1);
  for (std::size_t i = 0; i < keep.size(); ++i) remap[static_cast<std::size_t>(keep[i])] =
      static_cast<int>(i);
  DecisionTree out;
  out.n_features = tree.n_features;
  out.nodes.reserve(keep.size());
  for (int old : keep) {
    TreeNode n = tree.nodes[static_cast<std::size_t>(old)];
    if (n.feature >= 0) {
      n.left = remap[static_cast<std::size_t>(n.left)];
      n.right = remap[static_cast<std::size_t>(n.right)];
    } else {
      n.left = n.right = -1;
    }
    out.nodes.push_back(n);
  }
  return out;
}

}  // namespace

int DecisionTree::leaf_count() const {
  int c = 0;
  std::vector<int> reach;
  collect_reachable(*this, 0, reach);
  for (int id : reach)
    if (is_leaf(id)) ++c;
  return c;
}

int DecisionTree::depth() const {
  std::function<int(int)> rec = [&](int id) -> int {
    if (is_leaf(id)) return 0;
    const TreeNode& n = nodes[static_cast<std::size_t>(id)];
    return 1 + std::max(rec(n.left), rec(n.right));
  };
  return rec(0);
}

DecisionTree train_tree(const Matrix& x, std::span<const int> y, const TreeConfig& cfg) {
  if (x.rows == 0) throw ContractError("train_tree: empty training set");
  if (static_cast<int>(y.size()) != x.rows)
    throw ContractError("train_tree: label count does not match row count");
  for (int v : y)
    if (v != 0 && v != 1) throw ContractError("train_tree: labels must be 0/1");
  return TreeBuilder(x, y, cfg).build();
}

double tree_predict(const DecisionTree& tree, std::span<const double> row) {
  if (static_cast<int>(row.size()) != tree.n_features)
    throw ContractError("tree_predict: feature dimension mismatch");
  return tree.nodes[static_cast<std::size_t>(walk(tree, row, nullptr))].prob;
}

int tree_path_length(const DecisionTree& tree, std::span<const double> row) {
  if (static_cast<int>(row.size()) != tree.n_features)
    throw ContractError("tree_path_length: feature dimension mismatch");
  int hops = 0;
  walk(tree, row, &hops);
  return hops;
}

double average_path_length(const DecisionTree& tree, const Matrix& reference) {
  if (reference.rows == 0) throw ContractError("average_path_length: empty reference set");
  double total = 0.0;
  for (int r = 0; r < reference.rows; ++r)
    total += tree_path_length(tree, reference.row(r));
  return total / reference.rows;
}

double validation_sq_error(const DecisionTree& tree, const Matrix& xv, std::span<const int> yv) {
  if (static_cast<int>(yv.size()) != xv.rows)
    throw ContractError("validation_sq_error: label count mismatch");
  double err = 0.0;
  for (int r = 0; r < xv.rows; ++r) {
    double d = tree_predict(tree, xv.row(r)) - yv[static_cast<std::size_t>(r)];
    err += d * d;
  }
  return err;
}

DecisionTree prune_tree(const DecisionTree& tree, const Matrix& xv, std::span<const int> yv) {
  if (xv.rows == 0) throw ContractError("prune_tree: empty validation set");
  DecisionTree work = tree;

  // Depth of every node, for leaf-to-root candidate ordering.
  std::vector<int> depth(static_cast<std::size_t>(work.node_count()), 0);
  std::function<void(int, int)> mark = [&](int id, int d) {
    depth[static_cast<std::size_t>(id)] = d;
    if (!work.is_leaf(id)) {
      mark(work.nodes[static_cast<std::size_t>(id)].left, d + 1);
      mark(work.nodes[static_cast<std::size_t>(id)].right, d + 1);
    }
  };
  mark(0, 0);

  std::vector<int> candidates;
  for (int id = 0; id < work.node_count(); ++id)
    if (!work.is_leaf(id)) candidates.push_back(id);
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](int a, int b) { return depth[static_cast<std::size_t>(a)] >
                                              depth[static_cast<std::size_t>(b)]; });

  double err = validation_sq_error(work, xv, yv);
  for (int id : candidates) {
    TreeNode saved = work.nodes[static_cast<std::size_t>(id)];
    if (saved.feature < 0) continue;  // already collapsed by a prior accept
    work.nodes[static_cast<std::size_t>(id)].feature = -1;
    double err_new = validation_sq_error(work, xv, yv);
    if (err_new < err) {
      err = err_new;  // keep the collapse
    } else {
      work.nodes[static_cast<std::size_t>(id)] = saved;
    }
  }
  return compact(work);
}

double omega(const Matrix& reference, const Matrix& yhat, const TreeConfig& cfg,
             std::uint64_t seed) {
  return omega_with_trees(reference, yhat, cfg, seed, nullptr);
}

double omega_with_trees(const Matrix& reference, const Matrix& yhat, const TreeConfig& cfg,
                        std::uint64_t seed, std::vector<DecisionTree>* trees_out) {
  if (yhat.rows != reference.rows)
    throw ContractError("omega: prediction rows do not match reference rows");
  if (reference.rows == 0) throw ContractError("omega: empty reference set");

  double total = 0.0;
  for (int out = 0; out < yhat.cols; ++out) {
    std::vector<int> labels(static_cast<std::size_t>(reference.rows));
    for (int r = 0; r < reference.rows; ++r)
      labels[static_cast<std::size_t>(r)] = yhat.at(r, out) >= 0.5 ? 1 : 0;

    DecisionTree tree;
    if (cfg.prune && reference.rows >= 5) {
      Rng rng = Rng(seed).derive(static_cast<std::uint64_t>(out));
      std::vector<int> order(static_cast<std::size_t>(reference.rows));
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(std::span<int>(order));
      int n_fit = (reference.rows * 4) / 5;

      Matrix x_fit(n_fit, reference.cols), x_val(reference.rows - n_fit, reference.cols);
      std::vector<int> y_fit, y_val;
      for (int i = 0; i < reference.rows; ++i) {
        int src = order[static_cast<std::size_t>(i)];
        if (i < n_fit) {
          std::copy_n(reference.row(src).data(), reference.cols,
                      x_fit.row(static_cast<int>(y_fit.size())).data());
          y_fit.push_back(labels[static_cast<std::size_t>(src)]);
        } else {
          std::copy_n(reference.row(src).data(), reference.cols,
                      x_val.row(static_cast<int>(y_val.size())).data());
          y_val.push_back(labels[static_cast<std::size_t>(src)]);
        }
      }
      tree = prune_tree(train_tree(x_fit, y_fit, cfg), x_val, y_val);
    } else {
      tree = train_tree(reference, labels, cfg);
    }
    total += average_path_length(tree, reference);
    if (trees_out) trees_out->push_back(std::move(tree));
  }
  return total;
}

double fidelity(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ContractError("fidelity: length mismatch");
  if (a.empty()) throw ContractError("fidelity: empty inputs");
  std::int64_t agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) agree += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(a.size());
}

std::string tree_to_dot(const DecisionTree& tree) {
  std::string out = "digraph tree {\n  node [shape=box];\n";
  char buf[160];
  for (int id = 0; id < tree.node_count(); ++id) {
    const TreeNode& n = tree.nodes[static_cast<std::size_t>(id)];
    if (n.feature >= 0) {
      std::snprintf(buf, sizeof(buf), "  n%d [label=\"x[%d] <= %.6g\"];\n", id, n.feature,
                    n.threshold);
      out += buf;
      std::snprintf(buf, sizeof(buf), "  n%d -> n%d [label=\"<=\"];\n", id, n.left);
      out += buf;
      std::snprintf(buf, sizeof(buf), "  n%d -> n%d [label=\">\"];\n", id, n.right);
      out += buf;
    } else {
      std::snprintf(buf, sizeof(buf), "  n%d [label=\"p=%.4f\"];\n", id, n.prob);
      out += buf;
    }
  }
  out += "}\n";
  return out;
}

namespace {

nlohmann::json node_to_json(const DecisionTree& tree, int id) {
  const TreeNode& n = tree.nodes[static_cast<std::size_t>(id)];
  nlohmann::json j;
  j["prob"] = n.prob;
  j["count"] = n.count;
  if (n.feature >= 0) {
    j["feature"] = n.feature;
    j["threshold"] = n.threshold;
    j["left"] = node_to_json(tree, n.left);
    j["right"] = node_to_json(tree, n.right);
  }
  return j;
}

int node_from_json(const nlohmann::json& j, DecisionTree& tree) {
  int id = tree.node_count();
  tree.nodes.push_back({});
  tree.nodes.back().prob = j.at("prob").get<double>();
  tree.nodes.back().count = j.value("count", 0);
  if (j.contains("feature")) {
    tree.nodes[static_cast<std::size_t>(id)].feature = j.at("feature").get<int>();
    tree.nodes[static_cast<std::size_t>(id)].threshold = j.at("threshold").get<double>();
    int l = node_from_json(j.at("left"), tree);
    tree.nodes[static_cast<std::size_t>(id)].left = l;
    int r = node_from_json(j.at("right"), tree);
    tree.nodes[static_cast<std::size_t>(id)].right = r;
  }
  return id;
}

}  // namespace

nlohmann::json tree_to_json(const DecisionTree& tree) {
  nlohmann::json j;
  j["n_features"] = tree.n_features;
  j["root"] = node_to_json(tree, 0);
  return j;
}

DecisionTree tree_from_json(const nlohmann::json& j) {
  DecisionTree tree;
  try {
    tree.n_features = j.at("n_features").get<int>();
    node_from_json(j.at("root"), tree);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("tree_from_json: ") + e.what());
  }
  return tree;
}

}  // namespace treereg
