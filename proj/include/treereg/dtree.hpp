#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "treereg/matrix.hpp"

namespace treereg {

struct TreeConfig {
  int min_leaf_samples = 1;
  bool prune = true;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double prob = 0.0;  // positive fraction of training rows reaching the node
  int count = 0;      // training rows reaching the node
};

// Axis-aligned binary classification tree; x[feature] <= threshold goes left.
struct DecisionTree {
  int n_features = 0;
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  bool is_leaf(int id) const { return nodes[static_cast<std::size_t>(id)].feature < 0; }
  int node_count() const { return static_cast<int>(nodes.size()); }
  int leaf_count() const;
  int depth() const;  // single leaf has depth 0
};

// Greedy CART on Gini impurity. Splits any impure node that admits a split
// satisfying min_leaf_samples; the split maximizing impurity decrease wins,
// ties broken by lowest feature index then lowest threshold. Candidate
// thresholds are midpoints between consecutive distinct sorted values.
DecisionTree train_tree(const Matrix& x, std::span<const int> y, const TreeConfig& cfg);

// Reduced-error post-pruning: walks candidate collapses leaf-to-root and keeps
// each only if validation squared error strictly decreases. Collapsed leaves
// take the training positive fraction of their subtree. yv entries are 0/1.
DecisionTree prune_tree(const DecisionTree& tree, const Matrix& xv, std::span<const int> yv);

double tree_predict(const DecisionTree& tree, std::span<const double> row);
int tree_path_length(const DecisionTree& tree, std::span<const double> row);
double average_path_length(const DecisionTree& tree, const Matrix& reference);
double validation_sq_error(const DecisionTree& tree, const Matrix& xv, std::span<const int> yv);

// Average decision-path length of a tree distilled from model predictions:
// thresholds yhat at 0.5, trains (and optionally prunes, on a seeded 80/20
// split of the reference rows) one tree per output column, and returns the
// summed average path length over the full reference set.
double omega(const Matrix& reference, const Matrix& yhat, const TreeConfig& cfg,
             std::uint64_t seed);

// Same computation, also yielding the per-output trees (in column order).
double omega_with_trees(const Matrix& reference, const Matrix& yhat, const TreeConfig& cfg,
                        std::uint64_t seed, std::vector<DecisionTree>* trees_out);

// Agreement fraction between two equally long 0/1 label vectors.
double fidelity(std::span<const int> a, std::span<const int> b);

std::string tree_to_dot(const DecisionTree& tree);
nlohmann::json tree_to_json(const DecisionTree& tree);
DecisionTree tree_from_json(const nlohmann::json& j);

}  // namespace treereg
