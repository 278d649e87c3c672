#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <unordered_set>
#include <vector>

#include "ndf/tensor.hpp"

namespace ndf {

// Full binary tree. Nodes are indexed sequentially with root = 1; the
// children of node i are 2i and 2i+1. Splitting nodes are 1 .. 2^d-1,
// leaves are 2^d .. 2^(d+1)-1.
struct TreeTopology {
  int depth = 1;

  explicit TreeTopology(int d = 1) : depth(d) {
    if (d < 1 || d > 30) throw std::invalid_argument("tree: depth must be in [1, 30]");
  }

  int split_count() const { return (1 << depth) - 1; }
  int leaf_count() const { return 1 << depth; }
  int first_leaf() const { return 1 << depth; }
  bool is_leaf(int node) const { return node >= first_leaf(); }
  int leaf_slot(int node) const { return node - first_leaf(); }
};

// Map from splitting node to the feature unit its sigmoid reads.
// units[i-1] is the unit of node i.
struct SplitAssignment {
  std::vector<int> units;

  static SplitAssignment sequential(int split_count, int offset) {
    SplitAssignment a;
    a.units.resize(split_count);
    std::iota(a.units.begin(), a.units.end(), offset);
    return a;
  }

  static SplitAssignment random_permutation(int split_count, int feature_dim, Rng& rng) {
    std::vector<int> all(feature_dim);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    SplitAssignment a;
    a.units.assign(all.begin(), all.begin() + split_count);
    a.validate(feature_dim);
    return a;
  }

  void validate(int feature_dim) const {
    std::unordered_set<int> seen;
    for (int u : units) {
      if (u < 0 || u >= feature_dim)
        throw std::invalid_argument("split assignment: unit " + std::to_string(u) +
                                    " outside extractor output of length " +
                                    std::to_string(feature_dim));
      if (!seen.insert(u).second)
        throw std::invalid_argument("split assignment: unit " + std::to_string(u) +
                                    " assigned twice");
    }
  }

  // True when the units are offset, offset+1, ... so a single slice can
  // gather them.
  bool contiguous() const {
    for (size_t i = 1; i < units.size(); ++i)
      if (units[i] != units[i - 1] + 1) return false;
    return true;
  }
};

// Per-leaf prediction vectors, stored as a (leaf_count, dim) tensor.
struct LeafStore {
  TaskMode mode = TaskMode::classification;
  Tensor values;

  static LeafStore uniform_classification(int leaf_count, int classes) {
    LeafStore s;
    s.mode = TaskMode::classification;
    s.values = Tensor({leaf_count, classes}, 1.0 / classes);
    return s;
  }

  static LeafStore zeros_regression(int leaf_count, int dim) {
    LeafStore s;
    s.mode = TaskMode::regression;
    s.values = Tensor({leaf_count, dim}, 0.0);
    return s;
  }

  int dim() const { return static_cast<int>(values.shape[1]); }
  int leaf_count() const { return static_cast<int>(values.shape[0]); }

  std::span<const double> leaf(int slot) const {
    return {values.data.data() + static_cast<size_t>(slot) * dim(), static_cast<size_t>(dim())};
  }
  std::span<double> leaf(int slot) {
    return {values.data.data() + static_cast<size_t>(slot) * dim(), static_cast<size_t>(dim())};
  }
};

// scores[i-1] is the routing probability of splitting node i: the
// probability of taking the LEFT child.
//
// Weight of a leaf is the product of s (left turns) and 1-s (right turns)
// along its root path, computed by pushing arrival probabilities down the
// node array.
inline std::vector<double> leaf_weights(const TreeTopology& topo,
                                        std::span<const double> scores) {
  if (static_cast<int>(scores.size()) != topo.split_count())
    throw std::invalid_argument("leaf_weights: expected " + std::to_string(topo.split_count()) +
                                " scores, got " + std::to_string(scores.size()));
  std::vector<double> arrive(static_cast<size_t>(2 * topo.leaf_count()), 0.0);
  arrive[1] = 1.0;
  for (int i = 1; i < topo.first_leaf(); ++i) {
    const double s = scores[i - 1];
    arrive[2 * i] = arrive[i] * s;
    arrive[2 * i + 1] = arrive[i] * (1.0 - s);
  }
  return {arrive.begin() + topo.first_leaf(), arrive.end()};
}

struct PathEntry {
  int node = 1;
  double probability = 1.0;
};

// Greedy maximum-probability path: at every split take the child with the
// larger routing factor (ties go left). Entries run from the root to the
// reached leaf; probability is the running product of chosen factors.
inline std::vector<PathEntry> trace_max_path(const TreeTopology& topo,
                                             std::span<const double> scores) {
  if (static_cast<int>(scores.size()) != topo.split_count())
    throw std::invalid_argument("trace_max_path: expected " +
                                std::to_string(topo.split_count()) + " scores, got " +
                                std::to_string(scores.size()));
  std::vector<PathEntry> path;
  path.reserve(topo.depth + 1);
  int node = 1;
  double prob = 1.0;
  path.push_back({node, prob});
  while (!topo.is_leaf(node)) {
    const double s = scores[node - 1];
    if (s >= 0.5) {
      prob = prob * s;
      node = 2 * node;
    } else {
      prob = prob * (1.0 - s);
      node = 2 * node + 1;
    }
    path.push_back({node, prob});
  }
  return path;
}

// Per-input routing snapshot of one tree.
struct RoutingState {
  std::vector<double> scores;
  std::vector<double> weights;
  std::vector<PathEntry> max_path;
};

inline RoutingState route(const TreeTopology& topo, std::vector<double> scores) {
  RoutingState st;
  st.weights = leaf_weights(topo, scores);
  st.max_path = trace_max_path(topo, scores);
  st.scores = std::move(scores);
  return st;
}

// Convex-combination prediction P = sum_i w_i p_i.
inline std::vector<double> tree_predict(std::span<const double> weights, const LeafStore& leaves) {
  if (static_cast<int>(weights.size()) != leaves.leaf_count())
    throw std::invalid_argument("predict: expected " + std::to_string(leaves.leaf_count()) +
                                " weights, got " + std::to_string(weights.size()));
  const int dim = leaves.dim();
  std::vector<double> out(static_cast<size_t>(dim), 0.0);
  for (int l = 0; l < leaves.leaf_count(); ++l) {
    const double w = weights[l];
    if (w == 0.0) continue;
    std::span<const double> p = leaves.leaf(l);
    for (int j = 0; j < dim; ++j) out[j] += w * p[j];
  }
  return out;
}

// One multiplicative update of the leaf class distributions:
//   pi_l(y) <- (1/Z_l) sum_{n: y_n = y} w_l(x_n) pi_l(y) / P(y_n | x_n)
// where P is the tree's own prediction for the sample. Leaves no sample
// reaches keep their previous distribution.
inline void leaf_update_classification(LeafStore& leaves,
                                       std::span<const std::vector<double>> sample_weights,
                                       std::span<const int> labels, double eps = 1e-12) {
  if (leaves.mode != TaskMode::classification)
    throw std::invalid_argument("leaf update: leaf store is not in classification mode");
  if (sample_weights.size() != labels.size())
    throw std::invalid_argument("leaf update: weights/labels size mismatch");
  if (labels.empty()) throw std::invalid_argument("leaf update: empty batch");
  const int classes = leaves.dim();
  const int count = leaves.leaf_count();
  Tensor next({count, classes}, 0.0);
  for (size_t n = 0; n < labels.size(); ++n) {
    const int y = labels[n];
    if (y < 0 || y >= classes)
      throw std::invalid_argument("leaf update: label " + std::to_string(y) + " out of range");
    const std::vector<double>& w = sample_weights[n];
    double p = 0.0;
    for (int l = 0; l < count; ++l) p += w[l] * leaves.leaf(l)[y];
    p = std::max(p, eps);
    for (int l = 0; l < count; ++l)
      next.data[static_cast<size_t>(l) * classes + y] += w[l] * leaves.leaf(l)[y] / p;
  }
  for (int l = 0; l < count; ++l) {
    double z = 0.0;
    for (int y = 0; y < classes; ++y) z += next.data[static_cast<size_t>(l) * classes + y];
    if (z <= 0.0) continue;  // unreachable leaf: keep previous distribution
    for (int y = 0; y < classes; ++y)
      leaves.leaf(l)[y] = next.data[static_cast<size_t>(l) * classes + y] / z;
  }
}

}  // namespace ndf
