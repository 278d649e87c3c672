#pragma once

#include <cmath>
#include <vector>

#include "ndf/forest.hpp"

namespace ndf {

// Gradient of one routing probability with respect to the input.
struct SaliencyMap {
  Tensor raw;  // same shape as the (unbatched) input
  int node = 0;
  double arrival_probability = 1.0;
};

namespace detail {

inline Tensor batch_of_one(const Tensor& sample) {
  Tensor b = sample;
  b.shape.insert(b.shape.begin(), 1);
  return b;
}

// Probability of arriving at `node`: product of routing factors along its
// root path (1.0 for the root itself).
inline double arrival_probability(int node, std::span<const double> scores) {
  double prob = 1.0;
  while (node > 1) {
    const int parent = node / 2;
    const double s = scores[parent - 1];
    prob *= (node == 2 * parent) ? s : 1.0 - s;
    node = parent;
  }
  return prob;
}

inline SaliencyMap dsm_from_pass(ForestPass& pass, const Tensor& sample, int tree_index,
                                 int node, double arrival) {
  Var target = slice(pass.scores[static_cast<size_t>(tree_index)], 1, node - 1, node);
  pass.graph->zero_grad();
  pass.graph->backward(target);
  Tensor grad = pass.graph->grad_of(pass.input);
  SaliencyMap map;
  map.raw = Tensor(sample.shape);
  map.raw.data = std::move(grad.data);
  map.node = node;
  map.arrival_probability = arrival;
  return map;
}

}  // namespace detail

// DSM of a single splitting node: one backward pass from the scalar score.
inline SaliencyMap compute_dsm(const Forest& f, const Tensor& sample, int node,
                               int tree_index = 0) {
  if (tree_index < 0 || tree_index >= f.tree_count())
    throw std::invalid_argument("dsm: tree index out of range");
  const TreeTopology& topo = f.trees[static_cast<size_t>(tree_index)].topo;
  if (node < 1 || node >= 2 * topo.first_leaf())
    throw std::invalid_argument("dsm: node " + std::to_string(node) + " out of range");
  if (topo.is_leaf(node))
    throw std::invalid_argument("dsm: node " + std::to_string(node) +
                                " is a leaf; leaves have no routing probability");
  ForestPass pass = forward_batch(f, detail::batch_of_one(sample), {.input_grad = true});
  const Tensor& scores = pass.scores[static_cast<size_t>(tree_index)].value();
  const double arrival = detail::arrival_probability(node, scores.data);
  return detail::dsm_from_pass(pass, sample, tree_index, node, arrival);
}

// One DSM per splitting node on the maximum-probability path, annotated
// with the path's (node, arrival probability) pairs.
inline std::vector<SaliencyMap> dsm_along_path(const Forest& f, const Tensor& sample,
                                               int tree_index = 0) {
  if (tree_index < 0 || tree_index >= f.tree_count())
    throw std::invalid_argument("dsm: tree index out of range");
  ForestPass pass = forward_batch(f, detail::batch_of_one(sample), {.input_grad = true});
  const TreeTopology& topo = f.trees[static_cast<size_t>(tree_index)].topo;
  std::vector<PathEntry> path =
      trace_max_path(topo, pass.scores[static_cast<size_t>(tree_index)].value().data);
  std::vector<SaliencyMap> maps;
  maps.reserve(path.size() - 1);
  for (const PathEntry& entry : path) {
    if (topo.is_leaf(entry.node)) break;
    maps.push_back(
        detail::dsm_from_pass(pass, sample, tree_index, entry.node, entry.probability));
  }
  return maps;
}

// Visualization form: absolute value, max over channels for (C,H,W) maps,
// then min-max scaled to [0,1]. A constant map becomes all zeros.
inline Tensor normalize_dsm(const Tensor& raw) {
  Tensor flat;
  if (raw.shape.size() == 3) {
    const int64_t c = raw.shape[0], h = raw.shape[1], w = raw.shape[2];
    flat = Tensor({h, w}, 0.0);
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t i = 0; i < h * w; ++i)
        flat.data[static_cast<size_t>(i)] = std::max(
            flat.data[static_cast<size_t>(i)], std::fabs(raw.data[static_cast<size_t>(ci * h * w + i)]));
  } else {
    flat = raw;
    flat.grad.clear();
    for (double& v : flat.data) v = std::fabs(v);
  }
  double lo = flat.data[0], hi = flat.data[0];
  for (double v : flat.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    for (double& v : flat.data) v = 0.0;
    return flat;
  }
  for (double& v : flat.data) v = (v - lo) / (hi - lo);
  return flat;
}

// Uniform-bin histogram over [0,1].
struct ScoreHistogram {
  int bins = 50;
  std::vector<int64_t> counts;
  int64_t total = 0;

  explicit ScoreHistogram(int b = 50) : bins(b), counts(static_cast<size_t>(b), 0) {
    if (b < 2) throw std::invalid_argument("histogram: needs at least 2 bins");
  }

  void add(double s) {
    int idx = static_cast<int>(s * bins);
    idx = std::min(std::max(idx, 0), bins - 1);
    counts[static_cast<size_t>(idx)] += 1;
    total += 1;
  }

  double bin_start(int i) const { return static_cast<double>(i) / bins; }
  double bin_end(int i) const { return static_cast<double>(i + 1) / bins; }
};

// Every recommendation score of every tree for every input, in input-major
// order. Forward passes run in bounded chunks.
inline std::vector<double> collect_scores(const Forest& f, const Tensor& inputs,
                                          int chunk = 256) {
  std::vector<double> all;
  const int64_t n = inputs.shape[0];
  std::vector<int> idx;
  for (int64_t off = 0; off < n; off += chunk) {
    idx.clear();
    for (int64_t i = off; i < std::min(n, off + chunk); ++i) idx.push_back(static_cast<int>(i));
    Tensor rows(inputs.shape);
    rows.shape[0] = static_cast<int64_t>(idx.size());
    rows.data.resize(static_cast<size_t>(numel(rows.shape)));
    const int64_t rowlen = numel(inputs.shape) / n;
    for (size_t i = 0; i < idx.size(); ++i)
      std::copy_n(inputs.data.data() + idx[i] * rowlen, rowlen,
                  rows.data.data() + static_cast<int64_t>(i) * rowlen);
    ForestPass pass = forward_batch(f, rows);
    for (const Var& s : pass.scores) {
      const std::vector<double>& v = s.value().data;
      all.insert(all.end(), v.begin(), v.end());
    }
  }
  return all;
}

inline ScoreHistogram make_histogram(std::span<const double> scores, int bins) {
  ScoreHistogram h(bins);
  for (double s : scores) h.add(s);
  return h;
}

inline ScoreHistogram collect_score_histogram(const Forest& f, const Tensor& inputs, int bins) {
  return make_histogram(collect_scores(f, inputs), bins);
}

}  // namespace ndf
