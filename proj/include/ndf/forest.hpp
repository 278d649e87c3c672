#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ndf/graph.hpp"
#include "ndf/tree.hpp"

namespace ndf {

enum class ExtractorKind { mlp, conv_block, conv_small };

inline const char* extractor_kind_name(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::mlp: return "mlp";
    case ExtractorKind::conv_block: return "conv_block";
    case ExtractorKind::conv_small: return "conv_small";
  }
  return "?";
}

// Feature extractor producing one feature vector per input. Three shapes:
//   mlp        dense layers with relu between, over flat inputs
//   conv_block conv3x3 - relu - maxpool - dense, single-channel images
//   conv_small conv3x3 - relu - maxpool - conv3x3 - relu - maxpool - dense
struct Extractor {
  ExtractorKind kind = ExtractorKind::mlp;
  int in_h = 0, in_w = 0;    // conv variants
  int conv1 = 0, conv2 = 0;  // conv channel counts
  std::vector<int> mlp_dims; // mlp widths, input first
  int out_dim = 0;
  std::vector<Tensor> params;
  std::vector<std::string> param_names;

  static Extractor mlp(std::vector<int> dims, Rng& rng) {
    if (dims.size() < 2) throw std::invalid_argument("extractor: mlp needs >= 2 layer widths");
    Extractor e;
    e.kind = ExtractorKind::mlp;
    e.mlp_dims = std::move(dims);
    e.out_dim = e.mlp_dims.back();
    for (size_t i = 0; i + 1 < e.mlp_dims.size(); ++i) {
      const int64_t din = e.mlp_dims[i], dout = e.mlp_dims[i + 1];
      e.push_param("w" + std::to_string(i), glorot_uniform({din, dout}, din, dout, rng));
      e.push_param("b" + std::to_string(i), Tensor({dout}, 0.0));
    }
    return e;
  }

  static Extractor conv_block(int h, int w, int c1, int out, Rng& rng) {
    Extractor e;
    e.kind = ExtractorKind::conv_block;
    e.in_h = h;
    e.in_w = w;
    e.conv1 = c1;
    e.out_dim = out;
    const int ph = (h - 2) / 2, pw = (w - 2) / 2;  // after conv3x3 + pool
    if (ph < 1 || pw < 1)
      throw std::invalid_argument("extractor: input too small for conv_block");
    e.push_param("conv1_w", glorot_uniform({c1, 1, 3, 3}, 9, 9 * c1, rng));
    e.push_param("conv1_b", Tensor({c1}, 0.0));
    const int64_t flat = static_cast<int64_t>(c1) * ph * pw;
    e.push_param("dense_w", glorot_uniform({flat, out}, flat, out, rng));
    e.push_param("dense_b", Tensor({out}, 0.0));
    return e;
  }

  static Extractor conv_small(int h, int w, int c1, int c2, int out, Rng& rng) {
    Extractor e;
    e.kind = ExtractorKind::conv_small;
    e.in_h = h;
    e.in_w = w;
    e.conv1 = c1;
    e.conv2 = c2;
    e.out_dim = out;
    const int h1 = (h - 2) / 2, w1 = (w - 2) / 2;
    const int h2 = (h1 - 2) / 2, w2 = (w1 - 2) / 2;
    if (h2 < 1 || w2 < 1)
      throw std::invalid_argument("extractor: input too small for conv_small");
    e.push_param("conv1_w", glorot_uniform({c1, 1, 3, 3}, 9, 9 * c1, rng));
    e.push_param("conv1_b", Tensor({c1}, 0.0));
    e.push_param("conv2_w", glorot_uniform({c2, c1, 3, 3}, 9 * c1, 9 * c2, rng));
    e.push_param("conv2_b", Tensor({c2}, 0.0));
    const int64_t flat = static_cast<int64_t>(c2) * h2 * w2;
    e.push_param("dense_w", glorot_uniform({flat, out}, flat, out, rng));
    e.push_param("dense_b", Tensor({out}, 0.0));
    return e;
  }

  // Input shape per sample, without the batch axis.
  Shape sample_shape() const {
    if (kind == ExtractorKind::mlp) return {mlp_dims.front()};
    return {1, in_h, in_w};
  }

  // Builds the forward pass for a batch. When `param_ids` is given the
  // parameters become gradient leaves and their node ids are appended in
  // `params` order.
  Var build(Graph& g, Var x, std::vector<int>* param_ids = nullptr) const {
    const bool train = param_ids != nullptr;
    std::vector<Var> p;
    p.reserve(params.size());
    for (const Tensor& t : params) {
      Var v = g.leaf(t, train);
      if (train) param_ids->push_back(v.id);
      p.push_back(v);
    }
    switch (kind) {
      case ExtractorKind::mlp: {
        Var h = x;
        for (size_t i = 0; i + 1 < mlp_dims.size(); ++i) {
          h = dense(g, h, p[2 * i], p[2 * i + 1]);
          if (i + 2 < mlp_dims.size()) h = relu(h);
        }
        return h;
      }
      case ExtractorKind::conv_block: {
        Var h = maxpool2d(relu(conv2d(x, p[0], p[1])));
        Var flat = reshape(h, {x.shape()[0], h.size() / x.shape()[0]});
        return dense(g, flat, p[2], p[3]);
      }
      case ExtractorKind::conv_small: {
        Var h = maxpool2d(relu(conv2d(x, p[0], p[1])));
        h = maxpool2d(relu(conv2d(h, p[2], p[3])));
        Var flat = reshape(h, {x.shape()[0], h.size() / x.shape()[0]});
        return dense(g, flat, p[4], p[5]);
      }
    }
    throw std::logic_error("extractor: unhandled kind");
  }

 private:
  void push_param(std::string name, Tensor t) {
    param_names.push_back(std::move(name));
    params.push_back(std::move(t));
  }

  // y = x.W + b, with the bias row replicated through a ones column so the
  // primitive set needs no broadcasting.
  static Var dense(Graph& g, Var x, Var w, Var b) {
    const int64_t n = x.shape()[0];
    const int64_t dout = w.shape()[1];
    Var ones = g.constant_full({n, 1}, 1.0);
    return matmul(x, w) + matmul(ones, reshape(b, {1, dout}));
  }
};

struct Tree {
  TreeTopology topo;
  SplitAssignment assign;
  LeafStore leaves;
};

enum class AssignmentScheme { sequential, shuffled };

// An ensemble of soft decision trees sharing one feature extractor.
struct Forest {
  TaskMode mode = TaskMode::classification;
  Extractor extractor;
  std::vector<Tree> trees;

  static Forest make(TaskMode mode, Extractor extractor, int tree_count, int depth,
                     int output_dim, AssignmentScheme scheme = AssignmentScheme::sequential,
                     Rng* rng = nullptr) {
    if (tree_count < 1) throw std::invalid_argument("forest: needs at least one tree");
    Forest f;
    f.mode = mode;
    f.extractor = std::move(extractor);
    TreeTopology topo(depth);
    const int total_splits = tree_count * topo.split_count();
    if (f.extractor.out_dim < total_splits)
      throw std::invalid_argument("forest: extractor output length " +
                                  std::to_string(f.extractor.out_dim) + " < " +
                                  std::to_string(total_splits) + " splitting nodes");
    std::vector<int> pool;
    if (scheme == AssignmentScheme::shuffled) {
      if (!rng) throw std::invalid_argument("forest: shuffled assignment needs an rng");
      pool.resize(f.extractor.out_dim);
      std::iota(pool.begin(), pool.end(), 0);
      std::shuffle(pool.begin(), pool.end(), *rng);
    }
    for (int t = 0; t < tree_count; ++t) {
      Tree tree{topo, {}, {}};
      if (scheme == AssignmentScheme::sequential) {
        tree.assign = SplitAssignment::sequential(topo.split_count(), t * topo.split_count());
      } else {
        tree.assign.units.assign(pool.begin() + t * topo.split_count(),
                                 pool.begin() + (t + 1) * topo.split_count());
      }
      tree.assign.validate(f.extractor.out_dim);
      tree.leaves = mode == TaskMode::classification
                        ? LeafStore::uniform_classification(topo.leaf_count(), output_dim)
                        : LeafStore::zeros_regression(topo.leaf_count(), output_dim);
      f.trees.push_back(std::move(tree));
    }
    return f;
  }

  int tree_count() const { return static_cast<int>(trees.size()); }
  int output_dim() const { return trees.at(0).leaves.dim(); }

  // Trainable tensors: extractor parameters, then (regression only) the
  // per-tree leaf matrices. forward_batch records gradient leaf ids in the
  // same order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (Tensor& t : extractor.params) out.push_back(&t);
    if (mode == TaskMode::regression)
      for (Tree& t : trees) out.push_back(&t.leaves.values);
    return out;
  }
};

struct PassOptions {
  bool train = false;       // parameters become gradient leaves
  bool input_grad = false;  // input becomes a gradient leaf (saliency)
};

// One forward pass of a forest over a batch, with handles into the graph.
struct ForestPass {
  std::unique_ptr<Graph> graph;
  Var input;
  Var features;
  std::vector<Var> scores;   // per tree, (N, split_count), node order
  std::vector<Var> weights;  // per tree, (N, leaf_count)
  Var prediction;            // (N, output_dim)
  std::vector<int> param_ids;  // parallel to Forest::parameters()
  std::vector<Var> leaf_stores;  // per tree, the (leaf_count, dim) leaf node
};

namespace detail {

inline Var gather_columns(Var m, const std::vector<int>& cols) {
  bool contiguous = true;
  for (size_t i = 1; i < cols.size(); ++i)
    if (cols[i] != cols[i - 1] + 1) {
      contiguous = false;
      break;
    }
  if (contiguous) return slice(m, 1, cols.front(), cols.front() + static_cast<int64_t>(cols.size()));
  std::vector<Var> parts;
  parts.reserve(cols.size());
  for (int c : cols) parts.push_back(slice(m, 1, c, c + 1));
  return concat(parts, 1);
}

// Arrival probabilities pushed level by level; interleaving left/right via a
// trailing axis keeps the children in node order.
inline Var tree_weights_graph(Graph& g, Var scores, const TreeTopology& topo) {
  const int64_t n = scores.shape()[0];
  Var arrive = g.constant_full({n, 1}, 1.0);
  for (int level = 0; level < topo.depth; ++level) {
    const int64_t width = int64_t{1} << level;
    Var s = slice(scores, 1, width - 1, 2 * width - 1);
    Var ones = g.constant_full({n, width}, 1.0);
    Var left = arrive * s;
    Var right = arrive * (ones - s);
    arrive = reshape(
        concat({reshape(left, {n, width, 1}), reshape(right, {n, width, 1})}, 2),
        {n, 2 * width});
  }
  return arrive;
}

}  // namespace detail

// Builds the full differentiable pipeline: extractor -> sigmoid routing
// scores -> path-product leaf weights -> convex-combination predictions,
// averaged over trees.
inline ForestPass forward_batch(const Forest& f, const Tensor& batch, PassOptions opts = {}) {
  if (f.trees.empty()) throw std::invalid_argument("forest: empty forest");
  ForestPass pass;
  pass.graph = std::make_unique<Graph>();
  Graph& g = *pass.graph;
  pass.input = g.leaf(batch, opts.input_grad);
  pass.features = f.extractor.build(g, pass.input, opts.train ? &pass.param_ids : nullptr);

  Var acc;
  for (const Tree& tree : f.trees) {
    Var units = detail::gather_columns(pass.features, tree.assign.units);
    Var s = sigmoid(units);
    Var w = detail::tree_weights_graph(g, s, tree.topo);
    const bool leaf_grad = opts.train && f.mode == TaskMode::regression;
    Var leaves = g.leaf(tree.leaves.values, leaf_grad);
    if (leaf_grad) pass.param_ids.push_back(leaves.id);
    Var p = matmul(w, leaves);
    pass.scores.push_back(s);
    pass.weights.push_back(w);
    pass.leaf_stores.push_back(leaves);
    acc = acc.valid() ? acc + p : p;
  }
  pass.prediction = f.tree_count() == 1 ? acc : scale(acc, 1.0 / f.tree_count());
  return pass;
}

// Plain-value prediction for a batch; no gradients recorded.
inline Tensor forest_predict_batch(const Forest& f, const Tensor& batch) {
  return forward_batch(f, batch).prediction.value();
}

// Lifts a single sample to a batch of one and returns the prediction vector.
inline std::vector<double> forest_predict(const Forest& f, const Tensor& sample) {
  Shape batched = sample.shape;
  batched.insert(batched.begin(), 1);
  Tensor b = sample;
  b.shape = batched;
  return forest_predict_batch(f, b).data;
}

// Routing snapshot (scores, weights, greedy path) of one tree for one sample.
inline RoutingState forest_route(const Forest& f, const Tensor& sample, int tree_index) {
  if (tree_index < 0 || tree_index >= f.tree_count())
    throw std::invalid_argument("forest: tree index out of range");
  Shape batched = sample.shape;
  batched.insert(batched.begin(), 1);
  Tensor b = sample;
  b.shape = batched;
  ForestPass pass = forward_batch(f, b);
  return route(f.trees[tree_index].topo, pass.scores[tree_index].value().data);
}

// Forest-level multiplicative leaf update over buffered sample chunks, one
// independent update per tree with routing weights taken under the current
// extractor parameters. Chunks bound the forward-pass working set.
inline void leaf_update_classification(Forest& f, std::span<const Tensor> input_chunks,
                                       std::span<const std::vector<int>> label_chunks,
                                       double eps = 1e-12) {
  if (f.mode != TaskMode::classification)
    throw std::invalid_argument("leaf update: forest is not a classifier");
  if (input_chunks.size() != label_chunks.size())
    throw std::invalid_argument("leaf update: chunk count mismatch");
  const int trees = f.tree_count();
  std::vector<std::vector<std::vector<double>>> weights(static_cast<size_t>(trees));
  std::vector<int> labels;
  for (size_t c = 0; c < input_chunks.size(); ++c) {
    ForestPass pass = forward_batch(f, input_chunks[c]);
    const int64_t n = input_chunks[c].shape[0];
    for (int t = 0; t < trees; ++t) {
      const Tensor& s = pass.scores[t].value();
      const int splits = f.trees[t].topo.split_count();
      for (int64_t i = 0; i < n; ++i) {
        std::span<const double> row{s.data.data() + i * splits, static_cast<size_t>(splits)};
        weights[static_cast<size_t>(t)].push_back(leaf_weights(f.trees[t].topo, row));
      }
    }
    labels.insert(labels.end(), label_chunks[c].begin(), label_chunks[c].end());
  }
  for (int t = 0; t < trees; ++t)
    leaf_update_classification(f.trees[t].leaves, weights[static_cast<size_t>(t)], labels, eps);
}

inline void leaf_update_classification(Forest& f, const Tensor& inputs,
                                       std::span<const int> labels, double eps = 1e-12) {
  std::vector<int> l(labels.begin(), labels.end());
  leaf_update_classification(f, std::span<const Tensor>{&inputs, 1},
                             std::span<const std::vector<int>>{&l, 1}, eps);
}

}  // namespace ndf
