#pragma once

#include <cmath>
#include <deque>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <vector>

#include "ndf/data.hpp"
#include "ndf/forest.hpp"

namespace ndf {

// ---- losses ------------------------------------------------------------

// Mean negative log-likelihood of the labeled class probabilities, with a
// 1e-12 probability floor before the log.
inline Var nll_loss(Var pred, std::span<const int> labels, double eps = 1e-12) {
  const Shape& s = pred.shape();
  if (s.size() != 2)
    throw std::invalid_argument("nll_loss: predictions must be (N, classes), got " +
                                shape_str(s));
  const int64_t n = s[0], classes = s[1];
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument("nll_loss: batch has " + std::to_string(n) + " rows but " +
                                std::to_string(labels.size()) + " labels");
  Tensor onehot({n, classes}, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= classes)
      throw std::invalid_argument("nll_loss: label " + std::to_string(y) + " out of range");
    onehot.data[static_cast<size_t>(i * classes + y)] = 1.0;
  }
  Graph& g = *pred.graph;
  Var picked = matmul(pred * g.constant(std::move(onehot)), g.constant_full({classes, 1}, 1.0));
  return scale(sum(log(floor_at(picked, eps))), -1.0 / static_cast<double>(n));
}

// Half the mean squared Euclidean distance between predictions and targets.
inline Var squared_loss(Var pred, const Tensor& targets) {
  if (pred.shape() != targets.shape)
    throw std::invalid_argument("squared_loss: shape mismatch: " + shape_str(pred.shape()) +
                                " vs " + shape_str(targets.shape));
  const int64_t n = pred.shape()[0];
  Var diff = pred - pred.graph->constant(targets);
  return scale(sum(diff * diff), 0.5 / static_cast<double>(n));
}

// Plain-value twins used for metrics outside any graph.
inline double nll_value(const Tensor& pred, std::span<const int> labels, double eps = 1e-12) {
  const int64_t n = pred.shape[0], classes = pred.shape[1];
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i)
    total -= std::log(std::max(pred.data[static_cast<size_t>(i * classes + labels[i])], eps));
  return total / static_cast<double>(n);
}

inline int argmax_row(const Tensor& pred, int64_t row) {
  const int64_t classes = pred.shape[1];
  const double* p = pred.data.data() + row * classes;
  int best = 0;
  for (int64_t j = 1; j < classes; ++j)
    if (p[j] > p[best]) best = static_cast<int>(j);
  return best;
}

// ---- optimizer -----------------------------------------------------------

// Adam with bias correction. Moment buffers mirror the parameter shapes and
// are allocated on the first step.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;
};

inline void adam_step(AdamState& state, std::span<Tensor* const> params,
                      std::span<const Tensor> grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam: params/grads size mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->data.size(), 0.0);
      state.v.emplace_back(p->data.size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam: state tracks a different parameter set");
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (g.data.size() != p.data.size())
      throw std::invalid_argument("adam: gradient shape mismatch at parameter " +
                                  std::to_string(i));
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (size_t j = 0; j < p.data.size(); ++j) {
      const double gj = g.data[j];
      if (!std::isfinite(gj))
        throw numeric_error("adam: non-finite gradient at parameter " + std::to_string(i) +
                            "[" + std::to_string(j) + "], step " + std::to_string(state.t));
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p.data[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---- training loops -------------------------------------------------------

struct TrainConfig {
  TaskMode mode = TaskMode::classification;
  int epochs = 10;
  int batch_size = 64;
  uint64_t seed = 0;
  int leaf_update_period = 50;  // batches between leaf updates
  double lr = 1e-3;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
    if (leaf_update_period < 1)
      throw std::invalid_argument("train config: leaf update period must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  }
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = -1.0;  // < 0 when not applicable

  std::string to_json_line() const {
    std::ostringstream os;
    os << std::setprecision(17) << "{\"epoch\":" << epoch << ",\"loss\":" << loss;
    if (accuracy >= 0.0) os << ",\"accuracy\":" << accuracy;
    os << "}";
    return os.str();
  }
};

namespace detail {

inline std::vector<Tensor> collect_grads(const ForestPass& pass) {
  std::vector<Tensor> grads;
  grads.reserve(pass.param_ids.size());
  for (int id : pass.param_ids) grads.push_back(pass.graph->grad_of(Var{pass.graph.get(), id}));
  return grads;
}

inline void emit(std::ostream* out, const EpochMetrics& m) {
  if (out) *out << m.to_json_line() << "\n" << std::flush;
}

}  // namespace detail

// Alternating optimization: every batch back-propagates through scores and
// extractor with leaves frozen; every leaf_update_period batches the leaf
// distributions are re-estimated from a buffer of the most recent batches.
inline std::vector<EpochMetrics> train_classifier(Forest& forest, const ClassDataset& data,
                                                  const TrainConfig& config,
                                                  std::ostream* metrics_out = nullptr) {
  config.validate();
  if (forest.mode != TaskMode::classification || config.mode != TaskMode::classification)
    throw std::invalid_argument("train_classifier: not a classification setup");
  if (data.count() == 0) throw std::invalid_argument("train_classifier: empty dataset");

  std::vector<Tensor*> params = forest.parameters();
  AdamState adam;
  adam.lr = config.lr;
  Rng rng(config.seed);
  std::deque<std::pair<Tensor, std::vector<int>>> buffer;
  int64_t batches_seen = 0;

  std::vector<EpochMetrics> history;
  std::vector<int> order(static_cast<size_t>(data.count()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int64_t correct = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), off + static_cast<size_t>(config.batch_size));
      std::span<const int> idx{order.data() + off, end - off};
      Tensor batch = gather_rows(data.inputs, idx);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (int i : idx) labels.push_back(data.labels[static_cast<size_t>(i)]);

      ForestPass pass = forward_batch(forest, batch, {.train = true});
      Var loss = nll_loss(pass.prediction, labels);
      pass.graph->backward(loss);
      std::vector<Tensor> grads = detail::collect_grads(pass);
      adam_step(adam, params, grads);

      const Tensor& pred = pass.prediction.value();
      for (size_t i = 0; i < labels.size(); ++i)
        if (argmax_row(pred, static_cast<int64_t>(i)) == labels[i]) ++correct;
      loss_sum += loss.value()[0] * static_cast<double>(labels.size());

      buffer.emplace_back(std::move(batch), std::move(labels));
      if (static_cast<int>(buffer.size()) > config.leaf_update_period) buffer.pop_front();
      if (++batches_seen % config.leaf_update_period == 0) {
        std::vector<Tensor> chunks;
        std::vector<std::vector<int>> chunk_labels;
        for (const auto& [b, l] : buffer) {
          chunks.push_back(b);
          chunk_labels.push_back(l);
        }
        leaf_update_classification(forest, chunks, chunk_labels);
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(data.count());
    m.accuracy = static_cast<double>(correct) / static_cast<double>(data.count());
    detail::emit(metrics_out, m);
    history.push_back(m);
  }
  return history;
}

// Joint gradient training: extractor parameters and leaf vectors both move
// by Adam on the squared loss.
inline std::vector<EpochMetrics> train_regressor(Forest& forest, const RegrDataset& data,
                                                 const TrainConfig& config,
                                                 std::ostream* metrics_out = nullptr) {
  config.validate();
  if (forest.mode != TaskMode::regression || config.mode != TaskMode::regression)
    throw std::invalid_argument("train_regressor: not a regression setup");
  if (data.count() == 0) throw std::invalid_argument("train_regressor: empty dataset");

  std::vector<Tensor*> params = forest.parameters();
  AdamState adam;
  adam.lr = config.lr;
  Rng rng(config.seed);
  std::vector<EpochMetrics> history;
  std::vector<int> order(static_cast<size_t>(data.count()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), off + static_cast<size_t>(config.batch_size));
      std::span<const int> idx{order.data() + off, end - off};
      Tensor batch = gather_rows(data.inputs, idx);
      Tensor targets = gather_rows(data.targets, idx);

      ForestPass pass = forward_batch(forest, batch, {.train = true});
      Var loss = squared_loss(pass.prediction, targets);
      pass.graph->backward(loss);
      std::vector<Tensor> grads = detail::collect_grads(pass);
      adam_step(adam, params, grads);
      loss_sum += loss.value()[0] * static_cast<double>(idx.size());
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(data.count());
    detail::emit(metrics_out, m);
    history.push_back(m);
  }
  return history;
}

// Argmax accuracy over a dataset, evaluated in bounded chunks.
inline double classification_accuracy(const Forest& forest, const ClassDataset& data,
                                      int chunk = 256) {
  int64_t correct = 0;
  std::vector<int> idx;
  for (int64_t off = 0; off < data.count(); off += chunk) {
    idx.clear();
    for (int64_t i = off; i < std::min(data.count(), off + chunk); ++i)
      idx.push_back(static_cast<int>(i));
    Tensor pred = forest_predict_batch(forest, gather_rows(data.inputs, idx));
    for (size_t i = 0; i < idx.size(); ++i)
      if (argmax_row(pred, static_cast<int64_t>(i)) == data.labels[static_cast<size_t>(idx[i])])
        ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.count());
}

}  // namespace ndf
