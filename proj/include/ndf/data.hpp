#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ndf/idx.hpp"
#include "ndf/tensor.hpp"

namespace ndf {

struct ClassDataset {
  Tensor inputs;  // (count, ...) row-major
  std::vector<int> labels;
  int classes = 0;

  int64_t count() const { return inputs.shape[0]; }
};

struct RegrDataset {
  Tensor inputs;   // (count, ...)
  Tensor targets;  // (count, dim)

  int64_t count() const { return inputs.shape[0]; }
};

// Copies the selected first-axis rows into a new tensor.
inline Tensor gather_rows(const Tensor& all, std::span<const int> idx) {
  const int64_t row = numel(all.shape) / all.shape[0];
  Shape shape = all.shape;
  shape[0] = static_cast<int64_t>(idx.size());
  Tensor out(shape);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(all.data.data() + static_cast<int64_t>(idx[i]) * row, row,
                out.data.data() + static_cast<int64_t>(i) * row);
  return out;
}

inline Tensor nth_row(const Tensor& all, int64_t i) {
  const int64_t row = numel(all.shape) / all.shape[0];
  Shape shape(all.shape.begin() + 1, all.shape.end());
  Tensor out(shape);
  std::copy_n(all.data.data() + i * row, row, out.data.data());
  return out;
}

// Two linearly separable 2-d point clouds, deterministic under seed.
// Labels alternate so every prefix is roughly balanced.
inline ClassDataset make_blob_dataset(int count, uint64_t seed) {
  if (count < 1) throw std::invalid_argument("blob dataset: count must be >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  ClassDataset d;
  d.classes = 2;
  d.inputs = Tensor({count, 2});
  for (int i = 0; i < count; ++i) {
    const int label = i % 2;
    const double cx = label == 0 ? -2.0 : 2.0;
    const double cy = label == 0 ? -2.0 : 2.0;
    d.inputs.data[2 * static_cast<size_t>(i)] = cx + jitter(rng);
    d.inputs.data[2 * static_cast<size_t>(i) + 1] = cy + jitter(rng);
    d.labels.push_back(label);
  }
  return d;
}

namespace detail {

inline std::string find_idx_file(const std::string& dir, const std::string& stem) {
  namespace fs = std::filesystem;
  for (const char* sep : {"-", "."}) {
    fs::path p = fs::path(dir) / (stem + sep + (stem.find("images") != std::string::npos
                                                    ? "idx3-ubyte"
                                                    : "idx1-ubyte"));
    if (fs::exists(p)) return p.string();
  }
  throw data_error("mnist: missing " + stem + "-idx[13]-ubyte under " + dir);
}

}  // namespace detail

inline bool mnist_available(const std::string& dir) {
  try {
    detail::find_idx_file(dir, "train-images");
    detail::find_idx_file(dir, "train-labels");
    detail::find_idx_file(dir, "t10k-images");
    detail::find_idx_file(dir, "t10k-labels");
    return true;
  } catch (const data_error&) {
    return false;
  }
}

// Loads one MNIST split as (count, 1, 28, 28) images normalized to
// [-0.5, 0.5] (x/255 - 0.5) plus integer labels.
inline ClassDataset load_mnist(const std::string& dir, bool train, int limit = -1) {
  const std::string prefix = train ? "train" : "t10k";
  IdxTensor images = load_idx_file(detail::find_idx_file(dir, prefix + "-images"));
  IdxTensor labels = load_idx_file(detail::find_idx_file(dir, prefix + "-labels"));
  if (images.dims.size() != 3 || images.dims[1] != 28 || images.dims[2] != 28)
    throw data_error("mnist: unexpected image dims");
  if (labels.dims.size() != 1 || labels.dims[0] != images.dims[0])
    throw data_error("mnist: image/label count mismatch");
  int64_t n = images.dims[0];
  if (limit > 0 && limit < n) n = limit;
  ClassDataset d;
  d.classes = 10;
  d.inputs = Tensor({n, 1, 28, 28});
  const size_t pixels = 28 * 28;
  for (int64_t i = 0; i < n; ++i) {
    const uint8_t* src = images.payload.data() + static_cast<size_t>(i) * pixels;
    double* dst = d.inputs.data.data() + static_cast<size_t>(i) * pixels;
    for (size_t p = 0; p < pixels; ++p) dst[p] = src[p] / 255.0 - 0.5;
    d.labels.push_back(labels.payload[static_cast<size_t>(i)]);
  }
  return d;
}

}  // namespace ndf
