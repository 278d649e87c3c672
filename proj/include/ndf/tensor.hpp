#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ndf/common.hpp"

namespace ndf {

// Extents of a dense row-major array.
using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// Dense n-dimensional array of 64-bit reals, row-major. Optionally carries a
// gradient buffer of the same length.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until allocated

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
    validate_shape();
    data.assign(static_cast<size_t>(numel(shape)), fill);
  }

  static Tensor from(Shape s, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(s);
    t.validate_shape();
    if (numel(t.shape) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("tensor: shape " + shape_str(t.shape) + " does not match " +
                                  std::to_string(values.size()) + " values");
    t.data = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  int64_t size() const { return static_cast<int64_t>(data.size()); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool has_grad() const { return !grad.empty(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() {
    if (!grad.empty()) grad.assign(data.size(), 0.0);
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void validate_shape() const {
    if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
    for (int64_t e : shape)
      if (e <= 0)
        throw std::invalid_argument("tensor: non-positive extent in shape " + shape_str(shape));
  }
};

// Uniform init in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

}  // namespace ndf
