#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ndf/tensor.hpp"

namespace ndf {

// Primitive operations of the tape. Every primitive has an exact
// vector-Jacobian product rule implemented in Graph::backward_node.
enum class PrimitiveKind {
  add,
  sub,
  mul,  // elementwise
  matmul,
  conv2d,
  maxpool2d,
  relu,
  sigmoid,
  log,
  sum,  // full reduction to a scalar
  reshape,
  slice,
  concat,
  scale,  // multiply by a compile-time constant
};

inline const char* primitive_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::add: return "add";
    case PrimitiveKind::sub: return "sub";
    case PrimitiveKind::mul: return "mul";
    case PrimitiveKind::matmul: return "matmul";
    case PrimitiveKind::conv2d: return "conv2d";
    case PrimitiveKind::maxpool2d: return "maxpool2d";
    case PrimitiveKind::relu: return "relu";
    case PrimitiveKind::sigmoid: return "sigmoid";
    case PrimitiveKind::log: return "log";
    case PrimitiveKind::sum: return "sum";
    case PrimitiveKind::reshape: return "reshape";
    case PrimitiveKind::slice: return "slice";
    case PrimitiveKind::concat: return "concat";
    case PrimitiveKind::scale: return "scale";
  }
  return "?";
}

struct OpAttrs {
  int stride = 1;      // conv2d
  int pad = 0;         // conv2d, zeros only
  int axis = 0;        // slice, concat
  int64_t start = 0;   // slice
  int64_t stop = 0;    // slice, exclusive
  double scalar = 0.0; // scale
  Shape target;        // reshape
};

// One entry of the recorded tape. Leaves carry no op; interior nodes store
// the primitive, its parents (by id) and the eagerly computed output.
struct GraphNode {
  PrimitiveKind kind = PrimitiveKind::add;
  bool leaf = false;
  bool needs_grad = false;  // grad flows to or through this node
  std::vector<int> parents;
  OpAttrs attrs;
  Tensor output;
  std::vector<int64_t> aux;  // maxpool2d argmax, flat input offsets
};

class Graph;

// Lightweight handle to a node of one graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const;
  int64_t size() const;
};

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

[[noreturn]] inline void shape_fail(PrimitiveKind k, const std::string& detail) {
  throw std::invalid_argument(std::string(primitive_name(k)) + ": " + detail);
}

inline void require(bool ok, PrimitiveKind k, const std::string& detail) {
  if (!ok) shape_fail(k, detail);
}

}  // namespace detail

// Reverse-mode tape over dense tensors. Values are computed eagerly as nodes
// are appended; creation order is a topological order, so backward walks ids
// in reverse. Single-threaded per instance.
class Graph {
 public:
  Var leaf(Tensor t, bool requires_grad = false) {
    GraphNode n;
    n.leaf = true;
    n.needs_grad = requires_grad;
    n.output = std::move(t);
    n.output.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var constant(Tensor t) { return leaf(std::move(t), false); }

  Var constant_full(Shape shape, double fill) { return constant(Tensor(std::move(shape), fill)); }

  Var apply(PrimitiveKind kind, std::vector<int> parents, OpAttrs attrs = {}) {
    GraphNode n;
    n.kind = kind;
    n.parents = std::move(parents);
    n.attrs = std::move(attrs);
    std::vector<const Tensor*> in;
    in.reserve(n.parents.size());
    for (int p : n.parents) {
      check_id(p);
      in.push_back(&nodes_[p].output);
      n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    }
    n.output = evaluate(kind, n.attrs, in, n.aux);
    n.output.requires_grad = n.needs_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // Seeds d(root)/d(root) = 1 and accumulates vector-Jacobian products down
  // the tape. Gradients add up across fan-out and across repeated calls;
  // call zero_grad() between independent backward passes.
  void backward(Var root) {
    check_id(root.id);
    const Tensor& r = nodes_[root.id].output;
    if (r.size() != 1)
      throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                  shape_str(r.shape));
    mark_reached(root.id);
    GraphNode& rn = nodes_[root.id];
    if (rn.needs_grad) {
      rn.output.ensure_grad();
      rn.output.grad[0] += 1.0;
    }
    for (int id = root.id; id >= 0; --id) {
      GraphNode& n = nodes_[id];
      if (!reached_[id] || n.leaf || !n.needs_grad || !n.output.has_grad()) continue;
      backward_node(n);
    }
    last_root_ = root.id;
  }

  void zero_grad() {
    for (GraphNode& n : nodes_) n.output.zero_grad();
  }

  // Gradient of the last backward root with respect to `wrt`, reshaped to
  // wrt's shape. A node the sweep never reached yields zeros and sets
  // `reached` to false instead of failing.
  Tensor grad_of(Var wrt, bool* reached = nullptr) const {
    check_id(wrt.id);
    if (last_root_ < 0)
      throw std::logic_error("grad_of: backward has not been run on this graph");
    const GraphNode& n = nodes_[wrt.id];
    bool hit = wrt.id < static_cast<int>(reached_.size()) && reached_[wrt.id] &&
               n.needs_grad && n.output.has_grad();
    if (reached) *reached = hit;
    Tensor g(n.output.shape, 0.0);
    if (hit) g.data = n.output.grad;
    return g;
  }

  bool grad_reached(Var wrt) const {
    bool hit = false;
    grad_of(wrt, &hit);
    return hit;
  }

  // Recomputes every interior node from the stored tape and checks the
  // results against the recorded outputs bit for bit.
  bool verify_replay() const {
    for (const GraphNode& n : nodes_) {
      if (n.leaf) continue;
      std::vector<const Tensor*> in;
      in.reserve(n.parents.size());
      for (int p : n.parents) in.push_back(&nodes_[p].output);
      std::vector<int64_t> aux;
      Tensor out = evaluate(n.kind, n.attrs, in, aux);
      if (out.data != n.output.data) return false;
    }
    return true;
  }

  const Tensor& value(int id) const {
    check_id(id);
    return nodes_[id].output;
  }

  const GraphNode& node(int id) const {
    check_id(id);
    return nodes_[id];
  }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  std::vector<GraphNode> nodes_;
  std::vector<char> reached_;
  int last_root_ = -1;

  void check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw std::out_of_range("graph: bad node id " + std::to_string(id));
  }

  void mark_reached(int root) {
    reached_.assign(nodes_.size(), 0);
    std::deque<int> queue{root};
    reached_[root] = 1;
    while (!queue.empty()) {
      int id = queue.front();
      queue.pop_front();
      for (int p : nodes_[id].parents) {
        if (!reached_[p]) {
          reached_[p] = 1;
          queue.push_back(p);
        }
      }
    }
  }

  Tensor& grad_target(int id) {
    GraphNode& p = nodes_[id];
    p.output.ensure_grad();
    return p.output;
  }

  // ---- forward kernels ------------------------------------------------

  static Tensor evaluate(PrimitiveKind kind, const OpAttrs& attrs,
                         std::span<const Tensor* const> in, std::vector<int64_t>& aux) {
    using detail::require;
    switch (kind) {
      case PrimitiveKind::add:
      case PrimitiveKind::sub:
      case PrimitiveKind::mul: {
        require(in.size() == 2, kind, "expects 2 inputs");
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        require(a.shape == b.shape, kind,
                "shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
        Tensor out(a.shape);
        const size_t n = a.data.size();
        if (kind == PrimitiveKind::add)
          for (size_t i = 0; i < n; ++i) out.data[i] = a.data[i] + b.data[i];
        else if (kind == PrimitiveKind::sub)
          for (size_t i = 0; i < n; ++i) out.data[i] = a.data[i] - b.data[i];
        else
          for (size_t i = 0; i < n; ++i) out.data[i] = a.data[i] * b.data[i];
        return out;
      }
      case PrimitiveKind::matmul: {
        require(in.size() == 2, kind, "expects 2 inputs");
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        require(a.shape.size() == 2 && b.shape.size() == 2, kind,
                "expects 2-d operands, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
        require(a.shape[1] == b.shape[0], kind,
                "inner dimensions differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
        const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
        Tensor out({m, n});
        for (int64_t i = 0; i < m; ++i) {
          const double* arow = a.data.data() + i * k;
          double* orow = out.data.data() + i * n;
          for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b.data.data() + kk * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
          }
        }
        return out;
      }
      case PrimitiveKind::conv2d:
        return conv2d_forward(attrs, in);
      case PrimitiveKind::maxpool2d:
        return maxpool2d_forward(in, aux);
      case PrimitiveKind::relu: {
        require(in.size() == 1, kind, "expects 1 input");
        Tensor out = *in[0];
        out.grad.clear();
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
        return out;
      }
      case PrimitiveKind::sigmoid: {
        require(in.size() == 1, kind, "expects 1 input");
        Tensor out = *in[0];
        out.grad.clear();
        for (double& v : out.data) v = detail::stable_sigmoid(v);
        return out;
      }
      case PrimitiveKind::log: {
        require(in.size() == 1, kind, "expects 1 input");
        Tensor out = *in[0];
        out.grad.clear();
        for (double& v : out.data) v = std::log(v);
        return out;
      }
      case PrimitiveKind::sum: {
        require(in.size() == 1, kind, "expects 1 input");
        double acc = 0.0;
        for (double v : in[0]->data) acc += v;
        return Tensor::scalar(acc);
      }
      case PrimitiveKind::reshape: {
        require(in.size() == 1, kind, "expects 1 input");
        require(numel(attrs.target) == in[0]->size(), kind,
                "cannot reshape " + shape_str(in[0]->shape) + " to " + shape_str(attrs.target));
        Tensor out = *in[0];
        out.grad.clear();
        out.shape = attrs.target;
        return out;
      }
      case PrimitiveKind::slice:
        return slice_forward(attrs, in);
      case PrimitiveKind::concat:
        return concat_forward(attrs, in);
      case PrimitiveKind::scale: {
        require(in.size() == 1, kind, "expects 1 input");
        Tensor out = *in[0];
        out.grad.clear();
        for (double& v : out.data) v *= attrs.scalar;
        return out;
      }
    }
    detail::shape_fail(kind, "unhandled primitive");
  }

  static Tensor conv2d_forward(const OpAttrs& attrs, std::span<const Tensor* const> in) {
    constexpr auto K = PrimitiveKind::conv2d;
    using detail::require;
    require(in.size() == 2 || in.size() == 3, K, "expects input, weight [, bias]");
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    require(x.shape.size() == 4, K, "input must be (N,C,H,W), got " + shape_str(x.shape));
    require(w.shape.size() == 4, K, "weight must be (K,C,kh,kw), got " + shape_str(w.shape));
    require(x.shape[1] == w.shape[1], K,
            "channel mismatch: input " + shape_str(x.shape) + " vs weight " + shape_str(w.shape));
    require(attrs.stride == 1 || attrs.stride == 2, K, "stride must be 1 or 2");
    require(attrs.pad >= 0, K, "pad must be non-negative");
    const int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const int64_t ko = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int64_t s = attrs.stride, p = attrs.pad;
    const int64_t oh = (h + 2 * p - kh) / s + 1;
    const int64_t ow = (wd + 2 * p - kw) / s + 1;
    require(h + 2 * p >= kh && wd + 2 * p >= kw, K,
            "kernel " + shape_str(w.shape) + " larger than padded input " + shape_str(x.shape));
    const double* bias = nullptr;
    if (in.size() == 3) {
      require(in[2]->shape.size() == 1 && in[2]->shape[0] == ko, K,
              "bias must be (" + std::to_string(ko) + "), got " + shape_str(in[2]->shape));
      bias = in[2]->data.data();
    }
    Tensor out({n, ko, oh, ow});
    for (int64_t ni = 0; ni < n; ++ni) {
      for (int64_t k = 0; k < ko; ++k) {
        double* oplane = out.data.data() + ((ni * ko + k) * oh) * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          for (int64_t ox = 0; ox < ow; ++ox) {
            double acc = bias ? bias[k] : 0.0;
            for (int64_t ci = 0; ci < c; ++ci) {
              const double* xplane = x.data.data() + ((ni * c + ci) * h) * wd;
              const double* wplane = w.data.data() + ((k * c + ci) * kh) * kw;
              for (int64_t fy = 0; fy < kh; ++fy) {
                const int64_t iy = oy * s + fy - p;
                if (iy < 0 || iy >= h) continue;
                for (int64_t fx = 0; fx < kw; ++fx) {
                  const int64_t ix = ox * s + fx - p;
                  if (ix < 0 || ix >= wd) continue;
                  acc += xplane[iy * wd + ix] * wplane[fy * kw + fx];
                }
              }
            }
            oplane[oy * ow + ox] = acc;
          }
        }
      }
    }
    return out;
  }

  // 2x2 window, stride 2; trailing odd row/column is dropped.
  static Tensor maxpool2d_forward(std::span<const Tensor* const> in, std::vector<int64_t>& aux) {
    constexpr auto K = PrimitiveKind::maxpool2d;
    using detail::require;
    require(in.size() == 1, K, "expects 1 input");
    const Tensor& x = *in[0];
    require(x.shape.size() == 4, K, "input must be (N,C,H,W), got " + shape_str(x.shape));
    const int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    require(h >= 2 && w >= 2, K, "spatial extents must be >= 2, got " + shape_str(x.shape));
    const int64_t oh = h / 2, ow = w / 2;
    Tensor out({n, c, oh, ow});
    aux.assign(static_cast<size_t>(out.size()), 0);
    int64_t oi = 0;
    for (int64_t ni = 0; ni < n; ++ni) {
      for (int64_t ci = 0; ci < c; ++ci) {
        const int64_t plane = (ni * c + ci) * h * w;
        for (int64_t oy = 0; oy < oh; ++oy) {
          for (int64_t ox = 0; ox < ow; ++ox, ++oi) {
            int64_t best = plane + (2 * oy) * w + 2 * ox;
            double bv = x.data[best];
            const int64_t cand[3] = {best + 1, best + w, best + w + 1};
            for (int64_t idx : cand) {
              if (x.data[idx] > bv) {
                bv = x.data[idx];
                best = idx;
              }
            }
            out.data[oi] = bv;
            aux[static_cast<size_t>(oi)] = best;
          }
        }
      }
    }
    return out;
  }

  static Tensor slice_forward(const OpAttrs& attrs, std::span<const Tensor* const> in) {
    constexpr auto K = PrimitiveKind::slice;
    using detail::require;
    require(in.size() == 1, K, "expects 1 input");
    const Tensor& x = *in[0];
    const int axis = attrs.axis;
    require(axis >= 0 && axis < static_cast<int>(x.shape.size()), K,
            "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape));
    require(attrs.start >= 0 && attrs.start < attrs.stop && attrs.stop <= x.shape[axis], K,
            "range [" + std::to_string(attrs.start) + "," + std::to_string(attrs.stop) +
                ") invalid for axis extent " + std::to_string(x.shape[axis]));
    Shape oshape = x.shape;
    oshape[axis] = attrs.stop - attrs.start;
    Tensor out(oshape);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[i];
    for (size_t i = axis + 1; i < x.shape.size(); ++i) inner *= x.shape[i];
    const int64_t span_in = x.shape[axis] * inner;
    const int64_t span_out = oshape[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(x.data.data() + o * span_in + attrs.start * inner, span_out,
                  out.data.data() + o * span_out);
    return out;
  }

  static Tensor concat_forward(const OpAttrs& attrs, std::span<const Tensor* const> in) {
    constexpr auto K = PrimitiveKind::concat;
    using detail::require;
    require(!in.empty(), K, "expects at least 1 input");
    const Shape& first = in[0]->shape;
    const int axis = attrs.axis;
    require(axis >= 0 && axis < static_cast<int>(first.size()), K,
            "axis " + std::to_string(axis) + " out of range for " + shape_str(first));
    int64_t total_axis = 0;
    for (const Tensor* t : in) {
      require(t->shape.size() == first.size(), K,
              "rank mismatch: " + shape_str(first) + " vs " + shape_str(t->shape));
      for (size_t i = 0; i < first.size(); ++i)
        require(static_cast<int>(i) == axis || t->shape[i] == first[i], K,
                "shape mismatch off the concat axis: " + shape_str(first) + " vs " +
                    shape_str(t->shape));
      total_axis += t->shape[axis];
    }
    Shape oshape = first;
    oshape[axis] = total_axis;
    Tensor out(oshape);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first[i];
    for (size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    const int64_t out_span = total_axis * inner;
    int64_t offset = 0;
    for (const Tensor* t : in) {
      const int64_t span = t->shape[axis] * inner;
      for (int64_t o = 0; o < outer; ++o)
        std::copy_n(t->data.data() + o * span, span, out.data.data() + o * out_span + offset);
      offset += span;
    }
    return out;
  }

  // ---- vector-Jacobian products ---------------------------------------

  void backward_node(GraphNode& n) {
    const std::vector<double>& g = n.output.grad;
    switch (n.kind) {
      case PrimitiveKind::add:
      case PrimitiveKind::sub: {
        const double sign1 = n.kind == PrimitiveKind::add ? 1.0 : -1.0;
        if (nodes_[n.parents[0]].needs_grad) {
          Tensor& p = grad_target(n.parents[0]);
          for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
        }
        if (nodes_[n.parents[1]].needs_grad) {
          Tensor& p = grad_target(n.parents[1]);
          for (size_t i = 0; i < g.size(); ++i) p.grad[i] += sign1 * g[i];
        }
        break;
      }
      case PrimitiveKind::mul: {
        const Tensor& a = nodes_[n.parents[0]].output;
        const Tensor& b = nodes_[n.parents[1]].output;
        if (nodes_[n.parents[0]].needs_grad) {
          Tensor& p = grad_target(n.parents[0]);
          for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i] * b.data[i];
        }
        if (nodes_[n.parents[1]].needs_grad) {
          Tensor& p = grad_target(n.parents[1]);
          for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i] * a.data[i];
        }
        break;
      }
      case PrimitiveKind::matmul: {
        const Tensor& a = nodes_[n.parents[0]].output;
        const Tensor& b = nodes_[n.parents[1]].output;
        const int64_t m = a.shape[0], k = a.shape[1], nn = b.shape[1];
        if (nodes_[n.parents[0]].needs_grad) {
          Tensor& pa = grad_target(n.parents[0]);  // dA = g . B^T
          for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              const double* grow = g.data() + i * nn;
              const double* brow = b.data.data() + kk * nn;
              for (int64_t j = 0; j < nn; ++j) acc += grow[j] * brow[j];
              pa.grad[i * k + kk] += acc;
            }
        }
        if (nodes_[n.parents[1]].needs_grad) {
          Tensor& pb = grad_target(n.parents[1]);  // dB = A^T . g
          for (int64_t kk = 0; kk < k; ++kk)
            for (int64_t i = 0; i < m; ++i) {
              const double av = a.data[i * k + kk];
              if (av == 0.0) continue;
              const double* grow = g.data() + i * nn;
              double* prow = pb.grad.data() + kk * nn;
              for (int64_t j = 0; j < nn; ++j) prow[j] += av * grow[j];
            }
        }
        break;
      }
      case PrimitiveKind::conv2d:
        conv2d_backward(n);
        break;
      case PrimitiveKind::maxpool2d: {
        if (!nodes_[n.parents[0]].needs_grad) break;
        Tensor& p = grad_target(n.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) p.grad[static_cast<size_t>(n.aux[i])] += g[i];
        break;
      }
      case PrimitiveKind::relu: {
        if (!nodes_[n.parents[0]].needs_grad) break;
        const Tensor& x = nodes_[n.parents[0]].output;
        Tensor& p = grad_target(n.parents[0]);
        for (size_t i = 0; i < g.size(); ++i)
          if (x.data[i] > 0.0) p.grad[i] += g[i];
        break;
      }
      case PrimitiveKind::sigmoid: {
        if (!nodes_[n.parents[0]].needs_grad) break;
        Tensor& p = grad_target(n.parents[0]);
        const std::vector<double>& s = n.output.data;
        for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i] * s[i] * (1.0 - s[i]);
        break;
      }
      case PrimitiveKind::log: {
        if (!nodes_[n.parents[0]].needs_grad) break;
        const Tensor& x = nodes_[n.parents[0]].output;
        Tensor& p = grad_target(n.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i] / x.data[i];
        break;
      }
      case PrimitiveKind::sum: {
        if (!nodes_[n.parents[0]].needs_grad) break;
        Tensor& p = grad_target(n.parents[0]);
        const double gv = g[0];
        for (double& pg : p.grad) pg += gv;
        break;
      }
      case PrimitiveKind::reshape: {
        if (!nodes_[n.parents[0]].needs_grad) break;
        Tensor& p = grad_target(n.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
        break;
      }
      case PrimitiveKind::slice: {
        if (!nodes_[n.parents[0]].needs_grad) break;
        const Tensor& x = nodes_[n.parents[0]].output;
        Tensor& p = grad_target(n.parents[0]);
        const int axis = n.attrs.axis;
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= x.shape[i];
        for (size_t i = axis + 1; i < x.shape.size(); ++i) inner *= x.shape[i];
        const int64_t span_in = x.shape[axis] * inner;
        const int64_t span_out = (n.attrs.stop - n.attrs.start) * inner;
        for (int64_t o = 0; o < outer; ++o) {
          double* dst = p.grad.data() + o * span_in + n.attrs.start * inner;
          const double* src = g.data() + o * span_out;
          for (int64_t i = 0; i < span_out; ++i) dst[i] += src[i];
        }
        break;
      }
      case PrimitiveKind::concat: {
        const Shape& oshape = n.output.shape;
        const int axis = n.attrs.axis;
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= oshape[i];
        for (size_t i = axis + 1; i < oshape.size(); ++i) inner *= oshape[i];
        const int64_t out_span = oshape[axis] * inner;
        int64_t offset = 0;
        for (int pid : n.parents) {
          const Tensor& x = nodes_[pid].output;
          const int64_t span = x.shape[axis] * inner;
          if (nodes_[pid].needs_grad) {
            Tensor& p = grad_target(pid);
            for (int64_t o = 0; o < outer; ++o) {
              const double* src = g.data() + o * out_span + offset;
              double* dst = p.grad.data() + o * span;
              for (int64_t i = 0; i < span; ++i) dst[i] += src[i];
            }
          }
          offset += span;
        }
        break;
      }
      case PrimitiveKind::scale: {
        if (!nodes_[n.parents[0]].needs_grad) break;
        Tensor& p = grad_target(n.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) p.grad[i] += n.attrs.scalar * g[i];
        break;
      }
    }
  }

  void conv2d_backward(GraphNode& n) {
    const Tensor& x = nodes_[n.parents[0]].output;
    const Tensor& w = nodes_[n.parents[1]].output;
    const std::vector<double>& g = n.output.grad;
    const int64_t nn = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const int64_t ko = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int64_t oh = n.output.shape[2], ow = n.output.shape[3];
    const int64_t s = n.attrs.stride, p = n.attrs.pad;
    const bool need_dx = nodes_[n.parents[0]].needs_grad;
    const bool need_dw = nodes_[n.parents[1]].needs_grad;
    double* dx = need_dx ? grad_target(n.parents[0]).grad.data() : nullptr;
    double* dw = need_dw ? grad_target(n.parents[1]).grad.data() : nullptr;
    double* db = nullptr;
    if (n.parents.size() == 3 && nodes_[n.parents[2]].needs_grad)
      db = grad_target(n.parents[2]).grad.data();
    for (int64_t ni = 0; ni < nn; ++ni) {
      for (int64_t k = 0; k < ko; ++k) {
        const double* gplane = g.data() + ((ni * ko + k) * oh) * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          for (int64_t ox = 0; ox < ow; ++ox) {
            const double gv = gplane[oy * ow + ox];
            if (gv == 0.0) continue;
            if (db) db[k] += gv;
            if (!need_dx && !need_dw) continue;
            for (int64_t ci = 0; ci < c; ++ci) {
              const int64_t xbase = ((ni * c + ci) * h) * wd;
              const int64_t wbase = ((k * c + ci) * kh) * kw;
              for (int64_t fy = 0; fy < kh; ++fy) {
                const int64_t iy = oy * s + fy - p;
                if (iy < 0 || iy >= h) continue;
                for (int64_t fx = 0; fx < kw; ++fx) {
                  const int64_t ix = ox * s + fx - p;
                  if (ix < 0 || ix >= wd) continue;
                  if (dx) dx[xbase + iy * wd + ix] += gv * w.data[wbase + fy * kw + fx];
                  if (dw) dw[wbase + fy * kw + fx] += gv * x.data[xbase + iy * wd + ix];
                }
              }
            }
          }
        }
      }
    }
  }
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline const Shape& Var::shape() const { return graph->value(id).shape; }
inline int64_t Var::size() const { return graph->value(id).size(); }

namespace detail {
inline void check_same_graph(Var a, Var b) {
  if (a.graph != b.graph)
    throw std::invalid_argument("graph: operands belong to different graphs");
}
}  // namespace detail

inline Var operator+(Var a, Var b) {
  detail::check_same_graph(a, b);
  return a.graph->apply(PrimitiveKind::add, {a.id, b.id});
}

inline Var operator-(Var a, Var b) {
  detail::check_same_graph(a, b);
  return a.graph->apply(PrimitiveKind::sub, {a.id, b.id});
}

inline Var operator*(Var a, Var b) {
  detail::check_same_graph(a, b);
  return a.graph->apply(PrimitiveKind::mul, {a.id, b.id});
}

inline Var matmul(Var a, Var b) {
  detail::check_same_graph(a, b);
  return a.graph->apply(PrimitiveKind::matmul, {a.id, b.id});
}

inline Var conv2d(Var x, Var w, int stride = 1, int pad = 0) {
  detail::check_same_graph(x, w);
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.pad = pad;
  return x.graph->apply(PrimitiveKind::conv2d, {x.id, w.id}, std::move(attrs));
}

inline Var conv2d(Var x, Var w, Var bias, int stride = 1, int pad = 0) {
  detail::check_same_graph(x, w);
  detail::check_same_graph(x, bias);
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.pad = pad;
  return x.graph->apply(PrimitiveKind::conv2d, {x.id, w.id, bias.id}, std::move(attrs));
}

inline Var maxpool2d(Var x) { return x.graph->apply(PrimitiveKind::maxpool2d, {x.id}); }

inline Var relu(Var x) { return x.graph->apply(PrimitiveKind::relu, {x.id}); }

inline Var sigmoid(Var x) { return x.graph->apply(PrimitiveKind::sigmoid, {x.id}); }

inline Var log(Var x) { return x.graph->apply(PrimitiveKind::log, {x.id}); }

inline Var sum(Var x) { return x.graph->apply(PrimitiveKind::sum, {x.id}); }

inline Var reshape(Var x, Shape target) {
  OpAttrs attrs;
  attrs.target = std::move(target);
  return x.graph->apply(PrimitiveKind::reshape, {x.id}, std::move(attrs));
}

inline Var slice(Var x, int axis, int64_t start, int64_t stop) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.start = start;
  attrs.stop = stop;
  return x.graph->apply(PrimitiveKind::slice, {x.id}, std::move(attrs));
}

inline Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: expects at least 1 input");
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (Var v : xs) {
    detail::check_same_graph(xs[0], v);
    ids.push_back(v.id);
  }
  OpAttrs attrs;
  attrs.axis = axis;
  return xs[0].graph->apply(PrimitiveKind::concat, std::move(ids), std::move(attrs));
}

inline Var scale(Var x, double c) {
  OpAttrs attrs;
  attrs.scalar = c;
  return x.graph->apply(PrimitiveKind::scale, {x.id}, std::move(attrs));
}

// max(x, floor) built from relu; used to guard probabilities before log.
inline Var floor_at(Var x, double floor) {
  Var c = x.graph->constant_full(x.shape(), floor);
  return relu(x - c) + c;
}

}  // namespace ndf
