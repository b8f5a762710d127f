#pragma once

// Dense n-dimensional tensors with reverse-mode automatic differentiation.
//
// Every operation appends a node to an implicit tape (nodes carry a
// per-thread creation sequence number), so backward() can replay the exact
// reverse execution order. Tensors are cheap handles onto shared nodes; a
// graph and its tensors belong to one thread, independent graphs may run on
// different threads concurrently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "partalign/rng.hpp"

namespace partalign {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "absent"
  bool requires_grad = false;
  bool needs_grad = false;  // requires_grad, or depends on a node that does
  bool consumed = false;    // a backward pass already ran through this node
  uint64_t seq = 0;         // creation order within the owning thread
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
  bool is_leaf() const { return !backward_fn; }
};

inline uint64_t next_node_seq() {
  thread_local uint64_t counter = 0;
  return ++counter;
}

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                  " does not match data length " +
                                  std::to_string(data.size()));
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    t.n_->seq = next_node_seq();
    return t;
  }

  static Tensor zeros(Shape shape) {
    std::vector<T> d(shape_numel(shape), T(0));
    return from(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, T v) {
    std::vector<T> d(shape_numel(shape), v);
    return from(std::move(shape), std::move(d));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor uniform(Shape shape, T lo, T hi, Rng& rng) {
    std::vector<T> d(shape_numel(shape));
    for (auto& x : d) x = T(rng.uniform(double(lo), double(hi)));
    return from(std::move(shape), std::move(d));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  size_t numel() const { return n_->data.size(); }
  size_t extent(size_t axis) const { return n_->shape.at(axis); }

  const std::vector<T>& data() const { return n_->data; }
  std::vector<T>& data_mut() { return n_->data; }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    if (v && !n_->is_leaf())
      throw std::invalid_argument(
          "requires_grad can only be set on leaf tensors");
    n_->requires_grad = v;
    n_->needs_grad = v;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }

  // Accumulated gradient; materializes zeros for an unused requires_grad
  // leaf so "gradient of an unused leaf is zero" holds.
  const std::vector<T>& grad() const {
    if (!n_->requires_grad)
      throw std::logic_error("grad(): tensor does not require grad");
    n_->ensure_grad();
    return n_->grad;
  }

  void zero_grad() { n_->grad.clear(); }

  T value() const {
    if (numel() != 1)
      throw std::invalid_argument("value(): tensor is not scalar, shape " +
                                  shape_str(shape()));
    return n_->data[0];
  }

  T at(size_t i) const { return n_->data.at(i); }
  T at(size_t i, size_t j) const {
    return n_->data.at(i * n_->shape.at(1) + j);
  }
  T at(size_t i, size_t j, size_t k) const {
    return n_->data.at((i * n_->shape.at(1) + j) * n_->shape.at(2) + k);
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Topologically ordered record of the executed operations reachable from a
// root; order[i] was created before order[i+1].
template <class T>
struct ComputeGraph {
  std::vector<TensorNode<T>*> order;

  static ComputeGraph from(const Tensor<T>& root) {
    ComputeGraph g;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<TensorNode<T>*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
      TensorNode<T>* n = stack.back();
      stack.pop_back();
      g.order.push_back(n);
      for (auto& p : n->parents) {
        if (seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(g.order.begin(), g.order.end(),
              [](const TensorNode<T>* a, const TensorNode<T>* b) {
                return a->seq < b->seq;
              });
    return g;
  }
};

namespace detail {

template <class T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> data,
                  std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backward_fn) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(data));
  auto& n = *out.node();
  n.op = op;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.node()->needs_grad;
  n.needs_grad = needs;
  if (needs) {
    n.parents.reserve(parents.size());
    for (auto& p : parents) n.parents.push_back(p.node());
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a) + " vs " + shape_str(b));
}

// Decomposes `shape` around `axis` for slice-wise ops.
struct AxisSplit {
  size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const char* op, const Shape& shape, size_t axis) {
  if (axis >= shape.size())
    throw std::invalid_argument(std::string(op) + ": axis " +
                                std::to_string(axis) +
                                " out of range for shape " + shape_str(shape));
  AxisSplit s;
  for (size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a.shape(), b.shape());
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] + b.data()[i];
  return detail::make_op<T>("add", a.shape(), std::move(d), {a, b},
                            [](TensorNode<T>& self) {
                              for (int k = 0; k < 2; ++k) {
                                auto& p = *self.parents[k];
                                if (!p.needs_grad) continue;
                                p.ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  p.grad[i] += self.grad[i];
                              }
                            });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a.shape(), b.shape());
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] - b.data()[i];
  return detail::make_op<T>("sub", a.shape(), std::move(d), {a, b},
                            [](TensorNode<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              if (pa.needs_grad) {
                                pa.ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  pa.grad[i] += self.grad[i];
                              }
                              if (pb.needs_grad) {
                                pb.ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  pb.grad[i] -= self.grad[i];
                              }
                            });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a.shape(), b.shape());
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] * b.data()[i];
  return detail::make_op<T>("mul", a.shape(), std::move(d), {a, b},
                            [](TensorNode<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              if (pa.needs_grad) {
                                pa.ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  pa.grad[i] += self.grad[i] * pb.data[i];
                              }
                              if (pb.needs_grad) {
                                pb.ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  pb.grad[i] += self.grad[i] * pa.data[i];
                              }
                            });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < d.size(); ++i) d[i] = T(a.data()[i] * T(c));
  return detail::make_op<T>("scale", a.shape(), std::move(d), {a},
                            [c](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t i = 0; i < self.grad.size(); ++i)
                                p.grad[i] += self.grad[i] * T(c);
                            });
}

// a[m x n] + bias[n], broadcast over rows
template <class T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  if (a.shape().size() != 2 || bias.shape().size() != 1 ||
      a.shape()[1] != bias.shape()[0])
    throw std::invalid_argument("add_bias: shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(bias.shape()));
  const size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j)
      d[i * n + j] = a.data()[i * n + j] + bias.data()[j];
  return detail::make_op<T>("add_bias", a.shape(), std::move(d), {a, bias},
                            [m, n](TensorNode<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              if (pa.needs_grad) {
                                pa.ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  pa.grad[i] += self.grad[i];
                              }
                              if (pb.needs_grad) {
                                pb.ensure_grad();
                                for (size_t i = 0; i < m; ++i)
                                  for (size_t j = 0; j < n; ++j)
                                    pb.grad[j] += self.grad[i * n + j];
                              }
                            });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < d.size(); ++i)
    d[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  return detail::make_op<T>("relu", a.shape(), std::move(d), {a},
                            [](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t i = 0; i < self.grad.size(); ++i)
                                if (p.data[i] > T(0)) p.grad[i] += self.grad[i];
                            });
}

// tanh approximation of GELU
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c3 = 0.044715;
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < d.size(); ++i) {
    double x = double(a.data()[i]);
    d[i] = T(0.5 * x * (1.0 + std::tanh(k * (x + c3 * x * x * x))));
  }
  return detail::make_op<T>(
      "gelu", a.shape(), std::move(d), {a}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
          double x = double(p.data[i]);
          double u = k * (x + c3 * x * x * x);
          double t = std::tanh(u);
          double du = k * (1.0 + 3.0 * c3 * x * x);
          double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
          p.grad[i] += self.grad[i] * T(dy);
        }
      });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < d.size(); ++i) d[i] = std::exp(a.data()[i]);
  return detail::make_op<T>("exp", a.shape(), std::move(d), {a},
                            [](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t i = 0; i < self.grad.size(); ++i)
                                p.grad[i] += self.grad[i] * self.data[i];
                            });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < d.size(); ++i) d[i] = std::log(a.data()[i]);
  return detail::make_op<T>("log", a.shape(), std::move(d), {a},
                            [](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t i = 0; i < self.grad.size(); ++i)
                                p.grad[i] += self.grad[i] / p.data[i];
                            });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot reshape " +
                                shape_str(a.shape()) + " to " +
                                shape_str(shape));
  return detail::make_op<T>("reshape", std::move(shape),
                            std::vector<T>(a.data()), {a},
                            [](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t i = 0; i < self.grad.size(); ++i)
                                p.grad[i] += self.grad[i];
                            });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.shape().size() != 2)
    throw std::invalid_argument("transpose: expected rank-2 tensor, got " +
                                shape_str(a.shape()));
  const size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> d(a.numel());
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) d[j * m + i] = a.data()[i * n + j];
  return detail::make_op<T>("transpose", {n, m}, std::move(d), {a},
                            [m, n](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t i = 0; i < m; ++i)
                                for (size_t j = 0; j < n; ++j)
                                  p.grad[i * n + j] += self.grad[j * m + i];
                            });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  auto sp = detail::split_axis("concat", s0, axis);
  size_t total_extent = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size())
      throw std::invalid_argument("concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(s0) +
                                    " vs " + shape_str(s));
    total_extent += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total_extent;
  std::vector<T> d(shape_numel(out_shape));
  std::vector<size_t> extents;
  size_t off = 0;
  for (const auto& p : parts) {
    size_t e = p.shape()[axis];
    extents.push_back(e);
    for (size_t o = 0; o < sp.outer; ++o)
      for (size_t k = 0; k < e; ++k)
        for (size_t i = 0; i < sp.inner; ++i)
          d[(o * total_extent + off + k) * sp.inner + i] =
              p.data()[(o * e + k) * sp.inner + i];
    off += e;
  }
  return detail::make_op<T>(
      "concat", std::move(out_shape), std::move(d), parts,
      [sp, extents, total_extent](TensorNode<T>& self) {
        size_t off = 0;
        for (size_t pi = 0; pi < self.parents.size(); ++pi) {
          auto& p = *self.parents[pi];
          size_t e = extents[pi];
          if (p.needs_grad) {
            p.ensure_grad();
            for (size_t o = 0; o < sp.outer; ++o)
              for (size_t k = 0; k < e; ++k)
                for (size_t i = 0; i < sp.inner; ++i)
                  p.grad[(o * e + k) * sp.inner + i] +=
                      self.grad[(o * total_extent + off + k) * sp.inner + i];
          }
          off += e;
        }
      });
}

// columns [c0, c1) of a rank-2 tensor
template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t c0, size_t c1) {
  if (a.shape().size() != 2 || c0 >= c1 || c1 > a.shape()[1])
    throw std::invalid_argument("slice_cols: invalid slice [" +
                                std::to_string(c0) + "," + std::to_string(c1) +
                                ") of " + shape_str(a.shape()));
  const size_t m = a.shape()[0], n = a.shape()[1], w = c1 - c0;
  std::vector<T> d(m * w);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < w; ++j) d[i * w + j] = a.data()[i * n + c0 + j];
  return detail::make_op<T>("slice_cols", {m, w}, std::move(d), {a},
                            [m, n, w, c0](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t i = 0; i < m; ++i)
                                for (size_t j = 0; j < w; ++j)
                                  p.grad[i * n + c0 + j] +=
                                      self.grad[i * w + j];
                            });
}

// single element of a rank-1 tensor, kept as a [1] tensor
template <class T>
Tensor<T> pick(const Tensor<T>& a, size_t index) {
  if (a.shape().size() != 1 || index >= a.shape()[0])
    throw std::invalid_argument("pick: index " + std::to_string(index) +
                                " out of range for " + shape_str(a.shape()));
  return detail::make_op<T>("pick", {1}, {a.data()[index]}, {a},
                            [index](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              p.grad[index] += self.grad[0];
                            });
}

// out row i = in row perm[i]
template <class T>
Tensor<T> reorder_rows(const Tensor<T>& a, const std::vector<size_t>& perm) {
  if (a.shape().size() != 2 || perm.size() != a.shape()[0])
    throw std::invalid_argument("reorder_rows: permutation length " +
                                std::to_string(perm.size()) +
                                " does not match " + shape_str(a.shape()));
  const size_t n = a.shape()[0], d = a.shape()[1];
  std::vector<T> out(n * d);
  for (size_t i = 0; i < n; ++i) {
    if (perm[i] >= n)
      throw std::invalid_argument("reorder_rows: index out of range");
    for (size_t j = 0; j < d; ++j) out[i * d + j] = a.data()[perm[i] * d + j];
  }
  return detail::make_op<T>("reorder_rows", a.shape(), std::move(out), {a},
                            [perm, d](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t i = 0; i < perm.size(); ++i)
                                for (size_t j = 0; j < d; ++j)
                                  p.grad[perm[i] * d + j] +=
                                      self.grad[i * d + j];
                            });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return detail::make_op<T>("sum", {1}, {s}, {a}, [](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
  });
}

template <class T>
Tensor<T> mean_over_axis(const Tensor<T>& a, size_t axis) {
  auto sp = detail::split_axis("mean_over_axis", a.shape(), axis);
  Shape out_shape;
  for (size_t i = 0; i < a.shape().size(); ++i)
    if (i != axis) out_shape.push_back(a.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> d(sp.outer * sp.inner, T(0));
  for (size_t o = 0; o < sp.outer; ++o)
    for (size_t k = 0; k < sp.extent; ++k)
      for (size_t i = 0; i < sp.inner; ++i)
        d[o * sp.inner + i] += a.data()[(o * sp.extent + k) * sp.inner + i];
  for (auto& v : d) v /= T(sp.extent);
  return detail::make_op<T>(
      "mean_over_axis", std::move(out_shape), std::move(d), {a},
      [sp](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const T inv = T(1) / T(sp.extent);
        for (size_t o = 0; o < sp.outer; ++o)
          for (size_t k = 0; k < sp.extent; ++k)
            for (size_t i = 0; i < sp.inner; ++i)
              p.grad[(o * sp.extent + k) * sp.inner + i] +=
                  self.grad[o * sp.inner + i] * inv;
      });
}

template <class T>
Tensor<T> max_over_axis(const Tensor<T>& a, size_t axis) {
  auto sp = detail::split_axis("max_over_axis", a.shape(), axis);
  Shape out_shape;
  for (size_t i = 0; i < a.shape().size(); ++i)
    if (i != axis) out_shape.push_back(a.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> d(sp.outer * sp.inner);
  std::vector<size_t> arg(sp.outer * sp.inner);  // first max wins
  for (size_t o = 0; o < sp.outer; ++o)
    for (size_t i = 0; i < sp.inner; ++i) {
      T best = a.data()[(o * sp.extent) * sp.inner + i];
      size_t bk = 0;
      for (size_t k = 1; k < sp.extent; ++k) {
        T v = a.data()[(o * sp.extent + k) * sp.inner + i];
        if (v > best) {
          best = v;
          bk = k;
        }
      }
      d[o * sp.inner + i] = best;
      arg[o * sp.inner + i] = bk;
    }
  return detail::make_op<T>(
      "max_over_axis", std::move(out_shape), std::move(d), {a},
      [sp, arg](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t o = 0; o < sp.outer; ++o)
          for (size_t i = 0; i < sp.inner; ++i)
            p.grad[(o * sp.extent + arg[o * sp.inner + i]) * sp.inner + i] +=
                self.grad[o * sp.inner + i];
      });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> d(m * n, T(0));
  for (size_t i = 0; i < m; ++i)
    for (size_t p = 0; p < k; ++p) {
      const T av = a.data()[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b.data().data() + p * n;
      T* drow = d.data() + i * n;
      for (size_t j = 0; j < n; ++j) drow[j] += av * brow[j];
    }
  return detail::make_op<T>(
      "matmul", {m, n}, std::move(d), {a, b}, [m, k, n](TensorNode<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.needs_grad) {
          pa.ensure_grad();
          // dA = G . B^T
          for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
              T s = T(0);
              const T* grow = self.grad.data() + i * n;
              const T* brow = pb.data.data() + p * n;
              for (size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              pa.grad[i * k + p] += s;
            }
        }
        if (pb.needs_grad) {
          pb.ensure_grad();
          // dB = A^T . G
          for (size_t p = 0; p < k; ++p)
            for (size_t i = 0; i < m; ++i) {
              const T av = pa.data[i * k + p];
              if (av == T(0)) continue;
              const T* grow = self.grad.data() + i * n;
              T* brow = pb.grad.data() + p * n;
              for (size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& a, size_t axis) {
  auto sp = detail::split_axis("softmax", a.shape(), axis);
  for (T v : a.data())
    if (!std::isfinite(double(v)))
      throw std::invalid_argument("softmax: non-finite input");
  std::vector<T> d(a.numel());
  for (size_t o = 0; o < sp.outer; ++o)
    for (size_t i = 0; i < sp.inner; ++i) {
      T mx = a.data()[(o * sp.extent) * sp.inner + i];
      for (size_t k = 1; k < sp.extent; ++k)
        mx = std::max(mx, a.data()[(o * sp.extent + k) * sp.inner + i]);
      T denom = T(0);
      for (size_t k = 0; k < sp.extent; ++k) {
        size_t idx = (o * sp.extent + k) * sp.inner + i;
        d[idx] = std::exp(a.data()[idx] - mx);
        denom += d[idx];
      }
      for (size_t k = 0; k < sp.extent; ++k)
        d[(o * sp.extent + k) * sp.inner + i] /= denom;
    }
  return detail::make_op<T>(
      "softmax", a.shape(), std::move(d), {a}, [sp](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t o = 0; o < sp.outer; ++o)
          for (size_t i = 0; i < sp.inner; ++i) {
            T dot = T(0);
            for (size_t k = 0; k < sp.extent; ++k) {
              size_t idx = (o * sp.extent + k) * sp.inner + i;
              dot += self.grad[idx] * self.data[idx];
            }
            for (size_t k = 0; k < sp.extent; ++k) {
              size_t idx = (o * sp.extent + k) * sp.inner + i;
              p.grad[idx] += self.data[idx] * (self.grad[idx] - dot);
            }
          }
      });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& a, size_t axis) {
  auto sp = detail::split_axis("log_softmax", a.shape(), axis);
  for (T v : a.data())
    if (!std::isfinite(double(v)))
      throw std::invalid_argument("log_softmax: non-finite input");
  std::vector<T> d(a.numel());
  for (size_t o = 0; o < sp.outer; ++o)
    for (size_t i = 0; i < sp.inner; ++i) {
      T mx = a.data()[(o * sp.extent) * sp.inner + i];
      for (size_t k = 1; k < sp.extent; ++k)
        mx = std::max(mx, a.data()[(o * sp.extent + k) * sp.inner + i]);
      T lse = T(0);
      for (size_t k = 0; k < sp.extent; ++k)
        lse += std::exp(a.data()[(o * sp.extent + k) * sp.inner + i] - mx);
      lse = mx + std::log(lse);
      for (size_t k = 0; k < sp.extent; ++k) {
        size_t idx = (o * sp.extent + k) * sp.inner + i;
        d[idx] = a.data()[idx] - lse;
      }
    }
  return detail::make_op<T>(
      "log_softmax", a.shape(), std::move(d), {a}, [sp](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t o = 0; o < sp.outer; ++o)
          for (size_t i = 0; i < sp.inner; ++i) {
            T gsum = T(0);
            for (size_t k = 0; k < sp.extent; ++k)
              gsum += self.grad[(o * sp.extent + k) * sp.inner + i];
            for (size_t k = 0; k < sp.extent; ++k) {
              size_t idx = (o * sp.extent + k) * sp.inner + i;
              p.grad[idx] +=
                  self.grad[idx] - std::exp(self.data[idx]) * gsum;
            }
          }
      });
}

// Row-wise layer norm over the last axis of x[N x d], population variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps) {
  if (x.shape().size() != 2 || gamma.shape().size() != 1 ||
      beta.shape().size() != 1 || gamma.shape()[0] != x.shape()[1] ||
      beta.shape()[0] != x.shape()[1])
    throw std::invalid_argument(
        "layer_norm: shape mismatch x=" + shape_str(x.shape()) +
        " gamma=" + shape_str(gamma.shape()) +
        " beta=" + shape_str(beta.shape()));
  if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be > 0");
  const size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<T> out(n * d);
  std::vector<T> xhat(n * d);
  std::vector<T> inv_sigma(n);
  for (size_t i = 0; i < n; ++i) {
    T mean = T(0);
    for (size_t j = 0; j < d; ++j) mean += x.data()[i * d + j];
    mean /= T(d);
    T var = T(0);
    for (size_t j = 0; j < d; ++j) {
      T c = x.data()[i * d + j] - mean;
      var += c * c;
    }
    var /= T(d);
    T is = T(1) / std::sqrt(var + T(eps));
    inv_sigma[i] = is;
    for (size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (x.data()[i * d + j] - mean) * is;
      out[i * d + j] = gamma.data()[j] * xhat[i * d + j] + beta.data()[j];
    }
  }
  return detail::make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [n, d, xhat, inv_sigma](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.needs_grad) {
          pg.ensure_grad();
          for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j)
              pg.grad[j] += self.grad[i * d + j] * xhat[i * d + j];
        }
        if (pb.needs_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) pb.grad[j] += self.grad[i * d + j];
        }
        if (px.needs_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < n; ++i) {
            T mean_gh = T(0), mean_ghx = T(0);
            for (size_t j = 0; j < d; ++j) {
              T gh = self.grad[i * d + j] * pg.data[j];
              mean_gh += gh;
              mean_ghx += gh * xhat[i * d + j];
            }
            mean_gh /= T(d);
            mean_ghx /= T(d);
            for (size_t j = 0; j < d; ++j) {
              T gh = self.grad[i * d + j] * pg.data[j];
              px.grad[i * d + j] +=
                  inv_sigma[i] * (gh - mean_gh - xhat[i * d + j] * mean_ghx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// image ops (single image, [C x H x W])
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 size_t stride, size_t pad) {
  if (x.shape().size() != 3 || w.shape().size() != 4 ||
      b.shape().size() != 1 || w.shape()[1] != x.shape()[0] ||
      b.shape()[0] != w.shape()[0])
    throw std::invalid_argument("conv2d: shape mismatch x=" +
                                shape_str(x.shape()) +
                                " w=" + shape_str(w.shape()) +
                                " b=" + shape_str(b.shape()));
  const size_t ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const size_t co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  const size_t ho = (h + 2 * pad - kh) / stride + 1;
  const size_t wo = (wd + 2 * pad - kw) / stride + 1;
  std::vector<T> out(co * ho * wo);
  for (size_t oc = 0; oc < co; ++oc)
    for (size_t oy = 0; oy < ho; ++oy)
      for (size_t ox = 0; ox < wo; ++ox) {
        T acc = b.data()[oc];
        for (size_t ic = 0; ic < ci; ++ic)
          for (size_t ky = 0; ky < kh; ++ky) {
            const long iy = long(oy * stride + ky) - long(pad);
            if (iy < 0 || iy >= long(h)) continue;
            for (size_t kx = 0; kx < kw; ++kx) {
              const long ix = long(ox * stride + kx) - long(pad);
              if (ix < 0 || ix >= long(wd)) continue;
              acc += x.data()[(ic * h + size_t(iy)) * wd + size_t(ix)] *
                     w.data()[((oc * ci + ic) * kh + ky) * kw + kx];
            }
          }
        out[(oc * ho + oy) * wo + ox] = acc;
      }
  return detail::make_op<T>(
      "conv2d", {co, ho, wo}, std::move(out), {x, w, b},
      [ci, h, wd, co, kh, kw, ho, wo, stride, pad](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.needs_grad) px.ensure_grad();
        if (pw.needs_grad) pw.ensure_grad();
        if (pb.needs_grad) pb.ensure_grad();
        for (size_t oc = 0; oc < co; ++oc)
          for (size_t oy = 0; oy < ho; ++oy)
            for (size_t ox = 0; ox < wo; ++ox) {
              const T g = self.grad[(oc * ho + oy) * wo + ox];
              if (pb.needs_grad) pb.grad[oc] += g;
              if (!px.needs_grad && !pw.needs_grad) continue;
              for (size_t ic = 0; ic < ci; ++ic)
                for (size_t ky = 0; ky < kh; ++ky) {
                  const long iy = long(oy * stride + ky) - long(pad);
                  if (iy < 0 || iy >= long(h)) continue;
                  for (size_t kx = 0; kx < kw; ++kx) {
                    const long ix = long(ox * stride + kx) - long(pad);
                    if (ix < 0 || ix >= long(wd)) continue;
                    const size_t xi = (ic * h + size_t(iy)) * wd + size_t(ix);
                    const size_t wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                    if (pw.needs_grad) pw.grad[wi] += g * px.data[xi];
                    if (px.needs_grad) px.grad[xi] += g * pw.data[wi];
                  }
                }
            }
      });
}

// 2x2 average pooling with stride 2; extents must be even
template <class T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  if (x.shape().size() != 3 || x.shape()[1] % 2 != 0 || x.shape()[2] % 2 != 0)
    throw std::invalid_argument("avg_pool2: expected [C x 2h x 2w], got " +
                                shape_str(x.shape()));
  const size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const size_t ho = h / 2, wo = w / 2;
  std::vector<T> out(c * ho * wo);
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < ho; ++i)
      for (size_t j = 0; j < wo; ++j) {
        const size_t base = (ch * h + 2 * i) * w + 2 * j;
        out[(ch * ho + i) * wo + j] =
            (x.data()[base] + x.data()[base + 1] + x.data()[base + w] +
             x.data()[base + w + 1]) /
            T(4);
      }
  return detail::make_op<T>(
      "avg_pool2", {c, ho, wo}, std::move(out), {x},
      [c, h, w, ho, wo](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t ch = 0; ch < c; ++ch)
          for (size_t i = 0; i < ho; ++i)
            for (size_t j = 0; j < wo; ++j) {
              const T g = self.grad[(ch * ho + i) * wo + j] / T(4);
              const size_t base = (ch * h + 2 * i) * w + 2 * j;
              p.grad[base] += g;
              p.grad[base + 1] += g;
              p.grad[base + w] += g;
              p.grad[base + w + 1] += g;
            }
      });
}

// per-channel max over the spatial axes: [C x H x W] -> [C]
template <class T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("global_max_pool: expected rank-3, got " +
                                shape_str(x.shape()));
  const size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  std::vector<T> out(c);
  std::vector<size_t> arg(c);
  for (size_t ch = 0; ch < c; ++ch) {
    T best = x.data()[ch * hw];
    size_t bi = 0;
    for (size_t i = 1; i < hw; ++i) {
      T v = x.data()[ch * hw + i];
      if (v > best) {
        best = v;
        bi = i;
      }
    }
    out[ch] = best;
    arg[ch] = bi;
  }
  return detail::make_op<T>("global_max_pool", {c}, std::move(out), {x},
                            [c, hw, arg](TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              p.ensure_grad();
                              for (size_t ch = 0; ch < c; ++ch)
                                p.grad[ch * hw + arg[ch]] += self.grad[ch];
                            });
}

// Square crop at (r0, c0) with side `side`, resized to out_h x out_w by
// nearest neighbor.
template <class T>
Tensor<T> crop_resize_nn(const Tensor<T>& x, size_t r0, size_t c0, size_t side,
                         size_t out_h, size_t out_w) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("crop_resize_nn: expected rank-3, got " +
                                shape_str(x.shape()));
  const size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (side == 0 || r0 + side > h || c0 + side > w)
    throw std::invalid_argument("crop_resize_nn: degenerate box (" +
                                std::to_string(r0) + "," + std::to_string(c0) +
                                ") side " + std::to_string(side) + " in " +
                                shape_str(x.shape()));
  std::vector<T> out(c * out_h * out_w);
  std::vector<size_t> src(out_h * out_w);
  for (size_t i = 0; i < out_h; ++i)
    for (size_t j = 0; j < out_w; ++j)
      src[i * out_w + j] =
          (r0 + (i * side) / out_h) * w + (c0 + (j * side) / out_w);
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < out_h * out_w; ++i)
      out[ch * out_h * out_w + i] = x.data()[ch * h * w + src[i]];
  return detail::make_op<T>(
      "crop_resize_nn", {c, out_h, out_w}, std::move(out), {x},
      [c, h, w, out_h, out_w, src](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t ch = 0; ch < c; ++ch)
          for (size_t i = 0; i < out_h * out_w; ++i)
            p.grad[ch * h * w + src[i]] += self.grad[ch * out_h * out_w + i];
      });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  auto graph = ComputeGraph<T>::from(loss);
  for (auto* n : graph.order)
    if (n->consumed)
      throw std::runtime_error(
          std::string("backward: graph already consumed at op '") + n->op +
          "'; run a new forward first");
  auto* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (!n->needs_grad || n->is_leaf()) continue;
    n->ensure_grad();
    n->backward_fn(*n);
    n->consumed = true;
  }
  // non-leaf / non-requires_grad gradients are not observable state
  for (auto* n : graph.order)
    if (!n->requires_grad) n->grad.clear();
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

}  // namespace partalign
