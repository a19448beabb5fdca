#include "citycond/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace citycond {

namespace {

thread_local uint64_t g_next_seq = 1;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->seq = g_next_seq++;
  return n;
}

using NodePtr = std::shared_ptr<detail::Node>;
using BackwardFn = std::function<void(const std::vector<double>&)>;

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<NodePtr> parents, BackwardFn bw) {
  auto n = new_node(std::move(shape), std::move(data));
  n->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return Tensor::wrap(std::move(n));
}

void check_shape(const Shape& shape, const std::vector<double>& data) {
  for (size_t d : shape) {
    if (d == 0) throw TensorError("tensor dimension sizes must be positive, got " + shape_str(shape));
  }
  if (shape.empty()) throw TensorError("tensor shape must have at least one axis");
  if (numel(shape) != data.size()) {
    throw TensorError("shape " + shape_str(shape) + " does not match data length " +
                      std::to_string(data.size()));
  }
}

// Per-axis strides of `from` aligned to the right of `to`; 0 marks a
// broadcast axis. Throws when the shapes are not broadcast-compatible.
std::vector<size_t> aligned_strides(const Shape& from, const Shape& to, const char* op) {
  if (from.size() > to.size()) {
    throw TensorError(std::string(op) + ": cannot broadcast " + shape_str(from) + " to " +
                      shape_str(to));
  }
  size_t offset = to.size() - from.size();
  std::vector<size_t> strides(to.size(), 0);
  size_t stride = 1;
  for (size_t i = from.size(); i-- > 0;) {
    size_t d = from[i];
    if (d == to[i + offset]) {
      strides[i + offset] = stride;
    } else if (d == 1) {
      strides[i + offset] = 0;
    } else {
      throw TensorError(std::string(op) + ": cannot broadcast " + shape_str(from) + " to " +
                        shape_str(to));
    }
    stride *= d;
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da == db || db == 1) {
      out[i] = da;
    } else if (da == 1) {
      out[i] = db;
    } else {
      throw TensorError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                        shape_str(b));
    }
  }
  return out;
}

// Walks every flat index of `to` and hands the matching flat index of the
// source tensor to `fn`.
template <typename Fn>
void for_each_broadcast(const Shape& to, const std::vector<size_t>& strides, Fn&& fn) {
  size_t total = numel(to);
  size_t rank = to.size();
  std::vector<size_t> coord(rank, 0);
  size_t src = 0;
  for (size_t i = 0; i < total; ++i) {
    fn(i, src);
    for (size_t ax = rank; ax-- > 0;) {
      coord[ax]++;
      src += strides[ax];
      if (coord[ax] < to[ax]) break;
      src -= strides[ax] * to[ax];
      coord[ax] = 0;
    }
  }
}

struct ReduceDims {
  size_t outer, axis, inner;
};

ReduceDims reduce_dims(const Shape& shape, size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw TensorError(std::string(op) + ": axis " + std::to_string(axis) +
                      " out of range for shape " + shape_str(shape));
  }
  ReduceDims d{1, shape[axis], 1};
  for (size_t i = 0; i < axis; ++i) d.outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) d.inner *= shape[i];
  return d;
}

Shape drop_axis(const Shape& shape, size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out.empty()) out.push_back(1);
  return out;
}

using detail::Node;

}  // namespace

size_t numel(const Shape& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void detail::Node::accumulate(const std::vector<double>& g) {
  if (!requires_grad) return;
  if (grad.empty()) grad.assign(data.size(), 0.0);
  for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from_data(shape, std::vector<double>(numel(shape), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape, data);
  auto n = new_node(std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  std::vector<double> data(numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

double Tensor::value() const {
  if (size() != 1) throw TensorError("value() requires a scalar tensor, got " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<size_t> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) {
    throw TensorError("index rank " + std::to_string(idx.size()) + " does not match shape " +
                      shape_str(s));
  }
  size_t flat = 0;
  size_t axis = 0;
  for (size_t i : idx) {
    if (i >= s[axis]) throw TensorError("index out of range for shape " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() const { node_->grad.assign(node_->data.size(), 0.0); }

// ---------------------------------------------------------------- broadcast

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  auto strides = aligned_strides(a.shape(), shape, "broadcast");
  std::vector<double> out(numel(shape));
  const auto& in = a.data();
  for_each_broadcast(shape, strides, [&](size_t dst, size_t src) { out[dst] = in[src]; });
  auto ap = a.node_ptr();
  return make_op("broadcast", shape, std::move(out), {ap},
                 [ap, shape, strides](const std::vector<double>& g) {
                   if (!ap->requires_grad) return;
                   if (ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
                   for_each_broadcast(shape, strides,
                                      [&](size_t dst, size_t src) { ap->grad[src] += g[dst]; });
                 });
}

// ------------------------------------------------------------- binary ops

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  Tensor a2 = broadcast_to(a, out_shape);
  Tensor b2 = broadcast_to(b, out_shape);
  const auto& av = a2.data();
  const auto& bv = b2.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  auto ap = a2.node_ptr();
  auto bp = b2.node_ptr();
  return make_op(op, std::move(out_shape), std::move(out), {ap, bp},
                 [ap, bp, bwd](const std::vector<double>& g) {
                   bool need_a = ap->requires_grad;
                   bool need_b = bp->requires_grad;
                   if (need_a && ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
                   if (need_b && bp->grad.empty()) bp->grad.assign(bp->data.size(), 0.0);
                   for (size_t i = 0; i < g.size(); ++i) {
                     auto [da, db] = bwd(ap->data[i], bp->data[i], g[i]);
                     if (need_a) ap->grad[i] += da;
                     if (need_b) bp->grad[i] += db;
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair<double, double>(g, g); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair<double, double>(g, -g); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair<double, double>(g * y, g * x); });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g) {
        return std::pair<double, double>(g / y, -g * x / (y * y));
      });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v += s;
  auto ap = a.node_ptr();
  return make_op("add_scalar", a.shape(), std::move(out), {ap},
                 [ap](const std::vector<double>& g) { ap->accumulate(g); });
}

Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= s;
  auto ap = a.node_ptr();
  return make_op("mul_scalar", a.shape(), std::move(out), {ap},
                 [ap, s](const std::vector<double>& g) {
                   if (!ap->requires_grad) return;
                   if (ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
                   for (size_t i = 0; i < g.size(); ++i) ap->grad[i] += g[i] * s;
                 });
}

// -------------------------------------------------------------- unary ops

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_from_output(const char* op, const Tensor& x, Fwd fwd, Bwd bwd_from_out) {
  std::vector<double> out(x.data());
  for (double& v : out) v = fwd(v);
  auto xp = x.node_ptr();
  std::vector<double> saved = out;  // forward values needed for backward
  return make_op(op, x.shape(), std::move(out), {xp},
                 [xp, saved = std::move(saved), bwd_from_out](const std::vector<double>& g) {
                   if (!xp->requires_grad) return;
                   if (xp->grad.empty()) xp->grad.assign(xp->data.size(), 0.0);
                   for (size_t i = 0; i < g.size(); ++i) xp->grad[i] += g[i] * bwd_from_out(saved[i]);
                 });
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary_from_output(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary_from_output(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  auto xp = x.node_ptr();
  return make_op("relu", x.shape(), std::move(out), {xp}, [xp](const std::vector<double>& g) {
    if (!xp->requires_grad) return;
    if (xp->grad.empty()) xp->grad.assign(xp->data.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) {
      if (xp->data[i] > 0.0) xp->grad[i] += g[i];
    }
  });
}

Tensor sqrt(const Tensor& x) {
  return unary_from_output(
      "sqrt", x, [](double v) { return std::sqrt(v); }, [](double y) { return 0.5 / y; });
}

// ---------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw TensorError("matmul: dimension mismatch between " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  }
  size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < m; ++i) {
    for (size_t p = 0; p < k; ++p) {
      double aik = av[i * k + p];
      if (aik == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  auto ap = a.node_ptr();
  auto bp = b.node_ptr();
  return make_op("matmul", {m, n}, std::move(out), {ap, bp},
                 [ap, bp, m, k, n](const std::vector<double>& g) {
                   if (ap->requires_grad) {
                     if (ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
                     // dA = G * B^T
                     for (size_t i = 0; i < m; ++i) {
                       for (size_t p = 0; p < k; ++p) {
                         double acc = 0.0;
                         const double* grow = &g[i * n];
                         const double* brow = &bp->data[p * n];
                         for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                         ap->grad[i * k + p] += acc;
                       }
                     }
                   }
                   if (bp->requires_grad) {
                     if (bp->grad.empty()) bp->grad.assign(bp->data.size(), 0.0);
                     // dB = A^T * G
                     for (size_t i = 0; i < m; ++i) {
                       const double* grow = &g[i * n];
                       for (size_t p = 0; p < k; ++p) {
                         double aik = ap->data[i * k + p];
                         if (aik == 0.0) continue;
                         double* brow = &bp->grad[p * n];
                         for (size_t j = 0; j < n; ++j) brow[j] += aik * grow[j];
                       }
                     }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw TensorError("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
  size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto& av = a.data();
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto ap = a.node_ptr();
  return make_op("transpose", {n, m}, std::move(out), {ap},
                 [ap, m, n](const std::vector<double>& g) {
                   if (!ap->requires_grad) return;
                   if (ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
                   for (size_t i = 0; i < m; ++i)
                     for (size_t j = 0; j < n; ++j) ap->grad[i * n + j] += g[j * m + i];
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw TensorError("reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  for (size_t d : shape) {
    if (d == 0) throw TensorError("reshape: dimension sizes must be positive");
  }
  auto ap = a.node_ptr();
  return make_op("reshape", std::move(shape), a.data(), {ap},
                 [ap](const std::vector<double>& g) { ap->accumulate(g); });
}

Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len) {
  auto d = reduce_dims(a.shape(), axis, "slice");
  if (len == 0 || start + len > d.axis) {
    throw TensorError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") out of bounds for axis size " + std::to_string(d.axis));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<double> out(numel(out_shape));
  const auto& av = a.data();
  for (size_t o = 0; o < d.outer; ++o) {
    for (size_t j = 0; j < len; ++j) {
      size_t src = (o * d.axis + start + j) * d.inner;
      size_t dst = (o * len + j) * d.inner;
      std::copy(av.begin() + src, av.begin() + src + d.inner, out.begin() + dst);
    }
  }
  auto ap = a.node_ptr();
  return make_op("slice", std::move(out_shape), std::move(out), {ap},
                 [ap, d, start, len](const std::vector<double>& g) {
                   if (!ap->requires_grad) return;
                   if (ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
                   for (size_t o = 0; o < d.outer; ++o) {
                     for (size_t j = 0; j < len; ++j) {
                       size_t dst = (o * d.axis + start + j) * d.inner;
                       size_t src = (o * len + j) * d.inner;
                       for (size_t i = 0; i < d.inner; ++i) ap->grad[dst + i] += g[src + i];
                     }
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) throw TensorError("concat: needs at least one input");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw TensorError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                      shape_str(first));
  }
  size_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) {
      throw TensorError("concat: rank mismatch between " + shape_str(first) + " and " +
                        shape_str(p.shape()));
    }
    for (size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) {
        throw TensorError("concat: incompatible shapes " + shape_str(first) + " and " +
                          shape_str(p.shape()) + " on axis " + std::to_string(i));
      }
    }
    axis_total += p.shape()[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = axis_total;
  auto dims = reduce_dims(out_shape, axis, "concat");
  std::vector<double> out(numel(out_shape));
  std::vector<NodePtr> parents;
  std::vector<size_t> widths;  // axis*inner width per part
  parents.reserve(parts.size());
  size_t col = 0;
  for (const Tensor& p : parts) {
    size_t w = p.shape()[axis] * dims.inner;
    const auto& pv = p.data();
    for (size_t o = 0; o < dims.outer; ++o) {
      std::copy(pv.begin() + o * w, pv.begin() + (o + 1) * w,
                out.begin() + o * dims.axis * dims.inner + col);
    }
    parents.push_back(p.node_ptr());
    widths.push_back(w);
    col += w;
  }
  auto parents_copy = parents;
  return make_op("concat", std::move(out_shape), std::move(out), std::move(parents),
                 [parents = std::move(parents_copy), widths, dims](const std::vector<double>& g) {
                   size_t col = 0;
                   for (size_t pi = 0; pi < parents.size(); ++pi) {
                     auto& p = parents[pi];
                     size_t w = widths[pi];
                     if (p->requires_grad) {
                       if (p->grad.empty()) p->grad.assign(p->data.size(), 0.0);
                       for (size_t o = 0; o < dims.outer; ++o) {
                         size_t src = o * dims.axis * dims.inner + col;
                         for (size_t i = 0; i < w; ++i) p->grad[o * w + i] += g[src + i];
                       }
                     }
                     col += w;
                   }
                 });
}

// --------------------------------------------------------------- reductions

Tensor sum(const Tensor& a, size_t axis) {
  auto d = reduce_dims(a.shape(), axis, "sum");
  Shape out_shape = drop_axis(a.shape(), axis);
  std::vector<double> out(d.outer * d.inner, 0.0);
  const auto& av = a.data();
  for (size_t o = 0; o < d.outer; ++o)
    for (size_t j = 0; j < d.axis; ++j)
      for (size_t i = 0; i < d.inner; ++i) out[o * d.inner + i] += av[(o * d.axis + j) * d.inner + i];
  auto ap = a.node_ptr();
  return make_op("sum", std::move(out_shape), std::move(out), {ap},
                 [ap, d](const std::vector<double>& g) {
                   if (!ap->requires_grad) return;
                   if (ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
                   for (size_t o = 0; o < d.outer; ++o)
                     for (size_t j = 0; j < d.axis; ++j)
                       for (size_t i = 0; i < d.inner; ++i)
                         ap->grad[(o * d.axis + j) * d.inner + i] += g[o * d.inner + i];
                 });
}

Tensor mean(const Tensor& a, size_t axis) {
  auto d = reduce_dims(a.shape(), axis, "mean");
  return mul_scalar(sum(a, axis), 1.0 / static_cast<double>(d.axis));
}

Tensor max(const Tensor& a, size_t axis) {
  auto d = reduce_dims(a.shape(), axis, "max");
  Shape out_shape = drop_axis(a.shape(), axis);
  std::vector<double> out(d.outer * d.inner);
  std::vector<size_t> argmax(d.outer * d.inner, 0);
  const auto& av = a.data();
  for (size_t o = 0; o < d.outer; ++o) {
    for (size_t i = 0; i < d.inner; ++i) {
      double best = av[(o * d.axis) * d.inner + i];
      size_t best_j = 0;
      for (size_t j = 1; j < d.axis; ++j) {
        double v = av[(o * d.axis + j) * d.inner + i];
        if (v > best) {  // strict: first index wins ties
          best = v;
          best_j = j;
        }
      }
      out[o * d.inner + i] = best;
      argmax[o * d.inner + i] = best_j;
    }
  }
  auto ap = a.node_ptr();
  return make_op("max", std::move(out_shape), std::move(out), {ap},
                 [ap, d, argmax = std::move(argmax)](const std::vector<double>& g) {
                   if (!ap->requires_grad) return;
                   if (ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
                   for (size_t o = 0; o < d.outer; ++o)
                     for (size_t i = 0; i < d.inner; ++i) {
                       size_t j = argmax[o * d.inner + i];
                       ap->grad[(o * d.axis + j) * d.inner + i] += g[o * d.inner + i];
                     }
                 });
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  auto ap = a.node_ptr();
  return make_op("sum_all", {1}, {acc}, {ap}, [ap](const std::vector<double>& g) {
    if (!ap->requires_grad) return;
    if (ap->grad.empty()) ap->grad.assign(ap->data.size(), 0.0);
    for (double& gv : ap->grad) gv += g[0];
  });
}

Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// ------------------------------------------------------------------ softmax

Tensor softmax(const Tensor& x) {
  size_t k = x.shape().back();
  size_t rows = x.size() / k;
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (size_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * k];
    double m = row[0];
    for (size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (size_t j = 0; j < k; ++j) {
      out[r * k + j] = std::exp(row[j] - m);
      s += out[r * k + j];
    }
    for (size_t j = 0; j < k; ++j) out[r * k + j] /= s;
  }
  auto xp = x.node_ptr();
  std::vector<double> saved = out;
  return make_op("softmax", x.shape(), std::move(out), {xp},
                 [xp, k, rows, saved = std::move(saved)](const std::vector<double>& g) {
                   if (!xp->requires_grad) return;
                   if (xp->grad.empty()) xp->grad.assign(xp->data.size(), 0.0);
                   for (size_t r = 0; r < rows; ++r) {
                     double dot = 0.0;
                     for (size_t j = 0; j < k; ++j) dot += g[r * k + j] * saved[r * k + j];
                     for (size_t j = 0; j < k; ++j)
                       xp->grad[r * k + j] += saved[r * k + j] * (g[r * k + j] - dot);
                   }
                 });
}

// ------------------------------------------------------------------- conv1d

Tensor conv1d(const Tensor& x, const Tensor& w, size_t dilation) {
  if (x.rank() != 2 || w.rank() != 3) {
    throw TensorError("conv1d: expected x [T,C_in] and w [K,C_in,C_out], got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (dilation == 0) throw TensorError("conv1d: dilation must be >= 1");
  size_t t_len = x.shape()[0], c_in = x.shape()[1];
  size_t k = w.shape()[0], c_out = w.shape()[2];
  if (w.shape()[1] != c_in) {
    throw TensorError("conv1d: channel mismatch between " + shape_str(x.shape()) + " and " +
                      shape_str(w.shape()));
  }
  std::vector<double> out(t_len * c_out, 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (size_t t = 0; t < t_len; ++t) {
    for (size_t tap = 0; tap < k; ++tap) {
      // causal: tap k-1 reads the current step, tap 0 the oldest
      long long src = static_cast<long long>(t) - static_cast<long long>((k - 1 - tap) * dilation);
      if (src < 0) continue;
      for (size_t ci = 0; ci < c_in; ++ci) {
        double xval = xv[static_cast<size_t>(src) * c_in + ci];
        if (xval == 0.0) continue;
        const double* wrow = &wv[(tap * c_in + ci) * c_out];
        double* orow = &out[t * c_out];
        for (size_t co = 0; co < c_out; ++co) orow[co] += xval * wrow[co];
      }
    }
  }
  auto xp = x.node_ptr();
  auto wp = w.node_ptr();
  return make_op("conv1d", {t_len, c_out}, std::move(out), {xp, wp},
                 [xp, wp, t_len, c_in, k, c_out, dilation](const std::vector<double>& g) {
                   bool need_x = xp->requires_grad;
                   bool need_w = wp->requires_grad;
                   if (need_x && xp->grad.empty()) xp->grad.assign(xp->data.size(), 0.0);
                   if (need_w && wp->grad.empty()) wp->grad.assign(wp->data.size(), 0.0);
                   for (size_t t = 0; t < t_len; ++t) {
                     for (size_t tap = 0; tap < k; ++tap) {
                       long long src =
                           static_cast<long long>(t) - static_cast<long long>((k - 1 - tap) * dilation);
                       if (src < 0) continue;
                       for (size_t ci = 0; ci < c_in; ++ci) {
                         size_t xi = static_cast<size_t>(src) * c_in + ci;
                         const double* grow = &g[t * c_out];
                         const double* wrow = &wp->data[(tap * c_in + ci) * c_out];
                         if (need_x) {
                           double acc = 0.0;
                           for (size_t co = 0; co < c_out; ++co) acc += grow[co] * wrow[co];
                           xp->grad[xi] += acc;
                         }
                         if (need_w) {
                           double xval = xp->data[xi];
                           if (xval != 0.0) {
                             double* wgrow = &wp->grad[(tap * c_in + ci) * c_out];
                             for (size_t co = 0; co < c_out; ++co) wgrow[co] += xval * grow[co];
                           }
                         }
                       }
                     }
                   }
                 });
}

// -------------------------------------------------------------- embeddings

Tensor embedding_lookup(const Tensor& table, const std::vector<size_t>& indices) {
  if (table.rank() != 2) {
    throw TensorError("embedding_lookup: table must be [V,d], got " + shape_str(table.shape()));
  }
  size_t v = table.shape()[0], d = table.shape()[1];
  for (size_t idx : indices) {
    if (idx >= v) {
      throw TensorError("embedding_lookup: index " + std::to_string(idx) +
                        " out of range for table with " + std::to_string(v) + " rows");
    }
  }
  std::vector<double> out(indices.size() * d);
  const auto& tv = table.data();
  for (size_t i = 0; i < indices.size(); ++i)
    std::copy(tv.begin() + indices[i] * d, tv.begin() + (indices[i] + 1) * d, out.begin() + i * d);
  auto tp = table.node_ptr();
  return make_op("embedding", {indices.size(), d}, std::move(out), {tp},
                 [tp, indices, d](const std::vector<double>& g) {
                   if (!tp->requires_grad) return;
                   if (tp->grad.empty()) tp->grad.assign(tp->data.size(), 0.0);
                   for (size_t i = 0; i < indices.size(); ++i)
                     for (size_t j = 0; j < d; ++j) tp->grad[indices[i] * d + j] += g[i * d + j];
                 });
}

// ----------------------------------------------------------------- backward

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  Node* root = loss.node();
  if (!root->requires_grad) return;  // nothing reachable requires grad

  // Reachable requires_grad subgraph, then strict reverse creation order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

  // Work in fresh buffers so repeated backward calls accumulate rather
  // than compound: stash existing grads, run, then add them back.
  std::unordered_map<Node*, std::vector<double>> stashed;
  for (Node* n : order) {
    if (!n->grad.empty()) stashed[n] = std::move(n->grad);
    n->grad.assign(n->data.size(), 0.0);
  }
  root->grad[0] = 1.0;
  for (Node* n : order) {
    if (n->backward_fn) n->backward_fn(n->grad);
  }
  for (auto& [n, old] : stashed) {
    for (size_t i = 0; i < old.size(); ++i) n->grad[i] += old[i];
  }
}

bool all_finite(const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace citycond
