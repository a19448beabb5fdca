#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "citycond/rng.hpp"

namespace citycond {

using Shape = std::vector<size_t>;

size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Shape or contract violation in a tensor operation.
struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

// One node of the autodiff tape. Nodes are created in forward order and
// carry a monotonically increasing sequence number; backward() visits
// reachable nodes in strict reverse creation order.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, persists until zero_grad
  bool requires_grad = false;
  const char* op = "leaf";
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node's accumulated gradient; pushes into parents.
  std::function<void(const std::vector<double>&)> backward_fn;

  void accumulate(const std::vector<double>& g);
};

}  // namespace detail

// Dense row-major 64-bit float tensor participating in a reverse-mode
// autodiff graph. Tensor is a cheap handle; copies alias the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t rank() const { return node_->shape.size(); }
  size_t size() const { return node_->data.size(); }
  size_t dim(size_t axis) const { return node_->shape.at(axis); }

  const std::vector<double>& data() const { return node_->data; }
  // Direct access for optimizers and loaders; bypasses the tape.
  std::vector<double>& raw_data() { return node_->data; }
  double value() const;
  double at(std::initializer_list<size_t> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  const std::vector<double>& grad() const;
  bool grad_allocated() const { return !node_->grad.empty(); }
  void zero_grad() const;

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- elementwise binary ops (implicit right-aligned broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// ---- elementwise unary ----
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sqrt(const Tensor& x);

// ---- linear algebra / structure ----
Tensor matmul(const Tensor& a, const Tensor& b);  // 2-D only
Tensor transpose(const Tensor& a);                // 2-D only
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

// ---- reductions ----
Tensor sum(const Tensor& a, size_t axis);
Tensor mean(const Tensor& a, size_t axis);
Tensor max(const Tensor& a, size_t axis);  // ties: first index wins
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- softmax over the last axis, with max-subtraction ----
Tensor softmax(const Tensor& x);

// Causal dilated 1-D convolution. x: [T x C_in], w: [K x C_in x C_out];
// output [T x C_out], left-padded with zeros so time length is preserved.
Tensor conv1d(const Tensor& x, const Tensor& w, size_t dilation = 1);

// Row gather from a [V x d] table; result is [n x d].
Tensor embedding_lookup(const Tensor& table, const std::vector<size_t>& indices);

// Populates grad on every requires_grad tensor reachable from loss.
// Gradients accumulate across calls until explicitly zeroed.
void backward(const Tensor& loss);

bool all_finite(const Tensor& t);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace citycond
