#pragma once

// Dense float64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Every op whose inputs
// require gradients records a node holding its parents and a closure that
// pushes the output gradient back into them. backward() walks that graph
// once in reverse topological order and then releases it, so each forward
// pass builds a fresh tape.
//
// Shapes are strict: the only implicit broadcast is adding a trailing-axis
// bias vector to a matrix.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace modprune {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something writes into it
  bool requires_grad = false;
  bool consumed = false;  // interior node whose tape was already walked
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  double* ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no history, no gradient tracking.
  Tensor detach() const;
  // Deep copy of values; becomes an independent leaf.
  Tensor clone() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal: op construction.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// ---- forward ops -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);  // same shape, or b = trailing bias
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s has exactly one element
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, std::size_t axis, double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// ---- structural ops (2-D) ------------------------------------------------

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx);
// Places row r of x at output row idx[r]; other rows are zero.
Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> idx, std::size_t n_rows);
// Row idx[r] <- a[r]; every other row <- fill (a 1 x cols or cols vector).
Tensor assemble_rows(const Tensor& a, std::span<const std::size_t> idx, const Tensor& fill,
                     std::size_t n_rows);
// Multiplies row r by s[r]; s is rows x 1 or a rows-vector.
Tensor scale_rows(const Tensor& x, const Tensor& s);
// Row-wise softmax over entries with keep != 0; dropped entries are exactly 0.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep);

// ---- autodiff ------------------------------------------------------------

void backward(const Tensor& loss);

}  // namespace modprune
