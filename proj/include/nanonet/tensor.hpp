#pragma once

// Dense float64 tensors with tape-free reverse-mode autodiff.
//
// Every op result remembers the tensors it was computed from together with a
// closure that pushes the output gradient back into them. backward() walks
// that DAG in reverse topological order. Nodes are immutable once built; only
// leaves (parameters, inputs) may have their data mutated, and only while no
// graph that depends on them is awaiting backward().
//
// A graph and all of its tensors belong to one thread for the duration of a
// forward/backward pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace nanonet {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Convenience for tests and fixtures: rows of equal length.
  static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Mutable access to the values. Only valid for leaves.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  // Seeds d(self)/d(self) = 1 for every element and propagates through the
  // graph. Intermediate gradients are reset first, leaf gradients accumulate.
  void backward() const;

  // Deep copy of the values as a fresh leaf with the same requires_grad flag.
  Tensor clone() const;

  const detail::Node* node() const { return node_.get(); }

 private:
  friend struct TensorAccess;
  std::shared_ptr<detail::Node> node_;
};

namespace autograd {

// Receives the output's values and its gradient; must add into the inputs'
// gradient buffers via grad_of().
using BackwardFn = std::function<void(std::span<const double> out, std::span<const double> out_grad)>;

// Builds an op result. When no input requires grad the result is a plain
// constant and `backward` is dropped.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward);

// Gradient accumulation buffer of `t`, allocated (zero-filled) on first use.
std::span<double> grad_of(const Tensor& t);

}  // namespace autograd

// ---- primitive ops -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x[m×n] + b[n] broadcast over rows.
Tensor add_rowvec(const Tensor& x, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
// Embedding lookup: out[i] = table[ids[i]].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
// Row-wise softmax with max subtraction. -inf entries map to exactly 0.
Tensor softmax_rows(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor detach(const Tensor& x);
// Row-wise layer normalization; `bias` may be undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Inverted dropout: kept elements are scaled by 1/(1-p).
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

// ---- gradient checking ---------------------------------------------------

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::vector<double> per_element_errors;
  bool passed = false;
};

// Compares the analytic gradient of the scalar f at x with central
// differences (f(x+eps·e_i) - f(x-eps·e_i)) / 2eps. x must be a leaf; its
// values are restored on return.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps,
                           double tolerance);

}  // namespace nanonet
