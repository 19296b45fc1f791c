#pragma once

// Dense 64-bit tensors with a tape-based reverse-mode differentiator.
//
// Only the operations the scalar-token transformer needs are provided.
// Shapes must match exactly; the one broadcast is a row-wise bias.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ood {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;
  // Empty when absent; otherwise same length as data.
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // last dimension

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool has_grad() const noexcept { return !grad.empty(); }
  /// Allocates a zero gradient buffer if absent.
  std::vector<double>& ensure_grad();
  void zero_grad();
};

class Tape;

/// Handle to a node recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
};

class Tape {
 public:
  // Receives the tape and the id of the node being back-propagated.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Binds an external tensor as a differentiable leaf. Backward accumulates
  /// into `t.grad`; the tensor must outlive the tape's use.
  Var leaf(Tensor& t);
  /// Records a value that receives no gradient.
  Var constant(Tensor t);
  /// Binds an external tensor without copying; it receives no gradient.
  Var reference(const Tensor& t);

  /// Reverse sweep from a scalar loss. Interior gradients are reset on every
  /// call; leaf gradients accumulate across calls.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  const Tensor& value(std::size_t id) const { return *nodes_[id].value; }
  Tensor& mutable_value(std::size_t id) { return *nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer for a node; only valid during backward for grad nodes.
  std::vector<double>& grad(std::size_t id) { return nodes_[id].value->grad; }

  // Used by operation implementations.
  Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor out, std::span<const Var> inputs, BackwardFn fn);

 private:
  struct Node {
    std::unique_ptr<Tensor> owned;
    Tensor* value = nullptr;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

/// [m×k]·[k×n] → [m×n].
Var matmul(Var a, Var b);
Var transpose(Var a);
/// Elementwise sum of identically shaped tensors.
Var add(Var a, Var b);
/// Adds a length-n bias to every row of an [m×n] matrix.
Var add_row_bias(Var x, Var bias);
Var scale(Var x, double factor);
/// Row-wise softmax over the last dimension of a matrix.
Var softmax_rows(Var x);
/// Sets entries above the diagonal of a square matrix to -inf.
Var causal_mask(Var x);
/// Normalizes each row of an [m×n] matrix (n ≥ 2), then applies γ·(·)+β.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// ½x(1 + tanh(√(2/π)(x + 0.044715x³))), elementwise.
Var gelu(Var x);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);
/// Picks flat elements into a rank-1 tensor.
Var gather(Var x, std::span<const std::size_t> indices);
/// Mean of squared differences; returns a scalar node.
Var mse(Var pred, const Tensor& target);
Var add_scalars(Var a, Var b);

// Plain kernels, shared with the reference checks in tests.
double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace ood
