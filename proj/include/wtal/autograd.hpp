#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 matrices.
//
// Every value is a 2-D Eigen matrix. Sequences are stored time-major: a
// T x D matrix holds one D-dimensional row per segment or token. Leaves that
// require gradients (model parameters) persist across steps and accumulate
// into their `grad` until cleared; interior nodes are freed with the graph.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace wtal::ag {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
  // Gradient buffer, zero-initialised on first use.
  Matrix& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  double item() const;

  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Value with no gradient path.
Var constant(Matrix value);
Var scalar(double value);
// Gradient-accumulating leaf (used for parameters).
Var leaf(Matrix value);

// Run reverse accumulation from a 1x1 root.
void backward(const Var& root);

// While alive, new ops record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---- elementwise / shape ops ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// a (R x C) + b (1 x C), broadcast over rows.
Var add_row(const Var& a, const Var& b);
// a (R x C) * v (R x 1), each row r scaled by v[r].
Var mul_col(const Var& a, const Var& v);
// a (R x C) * v (1 x C), each column c scaled by v[c].
Var mul_row(const Var& a, const Var& v);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var sqrt(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
// log(max(a, eps)); gradient is zero where the clamp is active.
Var log_clamped(const Var& a, double eps);
Var dropout(const Var& a, double rate, std::mt19937_64& rng);

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
// Column sums: R x C -> 1 x C.
Var sum_rows(const Var& a);
// Row sums: R x C -> R x 1.
Var sum_cols(const Var& a);

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& a, std::span<const int> indices);
Var detach(const Var& a);

// Row-wise softmax. With causal=true, entry (i, j) with j > i is excluded.
Var softmax_rows(const Var& a, bool causal = false);
// Per-column mean of the k largest entries: R x C -> 1 x C.
Var topk_mean_cols(const Var& a, int k);
// Same-padded temporal convolution. x: T x Din, weight: (K*Din) x Dout with
// row block k holding the taps for offset k - K/2, bias: 1 x Dout.
Var conv1d(const Var& x, const Var& weight, const Var& bias, int kernel);
// Row-wise layer normalisation with affine gamma/beta (1 x D).
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

}  // namespace wtal::ag
