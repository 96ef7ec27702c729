#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ccds/tensor.hpp"

namespace ccds {

// One vertex of the computation graph. `grad` always has the shape of `value`.
struct DiffNode {
  Tensor value;
  Tensor grad;
  std::string op;
  std::vector<std::shared_ptr<DiffNode>> parents;
  // Reads this node's grad and accumulates (+=) into parents' grads.
  std::function<void(DiffNode&)> backward;
  bool requires_grad = false;

  bool is_leaf() const { return parents.empty(); }
};

// Handle to a graph node. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<DiffNode> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  void zero_grad() { node_->grad.fill(0.0); }

  const std::shared_ptr<DiffNode>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<DiffNode> node_;
};

// Reverse sweep from a scalar root. Interior gradients are recomputed on each call;
// leaf gradients accumulate until zero_grad().
void backward(const Var& root);

// Nodes reachable from root, parents before children.
std::vector<std::shared_ptr<DiffNode>> topo_order(const Var& root);

// First node (in evaluation order) whose value holds a NaN or infinity.
std::optional<std::string> first_non_finite(const Var& root);

// ---- primitives -----------------------------------------------------------

Var matmul(const Var& a, const Var& b);
// Batched product over the leading axis. Batch extents must match exactly.
Var bmm(const Var& a, const Var& b, bool transpose_b = false);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
// `y` has the rank of `x`; each extent of `y` is either 1 or equal to that of `x`.
Var broadcast_add(const Var& x, const Var& y);
Var broadcast_mul(const Var& x, const Var& y);

Var scale(const Var& x, double c);
// Multiply by a differentiable one-element tensor.
Var scale_by(const Var& x, const Var& s);

Var relu(const Var& x);
Var absolute(const Var& x);
Var sigmoid(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);

Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<std::size_t>& axes);
Var concat_last(const std::vector<Var>& parts);

// Softmax over the last axis. With a mask (shape [L_q, L_k], broadcast over leading axes)
// masked positions get weight exactly 0. A row with every entry masked comes out as all
// zeros and sets *empty_row when provided.
Var softmax_rows(const Var& x, const Tensor* mask = nullptr, bool* empty_row = nullptr);

// Per row over the last axis: x / sqrt(mean(x^2) + eps) * g.
Var rms_norm(const Var& x, const Var& g, double eps = 1e-8);
// Per row over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// Zero-padded cross-correlation, stride 1. input [C_in,H,W] or [B,C_in,H,W];
// kernels [C_out,C_in,kh,kw] with odd kh, kw.
Var conv2d(const Var& input, const Var& kernels, std::size_t padding);

// Rows of `table` ([rows, d]) selected by index, giving [indices.size(), d].
Var gather_rows(const Var& table, const std::vector<std::size_t>& indices);

// ---- oracle ---------------------------------------------------------------

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// ||a - b|| / max(||a|| + ||b||, floor). The floor keeps all-zero gradients from turning
// finite-difference round-off into a large ratio.
double relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-6);

}  // namespace ccds
