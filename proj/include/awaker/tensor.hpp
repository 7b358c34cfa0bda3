// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a reverse-mode gradient tape. Every op checks
// shapes eagerly and records its parents only when a parent needs a gradient,
// so frozen weights and eval-mode forwards never grow a graph.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace awaker {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access; only for leaves (initialization, optimizer, loading).
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  double item() const;
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Leaf copy with the same values and no history.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
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

/// Reverse topological order of every node reachable from a scalar loss
/// through nodes that require gradients.
class GradTape {
 public:
  static GradTape record(const Tensor& loss);

  const std::vector<Node*>& nodes() const { return order_; }
  /// Seeds d(loss)/d(loss) = 1 and runs each node's backward rule once,
  /// in reverse order, then releases intermediate history.
  void replay();

 private:
  std::vector<Node*> order_;  // topological: parents before children
  std::shared_ptr<Node> root_;
};

void backward(const Tensor& loss);

// ---- ops ------------------------------------------------------------------

/// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[T×in] · wᵀ with w[out×in]. A 1-D x of length `in` yields a 1-D result.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
/// x · s for a one-element tensor s.
Tensor scale_by(const Tensor& x, const Tensor& s);
/// c − s for a one-element tensor s.
Tensor rsub(double c, const Tensor& s);
Tensor sum(const Tensor& x);
Tensor silu(const Tensor& x);
/// Numerically stable softmax of a 1-D tensor.
Tensor softmax_row(const Tensor& v);
/// Element i of a 1-D tensor as a scalar.
Tensor select(const Tensor& v, std::size_t i);
/// Mean of rows [begin, end) of x[T×d], as a 1-D tensor of length d.
Tensor mean_rows(const Tensor& x, std::size_t begin, std::size_t end);
/// Row-wise RMS normalization with a learned gain w[d].
Tensor rms_norm(const Tensor& x, const Tensor& w, double eps);
/// Rows of table[V×d] gathered by id.
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// Rotary position embedding over `heads` head slices of x[T×d] (half-split pairing).
Tensor rope(const Tensor& x, std::size_t heads, double theta);
/// Multi-head causal scaled dot-product attention over q, k, v [T×d].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);
/// Mean negative log-likelihood of targets over positions where mask is set.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                            const std::vector<bool>& mask);

}  // namespace awaker
