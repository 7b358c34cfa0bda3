// SPDX-License-Identifier: Apache-2.0
#include "awaker/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "awaker/error.hpp"

namespace awaker {

namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<void(Node&)>;

Tensor make_op(Shape shape, std::vector<double> data, const char* op,
               std::initializer_list<const Tensor*> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* p : parents) any = any || p->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor* p : parents) node->parents.push_back(p->node());
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    std::ostringstream os;
    os << op << ": expected rank " << rank << ", got shape " << shape_str(t.shape());
    throw ShapeError(os.str());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " does not match " +
                     shape_str(b.shape()));
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.numel() != 1) {
    throw ShapeError(std::string(op) + ": expected a one-element tensor, got " +
                     shape_str(s.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

double Tensor::item() const {
  if (numel() != 1) throw RankError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- tape -------------------------------------------------------------------

GradTape GradTape::record(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw RankError("backward requires a scalar loss, got " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  GradTape tape;
  tape.root_ = loss.node();
  if (!loss.requires_grad()) return tape;

  // Iterative post-order DFS.
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void GradTape::replay() {
  if (order_.empty()) return;
  root_->ensure_grad()[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (Node* node : order_) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
      if (node != root_.get()) node->grad.clear();
    }
  }
}

void backward(const Tensor& loss) { GradTape::record(loss).replay(); }

// ---- ops ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shape " + shape_str(a.shape()) + " incompatible with " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  }
  return make_op({m, n}, std::move(out), "matmul", {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& dy = self.grad;
    if (pa.requires_grad) {
      auto& da = pa.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += dy[i * n + j] * pb.data[p * n + j];
          da[i * k + p] += acc;
        }
    }
    if (pb.requires_grad) {
      auto& db = pb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * dy[i * n + j];
        }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  const bool vec = x.rank() == 1;
  if (w.rank() != 2 || (x.rank() != 1 && x.rank() != 2) || x.shape().back() != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  const std::size_t rows = vec ? 1 : x.dim(0);
  const std::size_t in = w.dim(1), out_dim = w.dim(0);
  std::vector<double> out(rows * out_dim);
  const double* X = x.data().data();
  const double* W = w.data().data();
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = X + t * in;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = W + o * in;
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      out[t * out_dim + o] = acc;
    }
  }
  Shape shape = vec ? Shape{out_dim} : Shape{rows, out_dim};
  return make_op(std::move(shape), std::move(out), "linear", {&x, &w},
                 [rows, in, out_dim](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pw = *self.parents[1];
                   const double* dy = self.grad.data();
                   if (px.requires_grad) {
                     double* dx = px.ensure_grad().data();
                     for (std::size_t t = 0; t < rows; ++t)
                       for (std::size_t o = 0; o < out_dim; ++o) {
                         const double g = dy[t * out_dim + o];
                         if (g == 0.0) continue;
                         const double* wr = pw.data.data() + o * in;
                         double* dxr = dx + t * in;
                         for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
                       }
                   }
                   if (pw.requires_grad) {
                     double* dw = pw.ensure_grad().data();
                     for (std::size_t t = 0; t < rows; ++t) {
                       const double* xr = px.data.data() + t * in;
                       for (std::size_t o = 0; o < out_dim; ++o) {
                         const double g = dy[t * out_dim + o];
                         if (g == 0.0) continue;
                         double* dwr = dw + o * in;
                         for (std::size_t i = 0; i < in; ++i) dwr[i] += g * xr[i];
                       }
                     }
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op(a.shape(), std::move(out), "add", {&a, &b}, [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      Node& parent = *self.parents[p];
      if (!parent.requires_grad) continue;
      auto& g = parent.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op(a.shape(), std::move(out), "mul", {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
  return make_op(x.shape(), std::move(out), "scale", {&x}, [c](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  require_scalar(s, "scale_by");
  const double c = s[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
  return make_op(x.shape(), std::move(out), "scale_by", {&x, &s}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ps.data[0];
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.data[i];
      ps.ensure_grad()[0] += acc;
    }
  });
}

Tensor rsub(double c, const Tensor& s) {
  require_scalar(s, "rsub");
  return make_op(s.shape(), {c - s[0]}, "rsub", {&s},
                 [](Node& self) { self.parents[0]->ensure_grad()[0] -= self.grad[0]; });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_op({}, {acc}, "sum", {&x}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  return make_op(x.shape(), std::move(out), "silu", {&x}, [](Node& self) {
    Node& px = *self.parents[0];
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px.data[i];
      const double s = 1.0 / (1.0 + std::exp(-v));
      g[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
    }
  });
}

Tensor softmax_row(const Tensor& v) {
  require_rank(v, 1, "softmax_row");
  double mx = -INFINITY;
  for (double x : v.data()) {
    if (std::isnan(x)) throw NumericError("softmax_row: NaN in input");
    mx = std::max(mx, x);
  }
  std::vector<double> out(v.numel());
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (double& x : out) x /= total;
  for (double x : out) {
    if (!std::isfinite(x)) throw NumericError("softmax_row: non-finite output");
  }
  return make_op(v.shape(), std::move(out), "softmax_row", {&v}, [](Node& self) {
    double dot = 0.0;
    for (std::size_t i = 0; i < self.data.size(); ++i) dot += self.grad[i] * self.data[i];
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.data[i] * (self.grad[i] - dot);
  });
}

Tensor select(const Tensor& v, std::size_t i) {
  require_rank(v, 1, "select");
  if (i >= v.numel()) throw ShapeError("select: index out of range for " + shape_str(v.shape()));
  return make_op({}, {v[i]}, "select", {&v},
                 [i](Node& self) { self.parents[0]->ensure_grad()[i] += self.grad[0]; });
}

Tensor mean_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "mean_rows");
  if (begin >= end || end > x.dim(0)) {
    throw ShapeError("mean_rows: invalid row range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") for " + shape_str(x.shape()));
  }
  const std::size_t d = x.dim(1);
  const double inv = 1.0 / static_cast<double>(end - begin);
  std::vector<double> out(d, 0.0);
  for (std::size_t t = begin; t < end; ++t)
    for (std::size_t j = 0; j < d; ++j) out[j] += x[t * d + j];
  for (double& v : out) v *= inv;
  return make_op({d}, std::move(out), "mean_rows", {&x}, [begin, end, d, inv](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t t = begin; t < end; ++t)
      for (std::size_t j = 0; j < d; ++j) g[t * d + j] += self.grad[j] * inv;
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& w, double eps) {
  require_rank(x, 2, "rms_norm");
  if (w.rank() != 1 || w.dim(0) != x.dim(1)) {
    throw ShapeError("rms_norm: gain " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), d = x.dim(1);
  auto inv_rms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(rows * d);
  for (std::size_t t = 0; t < rows; ++t) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += x[t * d + j] * x[t * d + j];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    (*inv_rms)[t] = r;
    for (std::size_t j = 0; j < d; ++j) out[t * d + j] = x[t * d + j] * r * w[j];
  }
  return make_op(x.shape(), std::move(out), "rms_norm", {&x, &w},
                 [rows, d, inv_rms](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pw = *self.parents[1];
                   for (std::size_t t = 0; t < rows; ++t) {
                     const double r = (*inv_rms)[t];
                     const double* xr = px.data.data() + t * d;
                     const double* dy = self.grad.data() + t * d;
                     if (pw.requires_grad) {
                       auto& dw = pw.ensure_grad();
                       for (std::size_t j = 0; j < d; ++j) dw[j] += dy[j] * xr[j] * r;
                     }
                     if (px.requires_grad) {
                       double dot = 0.0;  // Σ dxhat·xhat
                       for (std::size_t j = 0; j < d; ++j) dot += dy[j] * pw.data[j] * xr[j] * r;
                       dot /= static_cast<double>(d);
                       double* dx = px.ensure_grad().data() + t * d;
                       for (std::size_t j = 0; j < d; ++j)
                         dx[j] += r * (dy[j] * pw.data[j] - xr[j] * r * dot);
                     }
                   }
                 });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  if (ids.empty()) throw InputError("embedding: empty id sequence");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  std::vector<double> out(idv.size() * d);
  for (std::size_t t = 0; t < idv.size(); ++t) {
    if (idv[t] < 0 || static_cast<std::size_t>(idv[t]) >= vocab) {
      throw InputError("embedding: token id " + std::to_string(idv[t]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + idv[t] * d, d, out.begin() + t * d);
  }
  Shape shape{idv.size(), d};
  return make_op(std::move(shape), std::move(out), "embedding", {&table},
                 [idv = std::move(idv), d](Node& self) {
                   auto& g = self.parents[0]->ensure_grad();
                   for (std::size_t t = 0; t < idv.size(); ++t)
                     for (std::size_t j = 0; j < d; ++j) g[idv[t] * d + j] += self.grad[t * d + j];
                 });
}

Tensor rope(const Tensor& x, std::size_t heads, double theta) {
  require_rank(x, 2, "rope");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (heads == 0 || d % heads != 0 || (d / heads) % 2 != 0) {
    throw ShapeError("rope: width " + std::to_string(d) + " not divisible into " +
                     std::to_string(heads) + " even-sized heads");
  }
  const std::size_t dh = d / heads, half = dh / 2;
  auto cs = std::make_shared<std::vector<double>>(rows * half * 2);
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = static_cast<double>(t) * freq;
      (*cs)[(t * half + i) * 2] = std::cos(angle);
      (*cs)[(t * half + i) * 2 + 1] = std::sin(angle);
    }
  std::vector<double> out(x.numel());
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t a = t * d + h * dh + i, b = a + half;
        const double c = (*cs)[(t * half + i) * 2], s = (*cs)[(t * half + i) * 2 + 1];
        out[a] = x[a] * c - x[b] * s;
        out[b] = x[a] * s + x[b] * c;
      }
  return make_op(x.shape(), std::move(out), "rope", {&x}, [rows, d, heads, dh, half, cs](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < half; ++i) {
          const std::size_t a = t * d + h * dh + i, b = a + half;
          const double c = (*cs)[(t * half + i) * 2], s = (*cs)[(t * half + i) * 2 + 1];
          g[a] += self.grad[a] * c + self.grad[b] * s;
          g[b] += -self.grad[a] * s + self.grad[b] * c;
        }
  });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  require_rank(q, 2, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t rows = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[h][i][j], j ≤ i
  auto probs = std::make_shared<std::vector<double>>(heads * rows * rows, 0.0);
  std::vector<double> out(rows * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < rows; ++i) {
      double* p = probs->data() + (h * rows + i) * rows;
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        p[j] = s * sc;
        mx = std::max(mx, p[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= total;
        for (std::size_t c = 0; c < dh; ++c) out[i * d + h * dh + c] += p[j] * v[j * d + h * dh + c];
      }
    }
  }
  return make_op(q.shape(), std::move(out), "causal_attention", {&q, &k, &v},
                 [rows, d, heads, dh, sc, probs](Node& self) {
                   Node& pq = *self.parents[0];
                   Node& pk = *self.parents[1];
                   Node& pv = *self.parents[2];
                   std::vector<double> dq(rows * d, 0.0), dk(rows * d, 0.0), dv(rows * d, 0.0);
                   std::vector<double> dp(rows);
                   for (std::size_t h = 0; h < heads; ++h) {
                     for (std::size_t i = 0; i < rows; ++i) {
                       const double* p = probs->data() + (h * rows + i) * rows;
                       const double* go = self.grad.data() + i * d + h * dh;
                       double dot = 0.0;
                       for (std::size_t j = 0; j <= i; ++j) {
                         double acc = 0.0;
                         for (std::size_t c = 0; c < dh; ++c) {
                           acc += go[c] * pv.data[j * d + h * dh + c];
                           dv[j * d + h * dh + c] += p[j] * go[c];
                         }
                         dp[j] = acc;
                         dot += acc * p[j];
                       }
                       for (std::size_t j = 0; j <= i; ++j) {
                         const double ds = p[j] * (dp[j] - dot) * sc;
                         if (ds == 0.0) continue;
                         for (std::size_t c = 0; c < dh; ++c) {
                           dq[i * d + h * dh + c] += ds * pk.data[j * d + h * dh + c];
                           dk[j * d + h * dh + c] += ds * pq.data[i * d + h * dh + c];
                         }
                       }
                     }
                   }
                   auto accumulate = [](Node& n, const std::vector<double>& src) {
                     if (!n.requires_grad) return;
                     auto& g = n.ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
                   };
                   accumulate(pq, dq);
                   accumulate(pk, dk);
                   accumulate(pv, dv);
                 });
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                            const std::vector<bool>& mask) {
  require_rank(logits, 2, "cross_entropy_masked");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy_masked: " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask flags for logits " +
                     shape_str(logits.shape()));
  }
  std::vector<std::size_t> active;
  for (std::size_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw InputError("cross_entropy_masked: target " + std::to_string(targets[t]) +
                       " outside vocabulary");
    }
    active.push_back(t);
  }
  if (active.empty()) throw InputError("cross_entropy_masked: mask selects no positions (empty loss)");

  auto probs = std::make_shared<std::vector<double>>(active.size() * vocab);
  std::vector<int> tgt;
  double loss = 0.0;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t t = active[a];
    const double* row = logits.data().data() + t * vocab;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < vocab; ++j) {
      if (std::isnan(row[j])) throw NumericError("cross_entropy_masked: NaN logit");
      mx = std::max(mx, row[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) total += std::exp(row[j] - mx);
    const double log_z = mx + std::log(total);
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[a * vocab + j] = std::exp(row[j] - log_z);
    loss += log_z - row[targets[t]];
    tgt.push_back(targets[t]);
  }
  const double inv = 1.0 / static_cast<double>(active.size());
  return make_op({}, {loss * inv}, "cross_entropy_masked", {&logits},
                 [active = std::move(active), tgt = std::move(tgt), probs, vocab, inv](Node& self) {
                   auto& g = self.parents[0]->ensure_grad();
                   const double up = self.grad[0] * inv;
                   for (std::size_t a = 0; a < active.size(); ++a) {
                     double* gr = g.data() + active[a] * vocab;
                     const double* p = probs->data() + a * vocab;
                     for (std::size_t j = 0; j < vocab; ++j) gr[j] += up * p[j];
                     gr[tgt[a]] -= up;
                   }
                 });
}

}  // namespace awaker
