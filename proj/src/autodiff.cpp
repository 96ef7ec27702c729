#include "ccds/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "ccds/errors.hpp"

namespace ccds {

namespace {

using NodePtr = std::shared_ptr<DiffNode>;

Var make_node(Tensor value, std::string op, std::vector<NodePtr> parents,
              std::function<void(DiffNode&)> bw) {
  auto n = std::make_shared<DiffNode>();
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  n->grad = Tensor(value.shape());
  n->value = std::move(value);
  n->op = std::move(op);
  n->parents = std::move(parents);
  if (n->requires_grad) n->backward = std::move(bw);
  return Var(std::move(n));
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Var& x, std::size_t rank) {
  if (x.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

// Maps each flat index of `xs` to the flat index of `ys` under size-1 broadcasting.
std::vector<std::size_t> broadcast_map(const char* op, const Shape& xs, const Shape& ys) {
  if (xs.size() != ys.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(xs) + " vs " + shape_str(ys));
  }
  const std::size_t r = xs.size();
  std::vector<std::size_t> ystride(r, 0);
  std::size_t s = 1;
  for (std::size_t k = r; k-- > 0;) {
    if (ys[k] != xs[k] && ys[k] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(ys) + " to " + shape_str(xs));
    }
    ystride[k] = ys[k] == 1 ? 0 : s;
    s *= ys[k];
  }
  const std::size_t n = shape_numel(xs);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t yoff = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = yoff;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      yoff += ystride[k];
      if (idx[k] < xs[k]) break;
      yoff -= ystride[k] * idx[k];
      idx[k] = 0;
    }
  }
  return map;
}

// rows x cols view of the last axis.
std::pair<std::size_t, std::size_t> rows_cols(const Shape& s) {
  const std::size_t cols = s.back();
  return {shape_numel(s) / cols, cols};
}

}  // namespace

Var Var::constant(Tensor value) {
  auto n = std::make_shared<DiffNode>();
  n->grad = Tensor(value.shape());
  n->value = std::move(value);
  n->op = "constant";
  return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
  auto n = std::make_shared<DiffNode>();
  n->grad = Tensor(value.shape());
  n->value = std::move(value);
  n->op = "parameter";
  n->requires_grad = true;
  return Var(std::move(n));
}

std::vector<NodePtr> topo_order(const Var& root) {
  std::vector<NodePtr> order;
  std::unordered_set<const DiffNode*> seen;
  // Iterative post-order DFS; graphs can be thousands of nodes deep.
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const NodePtr& p = node->parents[next++];
      if (seen.insert(p.get()).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void backward(const Var& root) {
  if (root.value().size() != 1) {
    throw ContractError("backward: root must be scalar, got " + shape_str(root.shape()));
  }
  auto order = topo_order(root);
  for (auto& n : order) {
    if (!n->is_leaf()) n->grad.fill(0.0);
  }
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    DiffNode& n = **it;
    if (n.requires_grad && n.backward) n.backward(n);
  }
}

std::optional<std::string> first_non_finite(const Var& root) {
  for (const auto& n : topo_order(root)) {
    if (!n->value.all_finite()) return n->op + " " + shape_str(n->value.shape());
  }
  return std::nullopt;
}

// ---- linear algebra ---------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  const auto& A = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B.data().data() + p * n;
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_node(std::move(out), "matmul", {a.node(), b.node()}, [m, k, n](DiffNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& G = self.grad;
    if (pa.requires_grad) {
      // dA = G · Bᵀ
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * pb.value[p * n + j];
          pa.grad[i * k + p] += acc;
        }
    }
    if (pb.requires_grad) {
      // dB = Aᵀ · G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = pa.value[i * k + p];
          for (std::size_t j = 0; j < n; ++j) pb.grad[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

Var bmm(const Var& a, const Var& b, bool transpose_b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("bmm: incompatible " + shape_str(a.shape()) + " · " + shape_str(b.shape()) +
                         (transpose_b ? "ᵀ" : ""));
  }
  // Element (p, j) of the logical right operand.
  auto bidx = [=](std::size_t s, std::size_t p, std::size_t j) {
    return transpose_b ? (s * n + j) * k + p : (s * k + p) * n + j;
  };
  Tensor out({batch, m, n});
  const auto& A = a.value();
  const auto& B = b.value();
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += A[(s * m + i) * k + p] * B[bidx(s, p, j)];
        out[(s * m + i) * n + j] = acc;
      }
  return make_node(std::move(out), "bmm", {a.node(), b.node()}, [=](DiffNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& G = self.grad;
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[(s * m + i) * n + j];
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) {
            if (pa.requires_grad) pa.grad[(s * m + i) * k + p] += g * pb.value[bidx(s, p, j)];
            if (pb.requires_grad) pb.grad[bidx(s, p, j)] += g * pa.value[(s * m + i) * k + p];
          }
        }
  });
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_node(std::move(out), "add", {a.node(), b.node()}, [](DiffNode& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_node(std::move(out), "sub", {a.node(), b.node()}, [](DiffNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_node(std::move(out), "mul", {a.node(), b.node()}, [](DiffNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var broadcast_add(const Var& x, const Var& y) {
  auto map = broadcast_map("broadcast_add", x.shape(), y.shape());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y.value()[map[i]];
  return make_node(std::move(out), "broadcast_add", {x.node(), y.node()},
                   [map = std::move(map)](DiffNode& self) {
                     auto& px = *self.parents[0];
                     auto& py = *self.parents[1];
                     for (std::size_t i = 0; i < self.grad.size(); ++i) {
                       if (px.requires_grad) px.grad[i] += self.grad[i];
                       if (py.requires_grad) py.grad[map[i]] += self.grad[i];
                     }
                   });
}

Var broadcast_mul(const Var& x, const Var& y) {
  auto map = broadcast_map("broadcast_mul", x.shape(), y.shape());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y.value()[map[i]];
  return make_node(std::move(out), "broadcast_mul", {x.node(), y.node()},
                   [map = std::move(map)](DiffNode& self) {
                     auto& px = *self.parents[0];
                     auto& py = *self.parents[1];
                     for (std::size_t i = 0; i < self.grad.size(); ++i) {
                       if (px.requires_grad) px.grad[i] += self.grad[i] * py.value[map[i]];
                       if (py.requires_grad) py.grad[map[i]] += self.grad[i] * px.value[i];
                     }
                   });
}

Var scale(const Var& x, double c) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= c;
  return make_node(std::move(out), "scale", {x.node()}, [c](DiffNode& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  });
}

Var scale_by(const Var& x, const Var& s) {
  if (s.value().size() != 1) throw DimensionError("scale_by: factor must have one element, got " + shape_str(s.shape()));
  const double c = s.value()[0];
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= c;
  return make_node(std::move(out), "scale_by", {x.node(), s.node()}, [](DiffNode& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    const double c = ps.value[0];
    double acc = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (px.requires_grad) px.grad[i] += c * self.grad[i];
      acc += self.grad[i] * px.value[i];
    }
    if (ps.requires_grad) ps.grad[0] += acc;
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), "relu", {x.node()}, [](DiffNode& self) {
    auto& p = *self.parents[0];
    // Subgradient at exactly 0 is 0.
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

Var absolute(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = std::abs(v);
  return make_node(std::move(out), "abs", {x.node()}, [](DiffNode& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = p.value[i];
      if (v > 0.0) p.grad[i] += self.grad[i];
      else if (v < 0.0) p.grad[i] -= self.grad[i];
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = 1.0 / (1.0 + std::exp(-v));
  return make_node(std::move(out), "sigmoid", {x.node()}, [](DiffNode& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      p.grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return make_node(Tensor::scalar(acc), "sum", {x.node()}, [](DiffNode& self) {
    auto& p = *self.parents[0];
    const double g = self.grad[0];
    for (auto& v : p.grad.storage()) v += g;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// ---- layout -----------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_node(std::move(out), "reshape", {x.node()}, [](DiffNode& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Var permute(const Var& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw DimensionError("permute: axes count differs from rank of " + shape_str(in));
  std::vector<bool> used(r, false);
  for (auto a : axes) {
    if (a >= r || used[a]) throw DimensionError("permute: invalid axis order for " + shape_str(in));
    used[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t k = 0; k < r; ++k) out_shape[k] = in[axes[k]];
  std::vector<std::size_t> in_stride(r);
  std::size_t s = 1;
  for (std::size_t k = r; k-- > 0;) {
    in_stride[k] = s;
    s *= in[k];
  }
  // src[i] = flat input index feeding flat output index i.
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = off;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      off += in_stride[axes[k]];
      if (idx[k] < out_shape[k]) break;
      off -= in_stride[axes[k]] * idx[k];
      idx[k] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[src[i]];
  return make_node(std::move(out), "permute", {x.node()}, [src = std::move(src)](DiffNode& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[src[i]] += self.grad[i];
  });
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    widths.push_back(l.back());
    total += l.back();
    l.pop_back();
    if (l != lead) throw DimensionError("concat_last: leading extents differ, " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
  }
  const std::size_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t off = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto& v = parts[q].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[q]; ++c) out[r * total + off + c] = v[r * widths[q] + c];
    off += widths[q];
  }
  std::vector<std::shared_ptr<DiffNode>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_node(std::move(out), "concat", std::move(nodes), [rows, total, widths](DiffNode& self) {
    std::size_t off = 0;
    for (std::size_t q = 0; q < self.parents.size(); ++q) {
      auto& p = *self.parents[q];
      if (p.requires_grad)
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[q]; ++c) p.grad[r * widths[q] + c] += self.grad[r * total + off + c];
      off += widths[q];
    }
  });
}

// ---- normalization ----------------------------------------------------------

Var softmax_rows(const Var& x, const Tensor* mask, bool* empty_row) {
  const auto [rows, cols] = rows_cols(x.shape());
  std::size_t mask_rows = 0;
  if (mask) {
    if (mask->rank() != 2 || mask->dim(1) != cols || x.value().rank() < 2 || mask->dim(0) != x.shape()[x.value().rank() - 2]) {
      throw DimensionError("softmax_rows: mask " + shape_str(mask->shape()) + " does not fit scores " + shape_str(x.shape()));
    }
    mask_rows = mask->dim(0);
  }
  if (empty_row) *empty_row = false;
  Tensor out(x.shape());
  const auto& X = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* m = mask ? mask->data().data() + (r % mask_rows) * cols : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (!m || m[c] != 0.0) mx = std::max(mx, X[r * cols + c]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      if (empty_row) *empty_row = true;
      continue;  // row stays zero
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (m && m[c] == 0.0) continue;
      const double e = std::exp(X[r * cols + c] - mx);
      out[r * cols + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return make_node(std::move(out), "softmax", {x.node()}, [rows, cols](DiffNode& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * self.value[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const double y = self.value[r * cols + c];
        p.grad[r * cols + c] += y * (self.grad[r * cols + c] - dot);
      }
    }
  });
}

Var rms_norm(const Var& x, const Var& g, double eps) {
  if (!(eps > 0.0)) throw ContractError("rms_norm: eps must be positive");
  const auto [rows, cols] = rows_cols(x.shape());
  if (g.value().size() != cols) {
    throw DimensionError("rms_norm: gain " + shape_str(g.shape()) + " does not match rows of " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> inv_rms(rows);
  const auto& X = x.value();
  const auto& G = g.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += X[r * cols + c] * X[r * cols + c];
    inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(cols) + eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = X[r * cols + c] * inv_rms[r] * G[c];
  }
  return make_node(std::move(out), "rms_norm", {x.node(), g.node()},
                   [rows, cols, inv_rms = std::move(inv_rms)](DiffNode& self) {
                     auto& px = *self.parents[0];
                     auto& pg = *self.parents[1];
                     const double n = static_cast<double>(cols);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double s = inv_rms[r];
                       // With y_c = x_c s g_c: dx_c = s g_c dy_c - x_c s^3 / n * sum_j dy_j g_j x_j
                       double dot = 0.0;
                       for (std::size_t c = 0; c < cols; ++c)
                         dot += self.grad[r * cols + c] * pg.value[c] * px.value[r * cols + c];
                       for (std::size_t c = 0; c < cols; ++c) {
                         const double xv = px.value[r * cols + c];
                         const double dy = self.grad[r * cols + c];
                         if (px.requires_grad) px.grad[r * cols + c] += s * pg.value[c] * dy - xv * s * s * s * dot / n;
                         if (pg.requires_grad) pg.grad[c] += dy * xv * s;
                       }
                     }
                   });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const auto [rows, cols] = rows_cols(x.shape());
  if (gain.value().size() != cols || bias.value().size() != cols) {
    throw DimensionError("layer_norm: gain/bias do not match rows of " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  const auto& X = x.value();
  const double n = static_cast<double>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += X[r * cols + c];
    mu /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (X[r * cols + c] - mu) * (X[r * cols + c] - mu);
    var /= n;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (X[r * cols + c] - mu) * inv_std[r];
      out[r * cols + c] = xhat[r * cols + c] * gain.value()[c] + bias.value()[c];
    }
  }
  return make_node(std::move(out), "layer_norm", {x.node(), gain.node(), bias.node()},
                   [rows, cols, inv_std = std::move(inv_std), xhat = std::move(xhat)](DiffNode& self) {
                     auto& px = *self.parents[0];
                     auto& pg = *self.parents[1];
                     auto& pb = *self.parents[2];
                     const double n = static_cast<double>(cols);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double sum_d = 0.0, sum_dx = 0.0;
                       for (std::size_t c = 0; c < cols; ++c) {
                         const double d = self.grad[r * cols + c] * pg.value[c];
                         sum_d += d;
                         sum_dx += d * xhat[r * cols + c];
                       }
                       for (std::size_t c = 0; c < cols; ++c) {
                         const double dy = self.grad[r * cols + c];
                         const double xh = xhat[r * cols + c];
                         if (px.requires_grad) {
                           const double d = dy * pg.value[c];
                           px.grad[r * cols + c] += inv_std[r] * (d - sum_d / n - xh * sum_dx / n);
                         }
                         if (pg.requires_grad) pg.grad[c] += dy * xh;
                         if (pb.requires_grad) pb.grad[c] += dy;
                       }
                     }
                   });
}

// ---- convolution ------------------------------------------------------------

Var conv2d(const Var& input, const Var& kernels, std::size_t padding) {
  const auto& is = input.shape();
  if (is.size() != 3 && is.size() != 4) {
    throw DimensionError("conv2d: input must be [C,H,W] or [B,C,H,W], got " + shape_str(is));
  }
  require_rank("conv2d kernels", kernels, 4);
  const bool batched = is.size() == 4;
  const std::size_t B = batched ? is[0] : 1;
  const std::size_t cin = is[batched ? 1 : 0], H = is[batched ? 2 : 1], W = is[batched ? 3 : 2];
  const auto& ks = kernels.shape();
  const std::size_t cout = ks[0], kh = ks[2], kw = ks[3];
  if (ks[1] != cin) {
    throw DimensionError("conv2d: kernel " + shape_str(ks) + " expects " + std::to_string(ks[1]) +
                         " input channels, input " + shape_str(is) + " has " + std::to_string(cin));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d: kernel extents must be odd, got " + shape_str(ks));
  if (kh > H + 2 * padding || kw > W + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(ks) + " larger than padded input " + shape_str(is));
  }
  const std::size_t Ho = H + 2 * padding - kh + 1, Wo = W + 2 * padding - kw + 1;
  Shape out_shape = batched ? Shape{B, cout, Ho, Wo} : Shape{cout, Ho, Wo};
  Tensor out(out_shape);
  const auto& X = input.value();
  const auto& K = kernels.value();
  const auto P = static_cast<std::ptrdiff_t>(padding);
  // Calls fn(out_index, in_index, kernel_index) for every contributing triple.
  auto visit = [=](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t y = 0; y < Ho; ++y)
          for (std::size_t x = 0; x < Wo; ++x) {
            const std::size_t oi = ((b * cout + o) * Ho + y) * Wo + x;
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t dy = 0; dy < kh; ++dy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - P;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t dx = 0; dx < kw; ++dx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - P;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                  const std::size_t ii = ((b * cin + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
                  const std::size_t ki = ((o * cin + c) * kh + dy) * kw + dx;
                  fn(oi, ii, ki);
                }
              }
          }
  };
  visit([&](std::size_t oi, std::size_t ii, std::size_t ki) { out[oi] += X[ii] * K[ki]; });
  return make_node(std::move(out), "conv2d", {input.node(), kernels.node()}, [visit](DiffNode& self) {
    auto& px = *self.parents[0];
    auto& pk = *self.parents[1];
    visit([&](std::size_t oi, std::size_t ii, std::size_t ki) {
      const double g = self.grad[oi];
      if (px.requires_grad) px.grad[ii] += g * pk.value[ki];
      if (pk.requires_grad) pk.grad[ki] += g * px.value[ii];
    });
  });
}

Var gather_rows(const Var& table, const std::vector<std::size_t>& indices) {
  require_rank("gather_rows", table, 2);
  const std::size_t rows = table.dim(0), d = table.dim(1);
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  Tensor out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " outside table " + shape_str(table.shape()));
    }
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = table.value()[indices[i] * d + c];
  }
  return make_node(std::move(out), "gather_rows", {table.node()}, [indices, d](DiffNode& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) p.grad[indices[i] * d + c] += self.grad[i * d + c];
  });
}

// ---- oracle -----------------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (analytic.shape() != numeric.shape()) {
    throw DimensionError("relative_error: shape mismatch " + shape_str(analytic.shape()) + " vs " + shape_str(numeric.shape()));
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), floor);
}

}  // namespace ccds
