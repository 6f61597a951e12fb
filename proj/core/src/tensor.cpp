#include "blendiff/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "blendiff/errors.hpp"

namespace blendiff {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>;

ConstMatMap as_mat(const TensorNode& n) {
  return ConstMatMap(n.data.data(), n.shape[0], n.shape[1]);
}
MatMap as_grad_mat(TensorNode& n) {
  return MatMap(n.grad.data(), n.shape[0], n.shape[1]);
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw contract_error(msg);
}

void require_2d(const Tensor& t, const char* op) {
  require(t.ndim() == 2, std::string(op) + ": expected 2-D tensor, got shape " +
                             shape_str(t.shape()));
}

Tensor make_op(const char* op, Shape shape, std::vector<float> data,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool rg = false;
  n->parents.reserve(parents.size());
  for (const auto& p : parents) {
    rg = rg || p.node()->requires_grad;
    n->parents.push_back(p.node());
  }
  n->requires_grad = rg;
  if (rg) n->backward = std::move(backward);
  return Tensor(std::move(n));
}

}  // namespace

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void TensorNode::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.f);
}

Tensor Tensor::zeros(Shape shape) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(numel(shape), 0.f);
  n->shape = std::move(shape);
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, float value) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(numel(shape), value);
  n->shape = std::move(shape);
  return Tensor(std::move(n));
}

Tensor Tensor::from_vec(Shape shape, std::vector<float> data) {
  require(numel(shape) == static_cast<int64_t>(data.size()),
          "from_vec: shape " + shape_str(shape) + " does not match " +
              std::to_string(data.size()) + " values");
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev) {
  auto n = std::make_shared<TensorNode>();
  n->data.resize(numel(shape));
  for (auto& v : n->data) v = rng.normal() * stddev;
  n->shape = std::move(shape);
  return Tensor(std::move(n));
}

Tensor Tensor::param(Shape shape, Rng& rng, float stddev) {
  Tensor t = randn(std::move(shape), rng, stddev);
  t.set_requires_grad(true);
  return t;
}

float Tensor::item() const {
  require(size() == 1, "item: tensor has " + std::to_string(size()) +
                           " elements, expected 1");
  return node_->data[0];
}

void Tensor::set_requires_grad(bool rg) {
  node_->requires_grad = rg;
  if (rg) {
    node_->ensure_grad();
  } else {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

void Tensor::zero_grad() {
  if (node_->requires_grad) {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), 0.f);
  }
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

void Tensor::backward() {
  require(size() == 1, "backward: output must be scalar, got shape " +
                           shape_str(shape()));
  if (!node_->requires_grad)
    throw contract_error("backward: output does not require grad");

  // Iterative post-order DFS; children processed before parents in reverse.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      TensorNode* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (TensorNode* n : order) n->ensure_grad();
  node_->grad[0] = 1.f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward) n->backward(*n);
  }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto da = a.data();
  const auto db = b.data();
  return std::memcmp(da.data(), db.data(), da.size() * sizeof(float)) == 0;
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw contract_error("matmul: inner dimensions mismatch: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), n = b.dim(1);
  std::vector<float> out(static_cast<size_t>(m) * n);
  MatMap(out.data(), m, n).noalias() = as_mat(*a.node()) * as_mat(*b.node());
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [](TensorNode& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   ConstMatMap dc(self.grad.data(), self.shape[0], self.shape[1]);
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     as_grad_mat(pa).noalias() += dc * as_mat(pb).transpose();
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     as_grad_mat(pb).noalias() += as_mat(pa).transpose() * dc;
                   }
                 });
}

// ---- softmax ---------------------------------------------------------------

Tensor softmax_rows(const Tensor& logits) {
  require_2d(logits, "softmax_rows");
  const int r = logits.dim(0), c = logits.dim(1);
  const auto x = logits.data();
  std::vector<float> out(x.size());
  for (int i = 0; i < r; ++i) {
    const float* row = x.data() + static_cast<size_t>(i) * c;
    float* orow = out.data() + static_cast<size_t>(i) * c;
    float mx = row[0];
    for (int j = 0; j < c; ++j) {
      if (std::isnan(row[j]))
        throw numeric_error("softmax_rows: NaN logit at row " +
                            std::to_string(i));
      mx = std::max(mx, row[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int j = 0; j < c; ++j) orow[j] *= inv;
  }
  return make_op("softmax_rows", {r, c}, std::move(out), {logits},
                 [r, c](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (int i = 0; i < r; ++i) {
                     const float* y = self.data.data() + static_cast<size_t>(i) * c;
                     const float* dy = self.grad.data() + static_cast<size_t>(i) * c;
                     float* dx = p.grad.data() + static_cast<size_t>(i) * c;
                     double dot = 0.0;
                     for (int j = 0; j < c; ++j) dot += double(dy[j]) * y[j];
                     for (int j = 0; j < c; ++j)
                       dx[j] += y[j] * (dy[j] - static_cast<float>(dot));
                   }
                 });
}

// ---- layernorm -------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps) {
  require_2d(x, "layernorm");
  const int n = x.dim(0), d = x.dim(1);
  if (d == 0) throw contract_error("layernorm: zero feature dimension");
  require(d >= 2, "layernorm: feature dimension must be >= 2, got " +
                      std::to_string(d));
  require(numel(gain.shape()) == d && numel(bias.shape()) == d,
          "layernorm: gain/bias shape " + shape_str(gain.shape()) + "/" +
              shape_str(bias.shape()) + " do not match feature dim " +
              std::to_string(d));

  const auto xv = x.data();
  const auto g = gain.data();
  const auto b = bias.data();
  std::vector<float> out(xv.size());
  std::vector<float> mean(n), rstd(n);
  for (int i = 0; i < n; ++i) {
    const float* row = xv.data() + static_cast<size_t>(i) * d;
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += row[j];
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double t = row[j] - m;
      var += t * t;
    }
    var /= d;
    mean[i] = static_cast<float>(m);
    rstd[i] = static_cast<float>(1.0 / std::sqrt(var + eps));
    float* orow = out.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j)
      orow[j] = (row[j] - mean[i]) * rstd[i] * g[j] + b[j];
  }
  return make_op(
      "layernorm", {n, d}, std::move(out), {x, gain, bias},
      [n, d, mean = std::move(mean), rstd = std::move(rstd)](TensorNode& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const float* g = pg.data.data();
        for (int i = 0; i < n; ++i) {
          const float* xrow = px.data.data() + static_cast<size_t>(i) * d;
          const float* dy = self.grad.data() + static_cast<size_t>(i) * d;
          // dnorm statistics shared by all three parents
          double dn_mean = 0.0, dnn_mean = 0.0;
          for (int j = 0; j < d; ++j) {
            float norm = (xrow[j] - mean[i]) * rstd[i];
            float dn = g[j] * dy[j];
            dn_mean += dn;
            dnn_mean += double(dn) * norm;
          }
          dn_mean /= d;
          dnn_mean /= d;
          if (pg.requires_grad || pb.requires_grad) {
            pg.ensure_grad();
            pb.ensure_grad();
            for (int j = 0; j < d; ++j) {
              float norm = (xrow[j] - mean[i]) * rstd[i];
              if (pg.requires_grad) pg.grad[j] += norm * dy[j];
              if (pb.requires_grad) pb.grad[j] += dy[j];
            }
          }
          if (px.requires_grad) {
            px.ensure_grad();
            float* dx = px.grad.data() + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) {
              float norm = (xrow[j] - mean[i]) * rstd[i];
              float dn = g[j] * dy[j];
              dx[j] += rstd[i] * (dn - static_cast<float>(dn_mean) -
                                  norm * static_cast<float>(dnn_mean));
            }
          }
        }
      });
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw contract_error("add: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op("add", a.shape(), std::move(out), {a, b},
                 [](TensorNode& self) {
                   for (auto& p : self.parents) {
                     if (!p->requires_grad) continue;
                     p->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       p->grad[i] += self.grad[i];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw contract_error("mul: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op("mul", a.shape(), std::move(out), {a, b},
                 [](TensorNode& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pa.grad[i] += self.grad[i] * pb.data[i];
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pb.grad[i] += self.grad[i] * pa.data[i];
                   }
                 });
}

Tensor scale(const Tensor& x, float s) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  return make_op("scale", x.shape(), std::move(out), {x},
                 [s](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     p.grad[i] += self.grad[i] * s;
                 });
}

namespace {
constexpr float kInvSqrt2 = 0.7071067811865476f;
constexpr float kInvSqrt2Pi = 0.3989422804014327f;
}  // namespace

Tensor gelu(const Tensor& x) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) {
    float v = xv[i];
    out[i] = 0.5f * v * (1.f + std::erf(v * kInvSqrt2));
  }
  return make_op("gelu", x.shape(), std::move(out), {x},
                 [](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i) {
                     float v = p.data[i];
                     float cdf = 0.5f * (1.f + std::erf(v * kInvSqrt2));
                     float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
                     p.grad[i] += self.grad[i] * (cdf + v * pdf);
                   }
                 });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require_2d(table, "embedding_lookup");
  const int v = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(ids.size());
  for (int id : ids)
    require(id >= 0 && id < v, "embedding_lookup: id " + std::to_string(id) +
                                   " out of range [0," + std::to_string(v) + ")");
  const auto tv = table.data();
  std::vector<float> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    std::copy_n(tv.data() + static_cast<size_t>(ids[i]) * d, d,
                out.data() + static_cast<size_t>(i) * d);
  return make_op("embedding_lookup", {n, d}, std::move(out), {table},
                 [ids, d](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < ids.size(); ++i) {
                     float* dst = p.grad.data() + static_cast<size_t>(ids[i]) * d;
                     const float* src = self.grad.data() + i * d;
                     for (int j = 0; j < d; ++j) dst[j] += src[j];
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: empty input list");
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  for (const auto& p : parts) require_2d(p, "concat");
  const int fixed = parts[0].dim(1 - axis);
  int total = 0;
  for (const auto& p : parts) {
    require(p.dim(1 - axis) == fixed,
            "concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                shape_str(p.shape()));
    total += p.dim(axis);
  }
  Shape out_shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  std::vector<float> out(numel(out_shape));
  if (axis == 0) {
    size_t off = 0;
    for (const auto& p : parts) {
      const auto pv = p.data();
      std::copy(pv.begin(), pv.end(), out.begin() + off);
      off += pv.size();
    }
  } else {
    int col = 0;
    for (const auto& p : parts) {
      const auto pv = p.data();
      const int pc = p.dim(1);
      for (int i = 0; i < fixed; ++i)
        std::copy_n(pv.data() + static_cast<size_t>(i) * pc, pc,
                    out.data() + static_cast<size_t>(i) * total + col);
      col += pc;
    }
  }
  std::vector<Tensor> parents = parts;
  return make_op("concat", out_shape, std::move(out), std::move(parents),
                 [axis, fixed, total](TensorNode& self) {
                   if (axis == 0) {
                     size_t off = 0;
                     for (auto& p : self.parents) {
                       if (p->requires_grad) {
                         p->ensure_grad();
                         for (size_t i = 0; i < p->data.size(); ++i)
                           p->grad[i] += self.grad[off + i];
                       }
                       off += p->data.size();
                     }
                   } else {
                     int col = 0;
                     for (auto& p : self.parents) {
                       const int pc = p->shape[1];
                       if (p->requires_grad) {
                         p->ensure_grad();
                         for (int i = 0; i < fixed; ++i)
                           for (int j = 0; j < pc; ++j)
                             p->grad[static_cast<size_t>(i) * pc + j] +=
                                 self.grad[static_cast<size_t>(i) * total + col + j];
                       }
                       col += pc;
                     }
                   }
                 });
}

Tensor transpose(const Tensor& x) {
  require_2d(x, "transpose");
  const int r = x.dim(0), c = x.dim(1);
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(j) * r + i] = xv[static_cast<size_t>(i) * c + j];
  return make_op("transpose", {c, r}, std::move(out), {x},
                 [r, c](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (int i = 0; i < r; ++i)
                     for (int j = 0; j < c; ++j)
                       p.grad[static_cast<size_t>(i) * c + j] +=
                           self.grad[static_cast<size_t>(j) * r + i];
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " +
              shape_str(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {x},
                 [](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     p.grad[i] += self.grad[i];
                 });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw contract_error("mse: shape mismatch " + shape_str(pred.shape()) +
                         " vs " + shape_str(target.shape()));
  const auto pv = pred.data();
  const auto tv = target.data();
  double acc = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    double d = double(pv[i]) - double(tv[i]);
    acc += d * d;
  }
  const float n = static_cast<float>(pv.size());
  std::vector<float> out{static_cast<float>(acc / n)};
  return make_op("mse", {1}, std::move(out), {pred, target},
                 [n](TensorNode& self) {
                   auto& pp = *self.parents[0];
                   auto& pt = *self.parents[1];
                   const float g = self.grad[0] * 2.f / n;
                   if (pp.requires_grad) {
                     pp.ensure_grad();
                     for (size_t i = 0; i < pp.data.size(); ++i)
                       pp.grad[i] += g * (pp.data[i] - pt.data[i]);
                   }
                   if (pt.requires_grad) {
                     pt.ensure_grad();
                     for (size_t i = 0; i < pt.data.size(); ++i)
                       pt.grad[i] -= g * (pp.data[i] - pt.data[i]);
                   }
                 });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_2d(x, "add_row");
  const int n = x.dim(0), d = x.dim(1);
  require(numel(row.shape()) == d,
          "add_row: row shape " + shape_str(row.shape()) +
              " does not match feature dim " + std::to_string(d));
  const auto xv = x.data();
  const auto rv = row.data();
  std::vector<float> out(xv.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<size_t>(i) * d + j] = xv[static_cast<size_t>(i) * d + j] + rv[j];
  return make_op("add_row", {n, d}, std::move(out), {x, row},
                 [n, d](TensorNode& self) {
                   auto& px = *self.parents[0];
                   auto& pr = *self.parents[1];
                   if (px.requires_grad) {
                     px.ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       px.grad[i] += self.grad[i];
                   }
                   if (pr.requires_grad) {
                     pr.ensure_grad();
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < d; ++j)
                         pr.grad[j] += self.grad[static_cast<size_t>(i) * d + j];
                   }
                 });
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  require_2d(x, "slice_cols");
  const int n = x.dim(0), d = x.dim(1);
  require(0 <= c0 && c0 < c1 && c1 <= d, "slice_cols: bad range [" +
                                             std::to_string(c0) + "," +
                                             std::to_string(c1) + ") for " +
                                             shape_str(x.shape()));
  const int w = c1 - c0;
  const auto xv = x.data();
  std::vector<float> out(static_cast<size_t>(n) * w);
  for (int i = 0; i < n; ++i)
    std::copy_n(xv.data() + static_cast<size_t>(i) * d + c0, w,
                out.data() + static_cast<size_t>(i) * w);
  return make_op("slice_cols", {n, w}, std::move(out), {x},
                 [n, d, c0, w](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (int i = 0; i < n; ++i)
                     for (int j = 0; j < w; ++j)
                       p.grad[static_cast<size_t>(i) * d + c0 + j] +=
                           self.grad[static_cast<size_t>(i) * w + j];
                 });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  require_2d(x, "slice_rows");
  const int n = x.dim(0), d = x.dim(1);
  require(0 <= r0 && r0 < r1 && r1 <= n, "slice_rows: bad range [" +
                                             std::to_string(r0) + "," +
                                             std::to_string(r1) + ") for " +
                                             shape_str(x.shape()));
  const int h = r1 - r0;
  const auto xv = x.data();
  std::vector<float> out(xv.begin() + static_cast<size_t>(r0) * d,
                         xv.begin() + static_cast<size_t>(r1) * d);
  return make_op("slice_rows", {h, d}, std::move(out), {x},
                 [d, r0](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   const size_t off = static_cast<size_t>(r0) * d;
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     p.grad[off + i] += self.grad[i];
                 });
}

Tensor sum_all(const Tensor& x) {
  const auto xv = x.data();
  double acc = 0.0;
  for (float v : xv) acc += v;
  return make_op("sum_all", {1}, {static_cast<float>(acc)}, {x},
                 [](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < p.data.size(); ++i)
                     p.grad[i] += self.grad[0];
                 });
}

Tensor mean_rows(const Tensor& x) {
  require_2d(x, "mean_rows");
  const int n = x.dim(0), d = x.dim(1);
  const auto xv = x.data();
  std::vector<float> out(d);
  for (int j = 0; j < d; ++j) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += xv[static_cast<size_t>(i) * d + j];
    out[j] = static_cast<float>(acc / n);
  }
  return make_op("mean_rows", {1, d}, std::move(out), {x},
                 [n, d](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   const float inv = 1.f / n;
                   for (int i = 0; i < n; ++i)
                     for (int j = 0; j < d; ++j)
                       p.grad[static_cast<size_t>(i) * d + j] += self.grad[j] * inv;
                 });
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets) {
  require_2d(logits, "cross_entropy_logits");
  const int n = logits.dim(0), c = logits.dim(1);
  require(static_cast<int>(targets.size()) == n,
          "cross_entropy_logits: " + std::to_string(targets.size()) +
              " targets for " + std::to_string(n) + " rows");
  for (int t : targets)
    require(t >= 0 && t < c, "cross_entropy_logits: target " +
                                 std::to_string(t) + " out of range");
  const auto xv = logits.data();
  std::vector<float> probs(xv.size());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = xv.data() + static_cast<size_t>(i) * c;
    float* prow = probs.data() + static_cast<size_t>(i) * c;
    float mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int j = 0; j < c; ++j) prow[j] *= inv;
    loss -= std::log(std::max(double(prow[targets[i]]), 1e-30));
  }
  std::vector<float> out{static_cast<float>(loss / n)};
  return make_op("cross_entropy_logits", {1}, std::move(out), {logits},
                 [n, c, targets, probs = std::move(probs)](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   const float g = self.grad[0] / n;
                   for (int i = 0; i < n; ++i) {
                     const float* prow = probs.data() + static_cast<size_t>(i) * c;
                     float* dx = p.grad.data() + static_cast<size_t>(i) * c;
                     for (int j = 0; j < c; ++j) {
                       float onehot = (j == targets[i]) ? 1.f : 0.f;
                       dx[j] += g * (prow[j] - onehot);
                     }
                   }
                 });
}

// ---- patch permutations ----------------------------------------------------

namespace {
// out[token, k] = image[flat_index(token, k)]; returns the flat index map.
std::vector<int> patch_index_map(int h, int w, int c, int p) {
  const int gh = h / p, gw = w / p;
  std::vector<int> map(static_cast<size_t>(gh) * gw * p * p * c);
  size_t o = 0;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch)
            map[o++] = ((gy * p + py) * w + (gx * p + px)) * c + ch;
  return map;
}
}  // namespace

Tensor patchify(const Tensor& image, int patch) {
  require(image.ndim() == 3, "patchify: expected H x W x C image, got " +
                                 shape_str(image.shape()));
  const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  require(patch > 0 && h % patch == 0 && w % patch == 0,
          "patchify: image " + shape_str(image.shape()) +
              " not divisible by patch " + std::to_string(patch));
  const int tokens = (h / patch) * (w / patch);
  const int pd = patch * patch * c;
  auto map = patch_index_map(h, w, c, patch);
  const auto xv = image.data();
  std::vector<float> out(map.size());
  for (size_t i = 0; i < map.size(); ++i) out[i] = xv[map[i]];
  return make_op("patchify", {tokens, pd}, std::move(out), {image},
                 [map = std::move(map)](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < map.size(); ++i)
                     p.grad[map[i]] += self.grad[i];
                 });
}

Tensor unpatchify(const Tensor& tokens, int h, int w, int c, int patch) {
  require_2d(tokens, "unpatchify");
  require(patch > 0 && h % patch == 0 && w % patch == 0,
          "unpatchify: target " + std::to_string(h) + "x" + std::to_string(w) +
              " not divisible by patch " + std::to_string(patch));
  const int expect_tokens = (h / patch) * (w / patch);
  const int pd = patch * patch * c;
  require(tokens.dim(0) == expect_tokens && tokens.dim(1) == pd,
          "unpatchify: tokens " + shape_str(tokens.shape()) +
              " do not match image " + std::to_string(h) + "x" +
              std::to_string(w) + "x" + std::to_string(c));
  auto map = patch_index_map(h, w, c, patch);
  const auto tv = tokens.data();
  std::vector<float> out(map.size());
  for (size_t i = 0; i < map.size(); ++i) out[map[i]] = tv[i];
  return make_op("unpatchify", {h, w, c}, std::move(out), {tokens},
                 [map = std::move(map)](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < map.size(); ++i)
                     p.grad[i] += self.grad[map[i]];
                 });
}

}  // namespace blendiff
