#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "blendiff/rng.hpp"

namespace blendiff {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// One record of the reverse-mode graph. `backward` reads this node's grad
// and accumulates into parents that require grad.
struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // allocated only while needed
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad();
};

// Value-semantic handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_vec(Shape shape, std::vector<float> data);
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.f);
  // Trainable leaf: requires_grad set, grad buffer allocated.
  static Tensor param(Shape shape, Rng& rng, float stddev = 0.02f);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return node_->size(); }

  std::span<const float> data() const { return node_->data; }
  std::span<float> data_mut() { return node_->data; }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> grad_mut() { return node_->grad; }
  float item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg);
  void zero_grad();

  // Reverse-mode sweep from a scalar output.
  void backward();

  // New leaf holding a copy of the data, cut off from the graph.
  Tensor detach() const;

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& logits);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps = 1e-5f);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor gelu(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor mse(const Tensor& pred, const Tensor& target);

// Adds a length-d row vector to every row of an n x d matrix (bias add).
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor sum_all(const Tensor& x);
Tensor mean_rows(const Tensor& x);
// Mean softmax cross-entropy of logits[n x c] against integer targets.
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets);

// H x W x C image <-> (H/p * W/p) x (p*p*C) patch-token matrix; pure
// permutations, patches scanned row-major.
Tensor patchify(const Tensor& image, int patch);
Tensor unpatchify(const Tensor& tokens, int h, int w, int c, int patch);

}  // namespace blendiff
