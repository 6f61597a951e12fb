#pragma once

#include <string>
#include <vector>

#include "blendiff/errors.hpp"
#include "blendiff/image.hpp"
#include "blendiff/tensor.hpp"

namespace blendiff {

struct BlendContext;  // blend.hpp

struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int d_model = 64;
  int n_heads = 4;
  int n_blocks = 6;
  int n_classes = 6;
  int t_max = 400;
  int mlp_ratio = 4;

  int tokens() const {
    return (image_size / patch_size) * (image_size / patch_size);
  }
  int grid() const { return image_size / patch_size; }
  int patch_dim() const { return patch_size * patch_size * 3; }
  int head_dim() const { return d_model / n_heads; }
  int null_class() const { return n_classes; }
  void validate() const;
};

// One transformer block: self-attention, class cross-attention, MLP, each
// behind its own pre-layernorm.
struct DenoiserBlock {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;              // self-attention projections
  Tensor ln2_g, ln2_b;
  Tensor ca_wq, ca_wk, ca_wv, ca_wo;  // class cross-attention
  Tensor ln3_g, ln3_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Per-block token matrices recorded during a forward pass: the tokens the
// self-attention module consumed (post-layernorm) and the module output
// that entered the residual stream.
struct LayerActivations {
  std::vector<Tensor> sa_input;
  std::vector<Tensor> sa_output;

  LayerActivations detached() const;
};

struct DenoiserModel {
  ModelConfig cfg;
  Tensor patch_w, patch_b;  // patch_dim -> d_model
  Tensor pos;               // tokens x d_model, learned
  Tensor time_w1, time_b1, time_w2, time_b2;
  Tensor cls_table;         // (n_classes+1) x d_model; last row = null class
  std::vector<DenoiserBlock> blocks;
  Tensor lnf_g, lnf_b;
  Tensor unembed_w, unembed_b;  // d_model -> patch_dim
  bool frozen = false;

  static DenoiserModel init(const ModelConfig& cfg, uint64_t seed);

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  int64_t parameter_count() const;
  void freeze();
  uint64_t content_hash() const;
};

// Sinusoidal timestep features, shape {1, dim}.
Tensor sinusoidal_embedding(int t, int dim);

struct ForwardResult {
  Tensor eps;  // same shape as the input image tensor
  LayerActivations acts;
};

// Noise prediction at timestep t under class conditioning; when blend is
// set the self-attention modules run in the configured blend mode.
ForwardResult forward(const DenoiserModel& model, const Tensor& x_t, int t,
                      int class_id, const BlendContext* blend = nullptr);

// Runs the clean network at t=0 on a [0,1] reference image (same class
// condition as the generation stream) and returns detached activations.
LayerActivations encode_reference(const DenoiserModel& model, const Image& ref,
                                  int class_id);

// [0,1] image <-> [-1,1] model space.
Tensor image_to_model_space(const Image& img);
Image model_space_to_image(const Tensor& t);

}  // namespace blendiff
