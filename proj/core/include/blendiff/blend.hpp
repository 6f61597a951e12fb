#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "blendiff/model.hpp"
#include "blendiff/tensor.hpp"

namespace blendiff {

enum class BlendMode { kOff, kBa, kNaiveImca };
const char* blend_mode_name(BlendMode m);
BlendMode blend_mode_from_name(const std::string& name);

// Per-block trainable key/value projections; shapes mirror the frozen
// self-attention projections of the same block.
struct AdapterWeights {
  std::vector<Tensor> w_k;  // d_model x d_model
  std::vector<Tensor> w_v;

  static AdapterWeights init(const ModelConfig& cfg, uint64_t seed,
                             float stddev = 0.02f);
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  int64_t parameter_count() const;
  uint64_t content_hash() const;
};

struct BlendSpec {
  BlendMode mode = BlendMode::kOff;
  float alpha = 0.6f;     // residual strength of the reference term
  float inv_temp = 1.0f;  // softmax sharpening, reference term only
  bool capture_masks = false;
};

// Row-stochastic attention weights of one (block, head), averaged over the
// forward passes that fed the capture.
struct AttentionMask {
  int block = 0;
  int head = 0;
  int queries = 0;
  int keys = 0;
  int samples = 0;             // forwards averaged into this entry
  std::vector<float> weights;  // queries x keys, running mean
};

struct MaskCapture {
  std::vector<AttentionMask> masks;  // indexed block * n_heads + head
  std::vector<int> segments;         // cumulative key boundaries per reference
  int forward_count = 0;             // forwards averaged so far (per block 0 head 0)

  void accumulate(int block, int head, int n_heads, std::span<const float> probs,
                  int queries, int keys);
  // Mean attention mass per (query, segment), averaged over blocks and heads.
  std::vector<float> per_query_segment_mass() const;
};

void save_masks(const MaskCapture& cap, const std::string& dir);
MaskCapture load_masks(const std::string& dir);

// Runtime context threaded through forward(); holds the spec, the adapter,
// and the per-block concatenated reference features.
struct BlendContext {
  BlendSpec spec;
  const AdapterWeights* adapter = nullptr;
  std::vector<Tensor> ref_sa_out;  // per block: sum_tokens x d (key/value source)
  std::vector<Tensor> ref_sa_in;   // per block: module inputs (ablation source)
  std::vector<int> segments;       // cumulative token boundaries
  std::shared_ptr<MaskCapture> capture;
};

BlendContext make_blend_context(const BlendSpec& spec,
                                const AdapterWeights* adapter,
                                std::span<const LayerActivations> refs);

// Sequence-axis concatenation of per-reference token matrices; softmax later
// normalizes across all references jointly. Returns cumulative boundaries.
std::pair<Tensor, std::vector<int>> multi_ref_concat(std::span<const Tensor> refs);

// Multi-head attention: queries from q_src, keys/values from kv_src, heads
// re-merged through wo. Captures per-head softmax rows into sink when set.
Tensor multi_head_attention(const Tensor& q_src, const Tensor& kv_src,
                            const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor& wo, int n_heads, float inv_temp,
                            MaskCapture* sink = nullptr, int block_index = 0);

// Reference-keyed cross-attention term of the blended module: frozen query
// projection, trainable key/value projections.
Tensor im_cross_attention(const Tensor& z_noisy, const Tensor& ref_feat,
                          const Tensor& wq_frozen, const Tensor& w_k_train,
                          const Tensor& w_v_train, const Tensor& wo_frozen,
                          int n_heads, float inv_temp,
                          MaskCapture* sink = nullptr, int block_index = 0);

// Self-attention output of one block under the given blend context; ctx may
// be null (plain self-attention). `h` is the post-layernorm module input.
Tensor sa_module_output(const Tensor& h, const DenoiserBlock& blk,
                        const ModelConfig& cfg, int block_index,
                        const BlendContext* ctx);

// Shannon entropy (nats) of softmax(logits * inv_temp).
double tempered_softmax_entropy(std::span<const float> logits, float inv_temp);

}  // namespace blendiff
