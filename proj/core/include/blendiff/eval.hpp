#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "blendiff/blend.hpp"
#include "blendiff/datagen.hpp"
#include "blendiff/diffusion.hpp"
#include "blendiff/model.hpp"
#include "blendiff/train.hpp"

namespace blendiff {

// ---- surrogate encoders -----------------------------------------------------

// Patch-shared features with a position-aware head; the penultimate layer is
// the semantic embedding.
struct ShapeEncoder {
  int image_size = 32, patch = 4, feat = 32, hidden = 64, n_classes = 6;
  Tensor w_p, b_p;  // patch_dim -> feat, shared over patches
  Tensor w_h, b_h;  // tokens*feat -> hidden
  Tensor w_o, b_o;  // hidden -> n_classes
  Tensor center;    // mean train-set feature, subtracted before cosine use
  float val_accuracy = 0.f;

  static ShapeEncoder init(int image_size, int n_classes, uint64_t seed);
  Tensor logits_graph(const Image& img) const;
  std::vector<float> embed(const Image& img) const;  // centered features
  int classify(const Image& img) const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

// Two patch scales of shared features, pooled to first and second moments
// over patches (diagonal Gram statistics); position invariant, works on
// full images and on 8x8 sub-regions.
struct TextureEncoder {
  int patch_a = 4, patch_b = 8, feat = 32, n_classes = 6;
  Tensor w0a, b0a, w1a, b1a;  // 4x4 branch
  Tensor w0b, b0b, w1b, b1b;  // 8x8 branch
  Tensor w_o, b_o;            // 4*feat -> n_classes
  Tensor center;              // mean train-set feature
  float val_accuracy = 0.f;   // on held-back swatches

  static TextureEncoder init(int n_classes, uint64_t seed);
  Tensor pooled_graph(const Tensor& image) const;  // {1, 4*feat}
  std::vector<float> embed(const Image& img) const;
  std::vector<float> embed_region(const Image& img, int x0, int y0, int size) const;
  int classify(const Image& img) const;
  // argmax restricted to the two candidate families
  int classify_region_pair(const Image& img, int x0, int y0, int size,
                           int family_a, int family_b) const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

struct EncoderTrainConfig {
  int epochs = 100;
  int batch_size = 32;
  float lr = 1e-2f;
  uint64_t seed = 0;
  int swatches_per_family = 256;  // texture encoder training set
};

ShapeEncoder train_shape_encoder(const Dataset& data, const EncoderTrainConfig& cfg);
TextureEncoder train_texture_encoder(const DatasetSpec& spec,
                                     const EncoderTrainConfig& cfg);

struct SurrogateEncoders {
  ShapeEncoder shape;
  TextureEncoder texture;
};

void save_encoders(const std::string& path, const SurrogateEncoders& enc);
SurrogateEncoders load_encoders(const std::string& path, int image_size,
                                int n_shapes, int n_textures);

// ---- metrics ------------------------------------------------------------------

double cosine(std::span<const float> a, std::span<const float> b);
// Mean pairwise cosine over all unordered pairs; needs >= 2 vectors with
// nonzero norms.
double set_consistency(const std::vector<std::vector<float>>& embeddings);
double spearman_rho(std::span<const double> x, std::span<const double> y);

// Mean attention mass that A-labelled query tokens place on the left half
// of the reference keys, averaged over blocks and heads. query_is_a is laid
// out on the token grid (g x g).
double mask_mass_on_left(const MaskCapture& masks,
                         const std::vector<bool>& query_is_a, int token_grid);

// Segments the generated image by 8x8-patch texture classification, then
// applies mask_mass_on_left. Returns nullopt when segmentation degenerates
// (< 5% of pixels in either texture region).
std::optional<double> mask_concentration(const MaskCapture& masks,
                                         const ReferenceImage& ref,
                                         const Image& generated,
                                         const TextureEncoder& tex_enc,
                                         const ModelConfig& cfg);

// ---- evaluation grid ------------------------------------------------------------

struct RefSpec {
  RefKind kind = RefKind::kSwatch;
  int texture_id = 0;
  std::optional<int> texture_id_b;
  uint64_t param_seed = 0;
};

struct EvalGridConfig {
  std::vector<int> prompts;       // shape ids
  std::vector<RefSpec> references;
  int seeds_per_cell = 4;
  int steps = 24;
  float guidance = 2.0f;
  float alpha = 0.6f;
  float inv_temp = 1.0f;
  uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
};

// Default protocol grid: one swatch per family, a shaped holdout reference
// and a split-half pair, crossed with every shape class.
EvalGridConfig default_eval_grid(const DatasetSpec& spec);

std::vector<ReferenceImage> realize_references(const EvalGridConfig& grid,
                                               const DatasetSpec& spec);

struct GeneratedCell {
  int prompt_idx = 0;
  int ref_idx = 0;
  int seed_idx = 0;
  Image image;
  std::shared_ptr<MaskCapture> masks;  // split-half refs only
};

std::vector<GeneratedCell> generate_grid(const DenoiserModel& model,
                                         const AdapterWeights* adapter,
                                         const NoiseSchedule& sched,
                                         const EvalGridConfig& grid,
                                         std::span<const ReferenceImage> refs,
                                         BlendMode mode, float alpha_override = -1.f);

struct ModeMetrics {
  std::string mode;
  std::map<int, double> textual_per_prompt;
  std::map<int, double> visual_per_ref;
  std::map<int, double> class_acc_per_prompt;
  double textual_mean = 0.0;
  double visual_mean = 0.0;
  double class_acc_mean = -1.0;            // -1 when the gate refused scoring
  double holdout_class_acc = -1.0;         // held-out-texture references only
  double mask_concentration_mean = -1.0;   // -1 when no split-half samples
  int mask_samples_used = 0;
  int mask_samples_skipped = 0;
};

struct EvalReport {
  float shape_encoder_val_acc = 0.f;
  float texture_encoder_val_acc = 0.f;
  bool class_gate_passed = false;
  std::vector<ModeMetrics> modes;

  const ModeMetrics* mode(const std::string& name) const;
};

ModeMetrics evaluate_mode(const DenoiserModel& model,
                          const AdapterWeights* adapter,
                          const NoiseSchedule& sched, const EvalGridConfig& grid,
                          std::span<const ReferenceImage> refs,
                          const SurrogateEncoders& enc, BlendMode mode,
                          const DatasetSpec& spec,
                          std::vector<GeneratedCell>* cells_out = nullptr);

EvalReport run_eval(const DenoiserModel& model, const AdapterWeights* adapter,
                    const NoiseSchedule& sched, const EvalGridConfig& grid,
                    const SurrogateEncoders& enc, const DatasetSpec& spec,
                    const std::vector<BlendMode>& modes,
                    const std::string& out_dir);

void write_report_json(const std::string& path, const EvalReport& report);
void write_report_csv(const std::string& path, const EvalReport& report);

// ---- alpha sweep ---------------------------------------------------------------

struct AlphaSweepResult {
  std::vector<float> alphas;
  std::vector<double> mean_similarity;  // generated-to-reference texture cosine
  double spearman = 0.0;
};

AlphaSweepResult alpha_sweep(const DenoiserModel& model,
                             const AdapterWeights* adapter,
                             const NoiseSchedule& sched, EvalGridConfig grid,
                             std::span<const ReferenceImage> refs,
                             const TextureEncoder& tex_enc,
                             const std::vector<float>& alphas,
                             const std::string& out_dir);

}  // namespace blendiff
