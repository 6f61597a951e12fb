#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "blendiff/blend.hpp"
#include "blendiff/checkpoint.hpp"
#include "blendiff/datagen.hpp"
#include "blendiff/diffusion.hpp"
#include "blendiff/model.hpp"

namespace blendiff {

struct AdamWConfig {
  float lr = 2e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.99f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
  float grad_clip = 1.0f;  // global norm; <= 0 disables
};

// Decoupled weight decay, bias-corrected moments. Update arithmetic runs in
// double over f32 state so the step is insensitive to summation order.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg);

  void zero_grad();
  void step();

  int64_t step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }

  // Moment buffers and step count for checkpoint resume.
  std::vector<NamedTensor> state_tensors() const;
  void restore_state(const Checkpoint& ckpt);

 private:
  struct Slot {
    std::vector<float> m, v;
  };
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  int64_t step_count_ = 0;
};

// In-memory dataset view over a gen-data output directory.
struct Dataset {
  std::string root;
  std::vector<ManifestRow> rows;
  std::vector<Image> images;          // parallel to rows
  std::vector<size_t> train, val, test;

  static Dataset load(const std::string& dir);
  std::vector<TrainSample> batch(std::span<const size_t> indices) const;
  int n_shapes() const;
};

struct TrainHyper {
  int epochs = 30;
  int batch_size = 16;
  uint64_t seed = 0;
  AdamWConfig opt;
  float class_drop = 0.1f;  // base phase only
  int val_draws = 512;      // (image, t, eps) draws per validation pass
};

struct CurvePoint {
  int epoch;
  std::string split;
  float loss;
};

using EpochHook = std::function<void(int epoch, float train_loss, float val_loss)>;

struct TrainResult {
  std::vector<CurvePoint> curve;
  float final_val_loss = 0.f;
};

// Phase 1: trains every model parameter with the epsilon objective.
// Resumable at epoch boundaries when opt/start_epoch come from a checkpoint.
TrainResult train_base(DenoiserModel& model, const Dataset& data,
                       const NoiseSchedule& sched, const TrainHyper& hyper,
                       AdamW& opt, int start_epoch = 0,
                       const EpochHook& hook = nullptr);

// Phase 2: base must be frozen; only adapter weights receive gradients and
// the base content hash is re-checked at every epoch boundary.
TrainResult train_adapter(const DenoiserModel& model, AdapterWeights& adapter,
                          const Dataset& data, const NoiseSchedule& sched,
                          const TrainHyper& hyper, AdamW& opt,
                          int start_epoch = 0, const EpochHook& hook = nullptr);

// Mean epsilon-loss over >= n_draws (image, t, eps) draws from the val split.
float validation_loss(const DenoiserModel& model, const Dataset& data,
                      const NoiseSchedule& sched, uint64_t seed, int n_draws,
                      const AdapterWeights* adapter = nullptr,
                      BlendMode mode = BlendMode::kOff);

void write_curves_csv(const std::string& path,
                      const std::vector<CurvePoint>& curve);

}  // namespace blendiff
