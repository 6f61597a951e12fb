#pragma once

#include <memory>
#include <span>
#include <vector>

#include "blendiff/blend.hpp"
#include "blendiff/image.hpp"
#include "blendiff/model.hpp"
#include "blendiff/tensor.hpp"

namespace blendiff {

struct NoiseSchedule {
  int T = 400;
  std::vector<float> beta;       // index 1..T, beta[0] unused
  std::vector<float> alpha;      // 1 - beta
  std::vector<float> alpha_bar;  // cumulative product; alpha_bar[0] = 1

  static NoiseSchedule linear(int T = 400, float beta_start = 1e-4f,
                              float beta_end = 2e-2f);
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; t=0 returns x0.
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps,
                     const NoiseSchedule& sched);

struct TrainSample {
  const Image* image;
  int class_id;
};

// Batch epsilon-prediction loss: per sample, t ~ U[1,T], eps ~ N(0,1),
// mse(eps_hat, eps). With an adapter, each sample runs two streams: the
// reference stream is its own clean image at t=0 and alpha is 1.
Tensor training_loss(const DenoiserModel& model,
                     std::span<const TrainSample> batch,
                     const NoiseSchedule& sched, Rng rng,
                     const AdapterWeights* adapter = nullptr,
                     float class_drop = 0.f);

// Ancestral step on a (possibly strided) chain; adds posterior noise except
// into t_prev = 0. Plain data op, no graph.
Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev,
                 const NoiseSchedule& sched, Rng& rng);
// Deterministic update (eta = 0).
Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev,
                 const NoiseSchedule& sched);

enum class SamplerKind { kDdpm, kDdim };

struct SampleRequest {
  int class_id = 0;
  BlendSpec blend;
  uint64_t seed = 0;
  int steps = 24;
  float guidance_scale = 1.f;  // 1 = off
  SamplerKind sampler = SamplerKind::kDdim;
  // apply the reference term to the null-class guidance branch as well
  bool guidance_blend_both = true;
};

struct SampleResult {
  Image image;
  std::shared_ptr<MaskCapture> masks;  // set when capture was requested
};

// Full reverse chain. References are encoded once and reused at every step.
SampleResult sample(const DenoiserModel& model, const AdapterWeights* adapter,
                    const SampleRequest& req, const NoiseSchedule& sched,
                    std::span<const Image> refs);

// Descending timestep grid for `steps` sampler steps over [1, T].
std::vector<int> sampler_time_grid(int T, int steps);

}  // namespace blendiff
