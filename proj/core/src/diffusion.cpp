#include "blendiff/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "blendiff/errors.hpp"

namespace blendiff {

NoiseSchedule NoiseSchedule::linear(int T, float beta_start, float beta_end) {
  if (T < 1) throw config_error("schedule: T must be >= 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T + 1, 0.f);
  s.alpha.resize(T + 1, 1.f);
  s.alpha_bar.resize(T + 1, 1.f);
  double bar = 1.0;
  for (int t = 1; t <= T; ++t) {
    float b = T == 1 ? beta_start
                     : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.beta[t] = b;
    s.alpha[t] = 1.f - b;
    bar *= s.alpha[t];
    s.alpha_bar[t] = static_cast<float>(bar);
  }
  return s;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps,
                     const NoiseSchedule& sched) {
  if (t < 0 || t > sched.T)
    throw contract_error("forward_noise: t " + std::to_string(t) +
                         " outside [0," + std::to_string(sched.T) + "]");
  if (x0.shape() != eps.shape())
    throw contract_error("forward_noise: shape mismatch " +
                         shape_str(x0.shape()) + " vs " + shape_str(eps.shape()));
  if (t == 0) return x0;  // alpha_bar = 1 boundary: clean image
  const float ab = sched.alpha_bar[t];
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.f - ab)));
}

Tensor training_loss(const DenoiserModel& model,
                     std::span<const TrainSample> batch,
                     const NoiseSchedule& sched, Rng rng,
                     const AdapterWeights* adapter, float class_drop) {
  if (batch.empty()) throw contract_error("training_loss: empty batch");

  Tensor total;
  for (size_t i = 0; i < batch.size(); ++i) {
    Rng srng = rng.split(i);
    const int t = 1 + static_cast<int>(srng.below(sched.T));
    int class_id = batch[i].class_id;
    if (class_drop > 0.f && srng.uniform() < class_drop)
      class_id = model.cfg.null_class();

    Tensor x0 = image_to_model_space(*batch[i].image);
    Tensor eps = Tensor::randn(x0.shape(), srng);
    Tensor x_t = forward_noise(x0, t, eps, sched);

    Tensor eps_hat;
    if (adapter) {
      // two-stream step: the clean image itself is the reference, alpha = 1
      LayerActivations acts = encode_reference(model, *batch[i].image, class_id);
      BlendSpec spec;
      spec.mode = BlendMode::kBa;
      spec.alpha = 1.f;
      spec.inv_temp = 1.f;
      const LayerActivations refs[1] = {acts};
      BlendContext ctx = make_blend_context(spec, adapter, refs);
      eps_hat = forward(model, x_t, t, class_id, &ctx).eps;
    } else {
      eps_hat = forward(model, x_t, t, class_id).eps;
    }
    Tensor li = mse(eps_hat, eps);
    total = total.defined() ? add(total, li) : li;
  }
  return scale(total, 1.f / static_cast<float>(batch.size()));
}

std::vector<int> sampler_time_grid(int T, int steps) {
  if (steps < 1 || steps > T)
    throw contract_error("sampler: steps " + std::to_string(steps) +
                         " outside [1," + std::to_string(T) + "]");
  std::vector<int> ts;
  for (int k = steps; k >= 1; --k) {
    int t = static_cast<int>(std::lround(static_cast<double>(T) * k / steps));
    t = std::clamp(t, 1, T);
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }
  return ts;
}

namespace {
void check_chain(int t, int t_prev, int T) {
  if (t < 1 || t > T)
    throw contract_error("sampler step: t " + std::to_string(t) +
                         " outside [1," + std::to_string(T) + "]");
  if (t_prev < 0 || t_prev >= t)
    throw contract_error("sampler step: t chain must be strictly decreasing, "
                         "got t=" + std::to_string(t) +
                         " -> t_prev=" + std::to_string(t_prev));
}
}  // namespace

Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev,
                 const NoiseSchedule& sched, Rng& rng) {
  check_chain(t, t_prev, sched.T);
  if (x_t.shape() != eps_hat.shape())
    throw contract_error("ddpm_step: shape mismatch");
  const float ab_t = sched.alpha_bar[t];
  const float ab_prev = sched.alpha_bar[t_prev];
  const float alpha_eff = ab_t / ab_prev;
  const float beta_eff = 1.f - alpha_eff;
  const float inv_sqrt_alpha = 1.f / std::sqrt(alpha_eff);
  const float eps_coef = beta_eff / std::sqrt(1.f - ab_t);
  // posterior variance on the (possibly strided) chain
  const float var = t_prev == 0 ? 0.f : beta_eff * (1.f - ab_prev) / (1.f - ab_t);
  const float sigma = std::sqrt(std::max(var, 0.f));

  const auto xv = x_t.data();
  const auto ev = eps_hat.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) {
    float mean = inv_sqrt_alpha * (xv[i] - eps_coef * ev[i]);
    out[i] = t_prev == 0 ? mean : mean + sigma * rng.normal();
  }
  return Tensor::from_vec(x_t.shape(), std::move(out));
}

Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev,
                 const NoiseSchedule& sched) {
  check_chain(t, t_prev, sched.T);
  if (x_t.shape() != eps_hat.shape())
    throw contract_error("ddim_step: shape mismatch");
  const float ab_t = sched.alpha_bar[t];
  const float ab_prev = sched.alpha_bar[t_prev];
  const float sqrt_ab_t = std::sqrt(ab_t);
  const float sqrt_om_t = std::sqrt(1.f - ab_t);
  const float sqrt_ab_p = std::sqrt(ab_prev);
  const float sqrt_om_p = std::sqrt(1.f - ab_prev);

  const auto xv = x_t.data();
  const auto ev = eps_hat.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) {
    float x0_hat = (xv[i] - sqrt_om_t * ev[i]) / sqrt_ab_t;
    out[i] = sqrt_ab_p * x0_hat + sqrt_om_p * ev[i];
  }
  return Tensor::from_vec(x_t.shape(), std::move(out));
}

SampleResult sample(const DenoiserModel& model, const AdapterWeights* adapter,
                    const SampleRequest& req, const NoiseSchedule& sched,
                    std::span<const Image> refs) {
  if (req.blend.mode == BlendMode::kBa && adapter == nullptr)
    throw contract_error("sample: mode ba requires adapter weights");
  if (req.guidance_scale < 1.f)
    throw contract_error("sample: guidance_scale must be >= 1");

  // encode references once; every step reuses the same activations
  std::vector<LayerActivations> acts;
  BlendContext ctx;
  if (req.blend.mode != BlendMode::kOff) {
    if (refs.empty())
      throw contract_error("sample: blend mode " +
                           std::string(blend_mode_name(req.blend.mode)) +
                           " requires reference images");
    for (const auto& r : refs)
      acts.push_back(encode_reference(model, r, req.class_id));
    ctx = make_blend_context(req.blend, adapter, acts);
  }
  const BlendContext* ctx_ptr = req.blend.mode == BlendMode::kOff ? nullptr : &ctx;

  // null-branch context shares reference activations but never captures
  BlendContext null_ctx;
  const BlendContext* null_ctx_ptr = nullptr;
  if (req.guidance_scale > 1.f && ctx_ptr != nullptr && req.guidance_blend_both) {
    BlendSpec null_spec = req.blend;
    null_spec.capture_masks = false;
    null_ctx = make_blend_context(null_spec, adapter, acts);
    null_ctx_ptr = &null_ctx;
  }

  Rng init_rng(req.seed, streams::kSampleInit);
  const int n = model.cfg.image_size;
  Tensor x = Tensor::randn({n, n, 3}, init_rng);

  std::vector<int> ts = sampler_time_grid(sched.T, req.steps);
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;

    Tensor eps_hat = forward(model, x, t, req.class_id, ctx_ptr).eps;
    if (req.guidance_scale > 1.f) {
      Tensor eps_null =
          forward(model, x, t, model.cfg.null_class(), null_ctx_ptr).eps;
      // eps = eps_null + g (eps_cond - eps_null)
      eps_hat = add(eps_null,
                    scale(add(eps_hat, scale(eps_null, -1.f)), req.guidance_scale));
    }
    eps_hat = eps_hat.detach();
    x = x.detach();

    if (req.sampler == SamplerKind::kDdim) {
      x = ddim_step(x, eps_hat, t, t_prev, sched);
    } else {
      Rng step_rng = Rng(req.seed, streams::kSampleStep).split(t);
      x = ddpm_step(x, eps_hat, t, t_prev, sched, step_rng);
    }
  }

  SampleResult res;
  res.image = model_space_to_image(x);
  res.masks = ctx.capture;
  return res;
}

}  // namespace blendiff
