#include <benchmark/benchmark.h>

#include "blendiff/blend.hpp"
#include "blendiff/datagen.hpp"
#include "blendiff/diffusion.hpp"
#include "blendiff/model.hpp"

using namespace blendiff;

namespace {

ModelConfig default_config() { return ModelConfig{}; }

Tensor random_image(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed, 1);
  return Tensor::randn({cfg.image_size, cfg.image_size, 3}, rng);
}

void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1, 2);
  Tensor a = Tensor::randn({n, n}, rng);
  Tensor b = Tensor::randn({n, n}, rng);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_SoftmaxRows(benchmark::State& state) {
  Rng rng(2, 2);
  Tensor logits = Tensor::randn({64, 64}, rng);
  for (auto _ : state) {
    Tensor p = softmax_rows(logits);
    benchmark::DoNotOptimize(p.data().data());
  }
}
BENCHMARK(BM_SoftmaxRows);

void BM_DenoiserForward(benchmark::State& state) {
  ModelConfig cfg = default_config();
  DenoiserModel model = DenoiserModel::init(cfg, 3);
  Tensor x = random_image(cfg, 4);
  for (auto _ : state) {
    ForwardResult res = forward(model, x, 200, 1);
    benchmark::DoNotOptimize(res.eps.data().data());
  }
}
BENCHMARK(BM_DenoiserForward);

void BM_DenoiserForwardBackward(benchmark::State& state) {
  ModelConfig cfg = default_config();
  DenoiserModel model = DenoiserModel::init(cfg, 5);
  Tensor x = random_image(cfg, 6);
  Rng erng(7, 1);
  Tensor eps = Tensor::randn(x.shape(), erng);
  for (auto _ : state) {
    Tensor loss = mse(forward(model, x, 100, 0).eps, eps);
    loss.backward();
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_DenoiserForwardBackward);

void BM_BlendedForward(benchmark::State& state) {
  ModelConfig cfg = default_config();
  DenoiserModel model = DenoiserModel::init(cfg, 8);
  model.freeze();
  AdapterWeights adapter = AdapterWeights::init(cfg, 9);
  DatasetSpec spec;
  Rng rng(10, streams::kDataGen);
  TextureParams p = sample_texture_params(kStripes, spec.palette, rng);
  Image ref = render_reference(kStripes, RefKind::kSwatch, p, spec).image;
  LayerActivations acts = encode_reference(model, ref, 0);
  BlendSpec bs;
  bs.mode = BlendMode::kBa;
  bs.alpha = 0.6f;
  const LayerActivations refs[1] = {acts};
  BlendContext ctx = make_blend_context(bs, &adapter, refs);
  Tensor x = random_image(cfg, 11);
  for (auto _ : state) {
    ForwardResult res = forward(model, x, 200, 1, &ctx);
    benchmark::DoNotOptimize(res.eps.data().data());
  }
}
BENCHMARK(BM_BlendedForward);

void BM_DdimStep(benchmark::State& state) {
  ModelConfig cfg = default_config();
  NoiseSchedule sched = NoiseSchedule::linear(400);
  Rng rng(12, 1);
  Tensor x = random_image(cfg, 13);
  Tensor eps = Tensor::randn(x.shape(), rng);
  for (auto _ : state) {
    Tensor next = ddim_step(x, eps, 200, 180, sched);
    benchmark::DoNotOptimize(next.data().data());
  }
}
BENCHMARK(BM_DdimStep);

void BM_RenderSample(benchmark::State& state) {
  DatasetSpec spec;
  Rng rng(14, streams::kDataGen);
  TextureParams p = sample_texture_params(kChecker, spec.palette, rng);
  for (auto _ : state) {
    Sample s = render_sample(kStar, kChecker, p, spec);
    benchmark::DoNotOptimize(s.image.rgb.data());
  }
}
BENCHMARK(BM_RenderSample);

}  // namespace

BENCHMARK_MAIN();
