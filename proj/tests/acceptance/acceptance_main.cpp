// Acceptance suite: runs every release criterion at the default desk scale
// and prints one pass/fail line per criterion. Exits nonzero when any fails.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blendiff/blend.hpp"
#include "blendiff/checkpoint.hpp"
#include "blendiff/config.hpp"
#include "blendiff/datagen.hpp"
#include "blendiff/diffusion.hpp"
#include "blendiff/eval.hpp"
#include "blendiff/gradcheck.hpp"
#include "blendiff/image.hpp"
#include "blendiff/model.hpp"
#include "blendiff/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace blendiff;

namespace {

int g_failures = 0;

double now_s() {
  using clock = std::chrono::steady_clock;
  static const auto t0 = clock::now();
  return std::chrono::duration<double>(clock::now() - t0).count();
}

void report(int criterion, const std::string& name, bool pass,
            const std::string& detail) {
  std::printf("[%s] %2d %s: %s\n", pass ? "PASS" : "FAIL", criterion,
              name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.n_classes = 3;
  cfg.t_max = 50;
  return cfg;
}

Tensor rnd(Shape shape, uint64_t seed, float stddev = 1.f) {
  Rng rng(seed, 61);
  return Tensor::randn(std::move(shape), rng, stddev);
}

// ---- criterion 1: autodiff correctness -------------------------------------

void criterion_1() {
  const double t0 = now_s();
  float worst = 0.f;
  std::string worst_op = "none";
  auto track = [&](const char* op, float err) {
    if (err > worst) {
      worst = err;
      worst_op = op;
    }
  };

  for (uint64_t seed = 0; seed < 10; ++seed) {
    Tensor w23 = rnd({2, 3}, seed + 1000);
    track("matmul", grad_check([&](const Tensor& v) {
            return sum_all(matmul(v, rnd({4, 2}, seed)));
          }, rnd({3, 4}, seed + 1)).max_rel_err);
    track("softmax_rows", grad_check([&](const Tensor& v) {
            return sum_all(mul(softmax_rows(v), w23));
          }, rnd({2, 3}, seed + 2)).max_rel_err);
    track("layernorm", grad_check([&](const Tensor& v) {
            return sum_all(mul(layernorm(v, rnd({3}, seed, 0.5f),
                                         rnd({3}, seed + 9, 0.5f)), w23));
          }, rnd({2, 3}, seed + 3)).max_rel_err);
    track("gelu", grad_check([&](const Tensor& v) {
            return sum_all(mul(gelu(v), w23));
          }, rnd({2, 3}, seed + 4)).max_rel_err);
    track("add", grad_check([&](const Tensor& v) {
            return sum_all(mul(add(v, w23), w23));
          }, rnd({2, 3}, seed + 5)).max_rel_err);
    track("mul", grad_check([&](const Tensor& v) {
            return sum_all(mul(v, w23));
          }, rnd({2, 3}, seed + 6)).max_rel_err);
    track("scale", grad_check([&](const Tensor& v) {
            return sum_all(scale(v, 1.7f));
          }, rnd({2, 3}, seed + 7)).max_rel_err);
    track("add_row", grad_check([&](const Tensor& v) {
            return sum_all(mul(add_row(w23, v), w23));
          }, rnd({3}, seed + 8)).max_rel_err);
    track("embedding_lookup", grad_check([&](const Tensor& v) {
            return sum_all(mul(embedding_lookup(v, {0, 2, 1}), rnd({3, 4}, seed)));
          }, rnd({3, 4}, seed + 10)).max_rel_err);
    track("concat", grad_check([&](const Tensor& v) {
            return sum_all(mul(concat({v, w23}, 0), concat({w23, w23}, 0)));
          }, rnd({2, 3}, seed + 11)).max_rel_err);
    track("transpose", grad_check([&](const Tensor& v) {
            return sum_all(mul(transpose(v), transpose(w23)));
          }, rnd({2, 3}, seed + 12)).max_rel_err);
    track("reshape", grad_check([&](const Tensor& v) {
            return sum_all(reshape(v, {3, 2}));
          }, rnd({2, 3}, seed + 13)).max_rel_err);
    track("mse", grad_check([&](const Tensor& v) { return mse(v, w23); },
                            rnd({2, 3}, seed + 14)).max_rel_err);
    track("mean_rows", grad_check([&](const Tensor& v) {
            return sum_all(mean_rows(v));
          }, rnd({4, 3}, seed + 15)).max_rel_err);
    track("cross_entropy", grad_check([&](const Tensor& v) {
            return cross_entropy_logits(v, {1});
          }, rnd({1, 5}, seed + 16)).max_rel_err);
    track("patchify", grad_check([&](const Tensor& v) {
            return sum_all(patchify(v, 2));
          }, rnd({4, 4, 3}, seed + 17)).max_rel_err);

    // full blended layer loss on a 4-token toy input
    ModelConfig cfg = toy_config();
    cfg.d_model = 8;
    cfg.n_blocks = 1;
    DenoiserModel model = DenoiserModel::init(cfg, seed);
    model.freeze();
    AdapterWeights adapter = AdapterWeights::init(cfg, seed + 1);
    LayerActivations acts;
    acts.sa_input.push_back(rnd({4, 8}, seed + 70));
    acts.sa_output.push_back(rnd({4, 8}, seed + 71));
    Tensor h = rnd({4, 8}, seed + 72);
    Tensor target = rnd({4, 8}, seed + 73);
    track("ba_layer_loss", grad_check([&](const Tensor& w) {
            AdapterWeights probe = adapter;
            probe.w_v[0] = w;
            BlendSpec spec;
            spec.mode = BlendMode::kBa;
            spec.alpha = 1.f;
            const LayerActivations refs[1] = {acts};
            BlendContext ctx = make_blend_context(spec, &probe, refs);
            return mse(sa_module_output(h, model.blocks[0], cfg, 0, &ctx), target);
          }, adapter.w_v[0].detach()).max_rel_err);
  }
  const double dt = now_s() - t0;
  report(1, "autodiff-correctness",
         worst < 1e-3f && dt < 60.0,
         fmt("max rel err %.2e (worst op %s, limit 1e-3), %.1fs (< 60s)", worst,
             worst_op.c_str(), dt));
}

// ---- criterion 2: Eq. 1 reduction at alpha = 0 ------------------------------

void criterion_2(const std::string& work) {
  const double t0 = now_s();
  bool layer_ok = true;
  for (uint64_t seed = 0; seed < 100 && layer_ok; ++seed) {
    ModelConfig cfg = toy_config();
    cfg.d_model = 8;
    cfg.n_blocks = 1;
    DenoiserModel model = DenoiserModel::init(cfg, seed);
    model.freeze();
    AdapterWeights adapter = AdapterWeights::init(cfg, seed + 1);
    LayerActivations acts;
    acts.sa_input.push_back(rnd({4, 8}, seed + 80));
    acts.sa_output.push_back(rnd({4, 8}, seed + 81));
    Tensor h = rnd({4, 8}, seed + 82);

    BlendSpec spec;
    spec.mode = BlendMode::kBa;
    spec.alpha = 0.f;
    const LayerActivations refs[1] = {acts};
    BlendContext ctx = make_blend_context(spec, &adapter, refs);
    Tensor ba = sa_module_output(h, model.blocks[0], cfg, 0, &ctx);
    const auto& blk = model.blocks[0];
    Tensor sa = multi_head_attention(h, h, blk.wq, blk.wk, blk.wv, blk.wo,
                                     cfg.n_heads, 1.f);
    layer_ok = bitwise_equal(ba, sa);
  }

  // sample-level: mode ba at alpha 0 vs mode off, byte-identical PNGs
  ModelConfig cfg = toy_config();
  DenoiserModel model = DenoiserModel::init(cfg, 5);
  model.freeze();
  AdapterWeights adapter = AdapterWeights::init(cfg, 6);
  NoiseSchedule sched = NoiseSchedule::linear(cfg.t_max);
  DatasetSpec dspec;
  dspec.image_size = cfg.image_size;
  Rng rrng(7, streams::kDataGen);
  TextureParams tp = sample_texture_params(kDots, dspec.palette, rrng);
  Image ref = render_reference(kDots, RefKind::kSwatch, tp, dspec).image;
  const Image refs_img[1] = {ref};

  bool sample_ok = true;
  for (uint64_t seed : {7ull, 19ull, 1234ull}) {
    SampleRequest off;
    off.class_id = 1;
    off.seed = seed;
    off.steps = 6;
    SampleRequest ba0 = off;
    ba0.blend.mode = BlendMode::kBa;
    ba0.blend.alpha = 0.f;
    Image a = sample(model, &adapter, off, sched, {}).image;
    Image b = sample(model, &adapter, ba0, sched, refs_img).image;
    const std::string pa = work + "/c2_off_" + std::to_string(seed) + ".png";
    const std::string pb = work + "/c2_ba0_" + std::to_string(seed) + ".png";
    write_png(pa, a);
    write_png(pb, b);
    sample_ok = sample_ok && hash_file(pa) == hash_file(pb);
  }
  const double dt = now_s() - t0;
  report(2, "eq1-alpha0-reduction", layer_ok && sample_ok && dt < 60.0,
         fmt("100 layer triples bitwise %s, 3 seeds byte-identical %s, %.1fs",
             layer_ok ? "equal" : "UNEQUAL", sample_ok ? "yes" : "NO", dt));
}

// ---- criterion 3: affinity in alpha ------------------------------------------

void criterion_3() {
  const double t0 = now_s();
  float worst = 0.f;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    ModelConfig cfg = toy_config();
    cfg.d_model = 8;
    cfg.n_blocks = 1;
    DenoiserModel model = DenoiserModel::init(cfg, seed);
    model.freeze();
    AdapterWeights adapter = AdapterWeights::init(cfg, seed + 1);
    LayerActivations acts;
    acts.sa_input.push_back(rnd({4, 8}, seed + 90));
    acts.sa_output.push_back(rnd({4, 8}, seed + 91));
    Tensor h = rnd({4, 8}, seed + 92);
    const LayerActivations refs[1] = {acts};

    auto run = [&](float alpha) {
      BlendSpec spec;
      spec.mode = BlendMode::kBa;
      spec.alpha = alpha;
      BlendContext ctx = make_blend_context(spec, &adapter, refs);
      return sa_module_output(h, model.blocks[0], cfg, 0, &ctx);
    };
    Tensor o0 = run(0.f);
    Tensor o1 = run(1.f);
    for (float alpha : {0.25f, 0.5f, 0.6f, 0.75f}) {
      Tensor oa = run(alpha);
      for (size_t i = 0; i < oa.data().size(); ++i) {
        const float expect = o0.data()[i] + alpha * (o1.data()[i] - o0.data()[i]);
        worst = std::max(worst, std::abs(oa.data()[i] - expect));
      }
    }
  }
  const double dt = now_s() - t0;
  report(3, "alpha-affinity", worst < 1e-6f && dt < 60.0,
         fmt("max elementwise deviation %.2e (< 1e-6), %.1fs", worst, dt));
}

// ---- criterion 9: temperature law ---------------------------------------------

void criterion_9() {
  const double t0 = now_s();
  Rng rng(31, 5);
  bool monotone = true;
  for (int trial = 0; trial < 1000 && monotone; ++trial) {
    std::vector<float> logits(12);
    for (auto& v : logits) v = rng.normal() * 2.f;
    const double h1 = tempered_softmax_entropy(logits, 1.0f);
    const double h2 = tempered_softmax_entropy(logits, 1.25f);
    const double h3 = tempered_softmax_entropy(logits, 1.5f);
    monotone = h2 <= h1 + 1e-12 && h3 <= h2 + 1e-12;
  }

  // inv_temp = 1 equals untempered attention bit-exactly
  bool bitexact = true;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor q = rnd({4, 8}, seed), kv = rnd({6, 8}, seed + 1);
    Tensor wq = rnd({8, 8}, seed + 2, 0.3f), wk = rnd({8, 8}, seed + 3, 0.3f);
    Tensor wv = rnd({8, 8}, seed + 4, 0.3f), wo = rnd({8, 8}, seed + 5, 0.3f);
    Tensor a = multi_head_attention(q, kv, wq, wk, wv, wo, 2, 1.0f);
    Tensor b = multi_head_attention(q, kv, wq, wk, wv, wo, 2, 1.f);
    bitexact = bitexact && bitwise_equal(a, b);
  }
  const double dt = now_s() - t0;
  report(9, "temperature-law", monotone && bitexact,
         fmt("entropy non-increasing on 1000 rows %s, inv_temp=1 bit-exact %s, "
             "%.1fs",
             monotone ? "yes" : "NO", bitexact ? "yes" : "NO", dt));
}

// ---- criterion 10: multi-reference shapes --------------------------------------

void criterion_10() {
  const double t0 = now_s();
  bool shapes_ok = true, rows_ok = true;
  double mass_acc = 0.0;
  int mass_n = 0;
  for (uint64_t seed = 0; seed < 16; ++seed) {
    ModelConfig cfg = toy_config();
    cfg.d_model = 16;
    cfg.n_blocks = 1;
    DenoiserModel model = DenoiserModel::init(cfg, seed);
    model.freeze();
    AdapterWeights adapter = AdapterWeights::init(cfg, seed + 1);

    LayerActivations r1, r2;
    r1.sa_input.push_back(rnd({4, 16}, seed + 30));
    r1.sa_output.push_back(rnd({4, 16}, seed + 31));
    r2.sa_input.push_back(rnd({4, 16}, seed + 32));
    r2.sa_output.push_back(rnd({4, 16}, seed + 33));
    const LayerActivations refs[2] = {r1, r2};

    BlendSpec spec;
    spec.mode = BlendMode::kBa;
    spec.alpha = 1.f;
    spec.capture_masks = true;
    BlendContext ctx = make_blend_context(spec, &adapter, refs);
    shapes_ok = shapes_ok && ctx.ref_sa_out[0].dim(0) == 8 &&
                ctx.segments == std::vector<int>{4, 8};

    Tensor h = rnd({4, 16}, seed + 34);
    sa_module_output(h, model.blocks[0], cfg, 0, &ctx);
    for (const auto& m : ctx.capture->masks) {
      if (m.weights.empty()) continue;
      for (int q = 0; q < m.queries; ++q) {
        double sum = 0;
        for (int k = 0; k < m.keys; ++k)
          sum += m.weights[static_cast<size_t>(q) * m.keys + k];
        rows_ok = rows_ok && std::abs(sum - 1.0) < 1e-6;
      }
    }
    auto mass = ctx.capture->per_query_segment_mass();
    for (size_t q = 0; q < 4; ++q) {
      mass_acc += mass[q * 2];
      ++mass_n;
    }
  }
  const double mean_mass = mass_acc / mass_n;
  const double dt = now_s() - t0;
  report(10, "multi-reference-shapes",
         shapes_ok && rows_ok && std::abs(mean_mass - 0.5) < 0.1,
         fmt("key count doubled %s, rows stochastic %s, mean segment mass "
             "%.3f (0.5 +/- 0.1), %.1fs",
             shapes_ok ? "yes" : "NO", rows_ok ? "yes" : "NO", mean_mass, dt));
}

// ---- pipeline state --------------------------------------------------------------

struct Pipeline {
  RunConfig cfg;
  std::string work;
  Dataset data;
  NoiseSchedule sched;
  DenoiserModel model;
  AdapterWeights adapter;
  uint64_t base_hash = 0;
  double base_minutes = 0, adapter_minutes = 0;
  SurrogateEncoders enc;
};

Pipeline build_pipeline(const std::string& work) {
  Pipeline p{RunConfig::defaults(), work, {}, {}, {}, {}, 0, 0, 0, {}};
  std::fprintf(stderr, "== dataset\n");
  build_dataset(p.cfg.dataset, work + "/data");
  p.data = Dataset::load(work + "/data");
  p.sched = p.cfg.schedule.build();

  std::fprintf(stderr, "== base training\n");
  const double t0 = now_s();
  p.model = DenoiserModel::init(p.cfg.model, p.cfg.train_base.seed);
  AdamW base_opt(p.model.named_parameters(), p.cfg.train_base.opt);
  train_base(p.model, p.data, p.sched, p.cfg.train_base, base_opt, 0,
             [](int e, float tr, float vl) {
               std::fprintf(stderr, "  base epoch %d train %.4f val %.4f\n", e,
                            tr, vl);
             });
  p.base_minutes = (now_s() - t0) / 60.0;
  p.model.freeze();
  p.base_hash = p.model.content_hash();

  std::fprintf(stderr, "== adapter training\n");
  const double t1 = now_s();
  p.adapter = AdapterWeights::init(p.cfg.model, p.cfg.train_adapter.seed);
  AdamW ad_opt(p.adapter.named_parameters(), p.cfg.train_adapter.opt);
  train_adapter(p.model, p.adapter, p.data, p.sched, p.cfg.train_adapter, ad_opt,
                0, [](int e, float tr, float vl) {
                  std::fprintf(stderr, "  adapter epoch %d train %.4f val %.4f\n",
                               e, tr, vl);
                });
  p.adapter_minutes = (now_s() - t1) / 60.0;

  std::fprintf(stderr, "== surrogate encoders\n");
  p.enc.shape = train_shape_encoder(p.data, p.cfg.eval.encoder);
  p.enc.texture = train_texture_encoder(p.cfg.dataset, p.cfg.eval.encoder);
  std::fprintf(stderr, "  shape val acc %.3f texture val acc %.3f\n",
               p.enc.shape.val_accuracy, p.enc.texture.val_accuracy);

  // persist artifacts for the CLI reproducibility criterion
  Checkpoint base_ckpt;
  base_ckpt.phase = "base";
  json meta;
  meta["config"] = json::parse(p.cfg.to_json_string());
  meta["rng"] = {{"seed", p.cfg.train_base.seed},
                 {"next_epoch", p.cfg.train_base.epochs}};
  base_ckpt.meta_json = meta.dump();
  base_ckpt.tensors = snapshot_tensors(p.model.named_parameters());
  save_checkpoint(work + "/base.ckpt", base_ckpt);

  Checkpoint ad_ckpt;
  ad_ckpt.phase = "adapter";
  json ameta;
  ameta["config"] = json::parse(p.cfg.to_json_string());
  ameta["rng"] = {{"seed", p.cfg.train_adapter.seed},
                  {"next_epoch", p.cfg.train_adapter.epochs}};
  ameta["base_hash"] = hex64(p.base_hash);
  ad_ckpt.meta_json = ameta.dump();
  ad_ckpt.tensors = snapshot_tensors(p.adapter.named_parameters());
  save_checkpoint(work + "/adapter.ckpt", ad_ckpt);
  save_encoders(work + "/encoders.ckpt", p.enc);
  return p;
}

void criterion_4(const Pipeline& p) {
  const bool hash_ok = p.model.content_hash() == p.base_hash;
  const int64_t expect = int64_t(p.cfg.model.n_blocks) * 2 *
                         p.cfg.model.d_model * p.cfg.model.d_model;
  const bool count_ok = p.adapter.parameter_count() == expect;
  report(4, "freeze-contract", hash_ok && count_ok,
         fmt("base hash unchanged %s, adapter params %lld == %lld, base "
             "%.1f min, adapter %.1f min",
             hash_ok ? "yes" : "NO",
             static_cast<long long>(p.adapter.parameter_count()),
             static_cast<long long>(expect), p.base_minutes, p.adapter_minutes));
}

void criterion_5(const Pipeline& p) {
  const int draws = 512;
  const float ba = validation_loss(p.model, p.data, p.sched, 97, draws,
                                   &p.adapter, BlendMode::kBa);
  const float naive = validation_loss(p.model, p.data, p.sched, 97, draws,
                                      nullptr, BlendMode::kNaiveImca);
  const bool ok = naive >= 1.10f * ba;
  report(5, "distribution-shift", ok,
         fmt("val eps-loss naive %.4f vs trained BA(alpha=1) %.4f "
             "(margin %.0f%%, need >= 10%%), %d draws",
             naive, ba, (naive / ba - 1.f) * 100.f, draws));
}

void criterion_6(const Pipeline& p, ModeMetrics& ba_out, ModeMetrics& naive_out,
                 std::vector<GeneratedCell>& ba_cells) {
  const double t0 = now_s();
  EvalGridConfig grid = default_eval_grid(p.cfg.dataset);
  grid.seeds_per_cell = p.cfg.eval.seeds_per_cell;
  grid.steps = p.cfg.eval.steps;
  grid.guidance = p.cfg.eval.guidance;
  grid.alpha = 0.6f;
  grid.seed = p.cfg.eval.seed;
  auto refs = realize_references(grid, p.cfg.dataset);

  ba_out = evaluate_mode(p.model, &p.adapter, p.sched, grid, refs, p.enc,
                         BlendMode::kBa, p.cfg.dataset, &ba_cells);
  naive_out = evaluate_mode(p.model, &p.adapter, p.sched, grid, refs, p.enc,
                            BlendMode::kNaiveImca, p.cfg.dataset, nullptr);
  const double dt = now_s() - t0;

  const bool gate = p.enc.shape.val_accuracy >= 0.95f;
  const bool acc_ok = gate && ba_out.holdout_class_acc >= 0.8;
  const bool textual_ok = ba_out.textual_mean > naive_out.textual_mean;
  const bool visual_ok = ba_out.visual_mean > naive_out.visual_mean;
  report(6, "disentanglement-ordering",
         acc_ok && textual_ok && visual_ok && dt < 900.0,
         fmt("holdout class acc %.3f (>= 0.8, gate %.3f), textual %.4f vs "
             "naive %.4f, visual %.4f vs naive %.4f, %.0fs (< 900s)",
             ba_out.holdout_class_acc, p.enc.shape.val_accuracy,
             ba_out.textual_mean, naive_out.textual_mean, ba_out.visual_mean,
             naive_out.visual_mean, dt));
}

void criterion_7(const Pipeline& p) {
  EvalGridConfig grid = default_eval_grid(p.cfg.dataset);
  grid.steps = p.cfg.eval.steps;
  grid.guidance = p.cfg.eval.guidance;
  grid.seed = p.cfg.eval.seed;
  // sweep subset: swatch references, reduced prompts and seeds
  std::vector<RefSpec> swatches;
  for (const auto& r : grid.references)
    if (r.kind == RefKind::kSwatch) swatches.push_back(r);
  grid.references = swatches;
  grid.prompts.resize(p.cfg.eval.sweep_prompts);
  grid.seeds_per_cell = p.cfg.eval.sweep_seeds;
  auto refs = realize_references(grid, p.cfg.dataset);

  const std::vector<float> alphas = p.cfg.eval.sweep_alphas;
  AlphaSweepResult sweep = alpha_sweep(p.model, &p.adapter, p.sched, grid, refs,
                                       p.enc.texture, alphas, p.work + "/sweep");

  // no-blend baseline on identical seeds: similarity value must match the
  // alpha = 0 point exactly
  auto off_cells = generate_grid(p.model, &p.adapter, p.sched, grid, refs,
                                 BlendMode::kOff);
  std::vector<std::vector<float>> ref_embs;
  for (const auto& r : refs) ref_embs.push_back(p.enc.texture.embed(r.image));
  double baseline = 0.0;
  for (const auto& c : off_cells)
    baseline += cosine(p.enc.texture.embed(c.image), ref_embs[c.ref_idx]);
  baseline /= off_cells.size();

  const bool exact0 = sweep.mean_similarity[0] == baseline;
  const bool rho_ok = sweep.spearman > 0.8;
  const bool gain_ok = sweep.mean_similarity.back() > sweep.mean_similarity[0];
  std::string curve;
  for (double v : sweep.mean_similarity) curve += fmt("%.4f ", v);
  report(7, "alpha-monotonicity", exact0 && rho_ok && gain_ok,
         fmt("spearman rho %.3f (> 0.8), alpha0 == baseline %s, curve [ %s], "
             "alpha1 - alpha0 = %.4f",
             sweep.spearman, exact0 ? "exact" : "NO", curve.c_str(),
             sweep.mean_similarity.back() - sweep.mean_similarity[0]));
}

void criterion_8(const ModeMetrics& ba, const ModeMetrics& naive) {
  // uniform-mask unit fixture returns exactly 0.5
  const int g = 8;
  MaskCapture cap;
  cap.segments = {g * g};
  AttentionMask uniform;
  uniform.block = 0;
  uniform.head = 0;
  uniform.queries = g * g;
  uniform.keys = g * g;
  uniform.samples = 1;
  uniform.weights.assign(static_cast<size_t>(g * g) * g * g, 1.f / (g * g));
  cap.masks.push_back(uniform);
  std::vector<bool> labels(g * g);
  for (int q = 0; q < g * g; ++q) labels[q] = (q % g) < g / 2;
  const bool fixture_ok = mask_mass_on_left(cap, labels, g) == 0.5;

  const bool above_half = ba.mask_concentration_mean > 0.5;
  const bool above_naive =
      ba.mask_concentration_mean > naive.mask_concentration_mean;
  report(8, "mask-semantics",
         fixture_ok && above_half && above_naive,
         fmt("trained %.3f (> 0.5) vs naive %.3f, uniform fixture exact 0.5 %s "
             "(used %d skipped %d)",
             ba.mask_concentration_mean, naive.mask_concentration_mean,
             fixture_ok ? "yes" : "NO", ba.mask_samples_used,
             ba.mask_samples_skipped));
}

// ---- criterion 11: reproducibility ---------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BLENDIFF_CLI_PATH) + " " + args +
                          " > /dev/null 2>&1";
  return WEXITSTATUS(std::system(cmd.c_str()));
}

void criterion_11(const Pipeline& p) {
  const std::string w = p.work;
  bool ok = true;
  std::string detail;

  // checkpoint round trip is byte-identical
  Checkpoint loaded = load_checkpoint(w + "/adapter.ckpt");
  save_checkpoint(w + "/adapter_rt.ckpt", loaded);
  const bool rt = hash_file(w + "/adapter.ckpt") == hash_file(w + "/adapter_rt.ckpt");
  ok = ok && rt;

  // gen-data rerun
  RunConfig small = RunConfig::defaults();
  small.dataset.samples_per_cell = 6;
  {
    std::ofstream cfg(w + "/repro_cfg.json");
    cfg << small.to_json_string();
  }
  bool gen_ok =
      run_cli("gen-data --config " + w + "/repro_cfg.json --out " + w + "/g1") == 0 &&
      run_cli("gen-data --config " + w + "/repro_cfg.json --out " + w + "/g2") == 0 &&
      hash_file(w + "/g1/train.csv") == hash_file(w + "/g2/train.csv") &&
      hash_file(w + "/g1/images/s0_t0_0.png") == hash_file(w + "/g2/images/s0_t0_0.png");
  ok = ok && gen_ok;

  // sample rerun against the trained checkpoints
  const std::string sample_args =
      "sample --base " + w + "/base.ckpt --adapter " + w + "/adapter.ckpt" +
      " --class 3 --ref " + w + "/data/references/swatch_t1.png" +
      " --mode ba --alpha 0.6 --seed 21 --capture-masks --out ";
  bool sample_ok = run_cli(sample_args + w + "/r1") == 0 &&
                   run_cli(sample_args + w + "/r2") == 0 &&
                   hash_file(w + "/r1/sample.png") == hash_file(w + "/r2/sample.png") &&
                   hash_file(w + "/r1/masks/masks.bin") ==
                       hash_file(w + "/r2/masks/masks.bin");
  ok = ok && sample_ok;

  // mask-viz rerun
  bool viz_ok = run_cli("mask-viz --masks " + w + "/r1/masks --out " + w + "/v1") == 0 &&
                run_cli("mask-viz --masks " + w + "/r1/masks --out " + w + "/v2") == 0 &&
                hash_file(w + "/v1/mask_aggregate.png") ==
                    hash_file(w + "/v2/mask_aggregate.png");
  ok = ok && viz_ok;

  report(11, "reproducibility", ok,
         fmt("checkpoint round-trip %s, gen-data %s, sample %s, mask-viz %s",
             rt ? "byte-identical" : "NO", gen_ok ? "byte-identical" : "NO",
             sample_ok ? "byte-identical" : "NO",
             viz_ok ? "byte-identical" : "NO"));
}

}  // namespace

int main(int argc, char** argv) {
  std::string work = (fs::temp_directory_path() / "blendiff_acceptance").string();
  if (argc > 1) work = argv[1];
  fs::remove_all(work);
  fs::create_directories(work);
  std::printf("acceptance workspace: %s\n", work.c_str());

  criterion_1();
  criterion_2(work);
  criterion_3();
  criterion_9();
  criterion_10();

  Pipeline p = build_pipeline(work);
  criterion_4(p);
  criterion_5(p);

  ModeMetrics ba_metrics, naive_metrics;
  std::vector<GeneratedCell> ba_cells;
  criterion_6(p, ba_metrics, naive_metrics, ba_cells);
  criterion_7(p);
  criterion_8(ba_metrics, naive_metrics);
  criterion_11(p);

  std::printf("%d criterion(s) failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
