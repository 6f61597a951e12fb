#include "blendiff/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "blendiff/checkpoint.hpp"
#include "blendiff/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace blendiff {

namespace {

template <typename F>
void parallel_for(int n, int threads, const F& f) {
  if (threads <= 0)
    threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::future<void>> futs;
  futs.reserve(threads);
  for (int t = 0; t < threads; ++t)
    futs.push_back(std::async(std::launch::async, [&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) f(i);
    }));
  for (auto& fu : futs) fu.get();
}

std::vector<float> detached_row(const Tensor& t) {
  return std::vector<float>(t.data().begin(), t.data().end());
}

}  // namespace

// ---- shape encoder -----------------------------------------------------------

namespace {
float fan_in_std(int fan_in) { return std::sqrt(2.f / fan_in); }
}  // namespace

ShapeEncoder ShapeEncoder::init(int image_size, int n_classes, uint64_t seed) {
  ShapeEncoder e;
  e.image_size = image_size;
  e.n_classes = n_classes;
  Rng rng(seed, streams::kEncoder);
  const int pd = e.patch * e.patch * 3;
  const int tokens = (image_size / e.patch) * (image_size / e.patch);
  e.w_p = Tensor::param({pd, e.feat}, rng, fan_in_std(pd));
  e.b_p = Tensor::param({e.feat}, rng, 0.01f);
  e.w_h = Tensor::param({tokens * e.feat, e.hidden}, rng, fan_in_std(tokens * e.feat));
  e.b_h = Tensor::param({e.hidden}, rng, 0.01f);
  e.w_o = Tensor::param({e.hidden, e.n_classes}, rng, fan_in_std(e.hidden));
  e.b_o = Tensor::param({e.n_classes}, rng, 0.01f);
  e.center = Tensor::zeros({e.hidden});
  return e;
}

namespace {
Tensor shape_features(const ShapeEncoder& e, const Image& img) {
  Tensor patches = patchify(img.to_tensor(), e.patch);
  Tensor pf = gelu(add_row(matmul(patches, e.w_p), e.b_p));
  Tensor flat = reshape(pf, {1, patches.dim(0) * e.feat});
  return gelu(add_row(matmul(flat, e.w_h), e.b_h));
}
}  // namespace

Tensor ShapeEncoder::logits_graph(const Image& img) const {
  return add_row(matmul(shape_features(*this, img), w_o), b_o);
}

std::vector<float> ShapeEncoder::embed(const Image& img) const {
  std::vector<float> f = detached_row(shape_features(*this, img));
  const auto c = center.data();
  for (size_t i = 0; i < f.size(); ++i) f[i] -= c[i];
  return f;
}

int ShapeEncoder::classify(const Image& img) const {
  auto logits = detached_row(logits_graph(img));
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) -
                          logits.begin());
}

std::vector<std::pair<std::string, Tensor>> ShapeEncoder::named_parameters()
    const {
  return {{"shape_enc.w_p", w_p}, {"shape_enc.b_p", b_p},
          {"shape_enc.w_h", w_h}, {"shape_enc.b_h", b_h},
          {"shape_enc.w_o", w_o}, {"shape_enc.b_o", b_o}};
}

// ---- texture encoder -----------------------------------------------------------

TextureEncoder TextureEncoder::init(int n_classes, uint64_t seed) {
  TextureEncoder e;
  e.n_classes = n_classes;
  Rng rng(seed, streams::kEncoder + 100);
  const int pda = e.patch_a * e.patch_a * 3;
  const int pdb = e.patch_b * e.patch_b * 3;
  e.w0a = Tensor::param({pda, e.feat}, rng, fan_in_std(pda));
  e.b0a = Tensor::param({e.feat}, rng, 0.01f);
  e.w1a = Tensor::param({e.feat, e.feat}, rng, fan_in_std(e.feat));
  e.b1a = Tensor::param({e.feat}, rng, 0.01f);
  e.w0b = Tensor::param({pdb, e.feat}, rng, fan_in_std(pdb));
  e.b0b = Tensor::param({e.feat}, rng, 0.01f);
  e.w1b = Tensor::param({e.feat, e.feat}, rng, fan_in_std(e.feat));
  e.b1b = Tensor::param({e.feat}, rng, 0.01f);
  e.w_o = Tensor::param({4 * e.feat, e.n_classes}, rng, fan_in_std(4 * e.feat));
  e.b_o = Tensor::param({e.n_classes}, rng, 0.01f);
  e.center = Tensor::zeros({4 * e.feat});
  return e;
}

Tensor TextureEncoder::pooled_graph(const Tensor& image) const {
  // patch layernorm strips per-swatch color bias so structure dominates
  Tensor pa = patchify(image, patch_a);
  Tensor lna_g = Tensor::full({pa.dim(1)}, 1.f);
  Tensor lna_b = Tensor::zeros({pa.dim(1)});
  Tensor ha = layernorm(pa, lna_g, lna_b);
  ha = gelu(add_row(matmul(ha, w0a), b0a));
  ha = gelu(add_row(matmul(ha, w1a), b1a));
  Tensor pb = patchify(image, patch_b);
  Tensor lnb_g = Tensor::full({pb.dim(1)}, 1.f);
  Tensor lnb_b = Tensor::zeros({pb.dim(1)});
  Tensor hb = layernorm(pb, lnb_g, lnb_b);
  hb = gelu(add_row(matmul(hb, w0b), b0b));
  hb = gelu(add_row(matmul(hb, w1b), b1b));
  // first and second moments over patches at both scales
  return concat({mean_rows(ha), mean_rows(mul(ha, ha)), mean_rows(hb),
                 mean_rows(mul(hb, hb))},
                1);
}

std::vector<float> TextureEncoder::embed(const Image& img) const {
  std::vector<float> f = detached_row(pooled_graph(img.to_tensor()));
  const auto c = center.data();
  for (size_t i = 0; i < f.size(); ++i) f[i] -= c[i];
  return f;
}

std::vector<float> TextureEncoder::embed_region(const Image& img, int x0, int y0,
                                                int size) const {
  if (x0 < 0 || y0 < 0 || x0 + size > img.w || y0 + size > img.h ||
      size % patch_b != 0)
    throw contract_error("embed_region: bad region");
  Image crop;
  crop.h = size;
  crop.w = size;
  crop.rgb.resize(static_cast<size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y)
    std::copy_n(img.px(y0 + y, x0), static_cast<size_t>(size) * 3,
                crop.rgb.data() + static_cast<size_t>(y) * size * 3);
  std::vector<float> f = detached_row(pooled_graph(crop.to_tensor()));
  const auto c = center.data();
  for (size_t i = 0; i < f.size(); ++i) f[i] -= c[i];
  return f;
}

int TextureEncoder::classify(const Image& img) const {
  Tensor logits = add_row(matmul(pooled_graph(img.to_tensor()), w_o), b_o);
  auto v = detached_row(logits);
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

int TextureEncoder::classify_region_pair(const Image& img, int x0, int y0,
                                         int size, int family_a,
                                         int family_b) const {
  auto feat = embed_region(img, x0, y0, size);
  // logits = feat * w_o + b_o, restricted argmax over the two families
  const auto wv = w_o.data();
  const auto bv = b_o.data();
  auto logit = [&](int cls) {
    double acc = bv[cls];
    for (size_t i = 0; i < feat.size(); ++i)
      acc += double(feat[i]) * wv[i * n_classes + cls];
    return acc;
  };
  return logit(family_a) >= logit(family_b) ? family_a : family_b;
}

std::vector<std::pair<std::string, Tensor>> TextureEncoder::named_parameters()
    const {
  return {{"tex_enc.w0a", w0a}, {"tex_enc.b0a", b0a}, {"tex_enc.w1a", w1a},
          {"tex_enc.b1a", b1a}, {"tex_enc.w0b", w0b}, {"tex_enc.b0b", b0b},
          {"tex_enc.w1b", w1b}, {"tex_enc.b1b", b1b}, {"tex_enc.w_o", w_o},
          {"tex_enc.b_o", b_o}};
}

// ---- encoder training -----------------------------------------------------------

namespace {

struct LabeledImage {
  const Image* img;
  int label;
};

// Shared minibatch classifier training loop.
template <typename LogitsFn>
float train_classifier(std::vector<std::pair<std::string, Tensor>> params,
                       const std::vector<LabeledImage>& train_set,
                       const std::vector<LabeledImage>& val_set,
                       const EncoderTrainConfig& cfg, const LogitsFn& logits,
                       int n_classes) {
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = 1e-4f;
  AdamW opt(std::move(params), ocfg);
  Rng shuffle_root(cfg.seed, streams::kShuffle + 50);

  std::vector<size_t> idx(train_set.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = shuffle_root.split(epoch);
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[rng.below(static_cast<uint32_t>(i))]);
    for (size_t off = 0; off < idx.size(); off += cfg.batch_size) {
      const size_t end = std::min(off + cfg.batch_size, idx.size());
      std::vector<Tensor> rows;
      std::vector<int> targets;
      for (size_t k = off; k < end; ++k) {
        rows.push_back(logits(*train_set[idx[k]].img));
        targets.push_back(train_set[idx[k]].label);
      }
      Tensor batch_logits = rows.size() == 1 ? rows[0] : concat(rows, 0);
      Tensor loss = cross_entropy_logits(batch_logits, targets);
      if (!std::isfinite(loss.item()))
        throw numeric_error("encoder training diverged");
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  (void)n_classes;
  int correct = 0;
  for (const auto& s : val_set) {
    auto v = detached_row(logits(*s.img));
    int pred = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    correct += pred == s.label ? 1 : 0;
  }
  return val_set.empty() ? 0.f : static_cast<float>(correct) / val_set.size();
}

}  // namespace

ShapeEncoder train_shape_encoder(const Dataset& data,
                                 const EncoderTrainConfig& cfg) {
  ShapeEncoder enc = ShapeEncoder::init(
      data.images.empty() ? 32 : data.images[0].h, data.n_shapes(), cfg.seed);
  std::vector<LabeledImage> train_set, val_set;
  for (size_t i : data.train)
    train_set.push_back({&data.images[i], data.rows[i].shape_id});
  for (size_t i : data.val)
    val_set.push_back({&data.images[i], data.rows[i].shape_id});

  enc.val_accuracy = train_classifier(
      enc.named_parameters(), train_set, val_set, cfg,
      [&enc](const Image& img) { return enc.logits_graph(img); }, enc.n_classes);

  // train-set feature mean; centered features make cosine discriminative
  std::vector<double> acc(enc.hidden, 0.0);
  for (const auto& s : train_set) {
    auto f = enc.embed(*s.img);
    for (size_t i = 0; i < f.size(); ++i) acc[i] += f[i];
  }
  auto c = enc.center.data_mut();
  for (size_t i = 0; i < c.size(); ++i)
    c[i] = static_cast<float>(acc[i] / train_set.size());
  return enc;
}

TextureEncoder train_texture_encoder(const DatasetSpec& spec,
                                     const EncoderTrainConfig& cfg) {
  TextureEncoder enc = TextureEncoder::init(spec.n_textures(), cfg.seed);
  // swatch corpus rendered from a dedicated stream, 80/20 train/val
  Rng rng(cfg.seed ^ spec.seed, streams::kSwatch);
  std::vector<Image> images;
  std::vector<int> labels;
  for (int tex = 0; tex < spec.n_textures(); ++tex) {
    Rng trng = rng.split(tex);
    for (int i = 0; i < cfg.swatches_per_family; ++i) {
      TextureParams p = sample_texture_params(tex, spec.palette, trng);
      images.push_back(render_reference(tex, RefKind::kSwatch, p, spec).image);
      labels.push_back(tex);
    }
  }
  std::vector<LabeledImage> train_set, val_set;
  for (size_t i = 0; i < images.size(); ++i) {
    const int pos = static_cast<int>(i) % cfg.swatches_per_family;
    if (pos < (cfg.swatches_per_family * 8) / 10)
      train_set.push_back({&images[i], labels[i]});
    else
      val_set.push_back({&images[i], labels[i]});
  }

  enc.val_accuracy = train_classifier(
      enc.named_parameters(), train_set, val_set, cfg,
      [&enc](const Image& img) {
        return add_row(matmul(enc.pooled_graph(img.to_tensor()), enc.w_o),
                       enc.b_o);
      },
      enc.n_classes);

  std::vector<double> acc(4 * enc.feat, 0.0);
  for (const auto& s : train_set) {
    auto f = enc.embed(*s.img);
    for (size_t i = 0; i < f.size(); ++i) acc[i] += f[i];
  }
  auto c = enc.center.data_mut();
  for (size_t i = 0; i < c.size(); ++i)
    c[i] = static_cast<float>(acc[i] / train_set.size());
  return enc;
}

void save_encoders(const std::string& path, const SurrogateEncoders& enc) {
  Checkpoint ckpt;
  ckpt.phase = "encoders";
  json meta;
  meta["shape_val_accuracy"] = enc.shape.val_accuracy;
  meta["texture_val_accuracy"] = enc.texture.val_accuracy;
  meta["image_size"] = enc.shape.image_size;
  ckpt.meta_json = meta.dump();
  auto sp = enc.shape.named_parameters();
  sp.emplace_back("shape_enc.center", enc.shape.center);
  auto tp = enc.texture.named_parameters();
  tp.emplace_back("tex_enc.center", enc.texture.center);
  sp.insert(sp.end(), tp.begin(), tp.end());
  ckpt.tensors = snapshot_tensors(sp);
  save_checkpoint(path, ckpt);
}

SurrogateEncoders load_encoders(const std::string& path, int image_size,
                                int n_shapes, int n_textures) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.phase != "encoders")
    throw config_error("load_encoders: " + path + " holds phase '" +
                       ckpt.phase + "'");
  SurrogateEncoders enc{ShapeEncoder::init(image_size, n_shapes, 0),
                        TextureEncoder::init(n_textures, 0)};
  auto sp = enc.shape.named_parameters();
  sp.emplace_back("shape_enc.center", enc.shape.center);
  auto tp = enc.texture.named_parameters();
  tp.emplace_back("tex_enc.center", enc.texture.center);
  sp.insert(sp.end(), tp.begin(), tp.end());
  restore_tensors(ckpt, sp);
  json meta = json::parse(ckpt.meta_json);
  enc.shape.val_accuracy = meta.at("shape_val_accuracy").get<float>();
  enc.texture.val_accuracy = meta.at("texture_val_accuracy").get<float>();
  return enc;
}

// ---- metrics ---------------------------------------------------------------------

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw contract_error("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw contract_error("cosine: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double set_consistency(const std::vector<std::vector<float>>& embeddings) {
  if (embeddings.size() < 2)
    throw contract_error("set_consistency: need >= 2 embeddings, got " +
                         std::to_string(embeddings.size()));
  for (size_t i = 0; i < embeddings.size(); ++i) {
    double n = 0.0;
    for (float v : embeddings[i]) n += double(v) * v;
    if (n == 0.0)
      throw contract_error("set_consistency: zero embedding at sample " +
                           std::to_string(i));
  }
  double sum = 0.0;
  int pairs = 0;
  for (size_t i = 0; i < embeddings.size(); ++i)
    for (size_t j = i + 1; j < embeddings.size(); ++j) {
      sum += cosine(embeddings[i], embeddings[j]);
      ++pairs;
    }
  return sum / pairs;
}

namespace {
std::vector<double> ranks(std::span<const double> v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> r(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + j) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}
}  // namespace

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw contract_error("spearman_rho: need two equal-length series");
  auto rx = ranks(x);
  auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double cov = 0, vx = 0, vy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    cov += (rx[i] - mx) * (ry[i] - my);
    vx += (rx[i] - mx) * (rx[i] - mx);
    vy += (ry[i] - my) * (ry[i] - my);
  }
  if (vx == 0 || vy == 0) return 0.0;
  return cov / std::sqrt(vx * vy);
}

double mask_mass_on_left(const MaskCapture& masks,
                         const std::vector<bool>& query_is_a, int token_grid) {
  const int g = token_grid;
  if (static_cast<int>(query_is_a.size()) != g * g)
    throw contract_error("mask_mass_on_left: label grid size mismatch");
  double total = 0.0;
  int64_t terms = 0;
  for (const auto& m : masks.masks) {
    if (m.weights.empty()) continue;
    if (m.queries != g * g || m.keys != g * g) continue;
    for (int q = 0; q < m.queries; ++q) {
      if (!query_is_a[q]) continue;
      double left_mass = 0.0;
      for (int k = 0; k < m.keys; ++k)
        if (k % g < g / 2)
          left_mass += m.weights[static_cast<size_t>(q) * m.keys + k];
      total += left_mass;
      ++terms;
    }
  }
  if (terms == 0)
    throw contract_error("mask_mass_on_left: no A-labelled queries");
  return total / static_cast<double>(terms);
}

std::optional<double> mask_concentration(const MaskCapture& masks,
                                         const ReferenceImage& ref,
                                         const Image& generated,
                                         const TextureEncoder& tex_enc,
                                         const ModelConfig& cfg) {
  if (ref.kind != RefKind::kSplitHalf || !ref.texture_id_b)
    throw contract_error("mask_concentration: reference must be split-half");
  constexpr int kRegionPx = 8;
  const int g = cfg.grid();
  const int rg = cfg.image_size / kRegionPx;
  const int tokens_per_region = kRegionPx / cfg.patch_size;

  // segment the generated image by restricted texture classification
  std::vector<int> region_label(static_cast<size_t>(rg) * rg);
  int count_a = 0, count_b = 0;
  for (int ry = 0; ry < rg; ++ry)
    for (int rx = 0; rx < rg; ++rx) {
      int lab = tex_enc.classify_region_pair(generated, rx * kRegionPx,
                                             ry * kRegionPx, kRegionPx,
                                             ref.texture_id, *ref.texture_id_b);
      region_label[static_cast<size_t>(ry) * rg + rx] = lab;
      (lab == ref.texture_id ? count_a : count_b) += 1;
    }
  if (count_a == 0 || count_b == 0) return std::nullopt;  // degenerate

  std::vector<bool> query_is_a(static_cast<size_t>(g) * g);
  for (int q = 0; q < g * g; ++q) {
    const int ty = q / g, tx = q % g;
    query_is_a[q] =
        region_label[static_cast<size_t>(ty / tokens_per_region) * rg +
                     tx / tokens_per_region] == ref.texture_id;
  }
  return mask_mass_on_left(masks, query_is_a, g);
}

// ---- grid ------------------------------------------------------------------------

EvalGridConfig default_eval_grid(const DatasetSpec& spec) {
  EvalGridConfig grid;
  for (int s = 0; s < spec.n_shapes(); ++s) grid.prompts.push_back(s);
  for (int t = 0; t < spec.n_textures(); ++t)
    grid.references.push_back({RefKind::kSwatch, t, std::nullopt, 900 + (uint64_t)t});
  const int holdout =
      spec.holdout_textures.empty() ? 0 : spec.holdout_textures[0];
  grid.references.push_back({RefKind::kShaped, holdout, std::nullopt, 990});
  grid.references.push_back({RefKind::kSplitHalf, kStripes, kDots, 991});
  return grid;
}

std::vector<ReferenceImage> realize_references(const EvalGridConfig& grid,
                                               const DatasetSpec& spec) {
  std::vector<ReferenceImage> out;
  for (const auto& rs : grid.references) {
    Rng rng(grid.seed ^ rs.param_seed, streams::kReference);
    if (rs.kind == RefKind::kSplitHalf) {
      if (!rs.texture_id_b)
        throw config_error("grid: split-half reference needs texture_id_b");
      TextureParams pa = sample_texture_params(rs.texture_id, spec.palette, rng);
      TextureParams pb = sample_texture_params(*rs.texture_id_b, spec.palette, rng);
      out.push_back(render_split_reference(rs.texture_id, pa, *rs.texture_id_b,
                                           pb, spec));
    } else {
      TextureParams p = sample_texture_params(rs.texture_id, spec.palette, rng);
      out.push_back(render_reference(rs.texture_id, rs.kind, p, spec));
    }
  }
  return out;
}

std::vector<GeneratedCell> generate_grid(const DenoiserModel& model,
                                         const AdapterWeights* adapter,
                                         const NoiseSchedule& sched,
                                         const EvalGridConfig& grid,
                                         std::span<const ReferenceImage> refs,
                                         BlendMode mode, float alpha_override) {
  const int np = static_cast<int>(grid.prompts.size());
  const int nr = static_cast<int>(refs.size());
  const int ns = grid.seeds_per_cell;
  std::vector<GeneratedCell> cells(static_cast<size_t>(np) * nr * ns);

  Rng seed_root(grid.seed, streams::kEvalSeed);
  parallel_for(static_cast<int>(cells.size()), grid.threads, [&](int i) {
    const int p = i / (nr * ns);
    const int r = (i / ns) % nr;
    const int s = i % ns;
    GeneratedCell& cell = cells[i];
    cell.prompt_idx = p;
    cell.ref_idx = r;
    cell.seed_idx = s;

    SampleRequest req;
    req.class_id = grid.prompts[p];
    req.blend.mode = mode;
    req.blend.alpha = alpha_override >= 0.f ? alpha_override : grid.alpha;
    req.blend.inv_temp = grid.inv_temp;
    req.blend.capture_masks =
        mode != BlendMode::kOff && refs[r].kind == RefKind::kSplitHalf;
    // identical noise across modes for comparability
    req.seed = seed_root.split(p).split(r).at(static_cast<uint64_t>(s));
    req.steps = grid.steps;
    req.guidance_scale = grid.guidance;
    const Image ref_imgs[1] = {refs[r].image};
    SampleResult res =
        sample(model, adapter, req, sched,
               mode == BlendMode::kOff ? std::span<const Image>{}
                                       : std::span<const Image>(ref_imgs, 1));
    cell.image = std::move(res.image);
    cell.masks = res.masks;
  });
  return cells;
}

// ---- mode evaluation ----------------------------------------------------------

ModeMetrics evaluate_mode(const DenoiserModel& model,
                          const AdapterWeights* adapter,
                          const NoiseSchedule& sched, const EvalGridConfig& grid,
                          std::span<const ReferenceImage> refs,
                          const SurrogateEncoders& enc, BlendMode mode,
                          const DatasetSpec& spec,
                          std::vector<GeneratedCell>* cells_out) {
  ModeMetrics mm;
  mm.mode = blend_mode_name(mode);
  auto cells = generate_grid(model, adapter, sched, grid, refs, mode);

  const int np = static_cast<int>(grid.prompts.size());
  const int nr = static_cast<int>(refs.size());

  // textual consistency: fixed prompt, varying references
  double tsum = 0.0;
  for (int p = 0; p < np; ++p) {
    std::vector<std::vector<float>> embs;
    for (const auto& c : cells)
      if (c.prompt_idx == p) embs.push_back(enc.shape.embed(c.image));
    const double v = set_consistency(embs);
    mm.textual_per_prompt[grid.prompts[p]] = v;
    tsum += v;
  }
  mm.textual_mean = tsum / np;

  // visual consistency: fixed reference, varying prompts
  double vsum = 0.0;
  for (int r = 0; r < nr; ++r) {
    std::vector<std::vector<float>> embs;
    for (const auto& c : cells)
      if (c.ref_idx == r) embs.push_back(enc.texture.embed(c.image));
    const double v = set_consistency(embs);
    mm.visual_per_ref[r] = v;
    vsum += v;
  }
  mm.visual_mean = vsum / nr;

  // class accuracy behind the encoder validation gate
  if (enc.shape.val_accuracy >= 0.95f) {
    double asum = 0.0;
    int holdout_hits = 0, holdout_total = 0;
    std::vector<int> hits(np, 0), totals(np, 0);
    for (const auto& c : cells) {
      const int pred = enc.shape.classify(c.image);
      const bool ok = pred == grid.prompts[c.prompt_idx];
      hits[c.prompt_idx] += ok ? 1 : 0;
      ++totals[c.prompt_idx];
      const auto& ref = refs[c.ref_idx];
      if (ref.kind != RefKind::kSplitHalf && spec.is_holdout(ref.texture_id)) {
        holdout_hits += ok ? 1 : 0;
        ++holdout_total;
      }
    }
    for (int p = 0; p < np; ++p) {
      const double acc = totals[p] ? double(hits[p]) / totals[p] : 0.0;
      mm.class_acc_per_prompt[grid.prompts[p]] = acc;
      asum += acc;
    }
    mm.class_acc_mean = asum / np;
    if (holdout_total > 0)
      mm.holdout_class_acc = double(holdout_hits) / holdout_total;
  }

  // mask concentration over split-half cells
  if (mode != BlendMode::kOff) {
    double msum = 0.0;
    for (const auto& c : cells) {
      const auto& ref = refs[c.ref_idx];
      if (ref.kind != RefKind::kSplitHalf || !c.masks) continue;
      auto conc = mask_concentration(*c.masks, ref, c.image, enc.texture, model.cfg);
      if (conc) {
        msum += *conc;
        ++mm.mask_samples_used;
      } else {
        ++mm.mask_samples_skipped;
      }
    }
    if (mm.mask_samples_used > 0)
      mm.mask_concentration_mean = msum / mm.mask_samples_used;
  }

  if (cells_out) *cells_out = std::move(cells);
  return mm;
}

const ModeMetrics* EvalReport::mode(const std::string& name) const {
  for (const auto& m : modes)
    if (m.mode == name) return &m;
  return nullptr;
}

EvalReport run_eval(const DenoiserModel& model, const AdapterWeights* adapter,
                    const NoiseSchedule& sched, const EvalGridConfig& grid,
                    const SurrogateEncoders& enc, const DatasetSpec& spec,
                    const std::vector<BlendMode>& modes,
                    const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto refs = realize_references(grid, spec);

  EvalReport report;
  report.shape_encoder_val_acc = enc.shape.val_accuracy;
  report.texture_encoder_val_acc = enc.texture.val_accuracy;
  report.class_gate_passed = enc.shape.val_accuracy >= 0.95f;

  for (BlendMode mode : modes) {
    std::vector<GeneratedCell> cells;
    report.modes.push_back(evaluate_mode(model, adapter, sched, grid, refs, enc,
                                         mode, spec, &cells));
    // contact sheet: rows = references, columns = prompts, first seed
    std::vector<Image> tiles;
    for (size_t r = 0; r < refs.size(); ++r)
      for (size_t p = 0; p < grid.prompts.size(); ++p)
        for (const auto& c : cells)
          if (c.ref_idx == static_cast<int>(r) &&
              c.prompt_idx == static_cast<int>(p) && c.seed_idx == 0) {
            tiles.push_back(c.image);
            break;
          }
    Image sheet = contact_sheet(tiles, static_cast<int>(refs.size()),
                                static_cast<int>(grid.prompts.size()));
    write_png((fs::path(out_dir) /
               ("contact_" + std::string(blend_mode_name(mode)) + ".png"))
                  .string(),
              sheet);
  }

  write_report_json((fs::path(out_dir) / "report.json").string(), report);
  write_report_csv((fs::path(out_dir) / "report.csv").string(), report);
  return report;
}

namespace {
json mode_to_json(const ModeMetrics& m) {
  json j;
  j["textual_per_prompt"] = m.textual_per_prompt;
  j["visual_per_ref"] = m.visual_per_ref;
  j["textual_mean"] = m.textual_mean;
  j["visual_mean"] = m.visual_mean;
  if (m.class_acc_mean >= 0.0) {
    j["class_acc_per_prompt"] = m.class_acc_per_prompt;
    j["class_acc_mean"] = m.class_acc_mean;
    if (m.holdout_class_acc >= 0.0) j["holdout_class_acc"] = m.holdout_class_acc;
  } else {
    j["class_accuracy"] = nullptr;  // gate refused scoring
  }
  if (m.mask_concentration_mean >= 0.0)
    j["mask_concentration_mean"] = m.mask_concentration_mean;
  j["mask_samples_used"] = m.mask_samples_used;
  j["mask_samples_skipped"] = m.mask_samples_skipped;
  return j;
}
}  // namespace

void write_report_json(const std::string& path, const EvalReport& report) {
  json j;
  j["encoders"] = {{"shape_val_accuracy", report.shape_encoder_val_acc},
                   {"texture_val_accuracy", report.texture_encoder_val_acc},
                   {"class_gate_passed", report.class_gate_passed}};
  for (const auto& m : report.modes) j["modes"][m.mode] = mode_to_json(m);
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  out << "metric,mode,key,value\n";
  char buf[64];
  auto row = [&](const std::string& metric, const std::string& mode,
                 const std::string& key, double v) {
    std::snprintf(buf, sizeof buf, "%.8g", v);
    out << metric << "," << mode << "," << key << "," << buf << "\n";
  };
  row("shape_encoder_val_acc", "", "", report.shape_encoder_val_acc);
  row("texture_encoder_val_acc", "", "", report.texture_encoder_val_acc);
  for (const auto& m : report.modes) {
    for (const auto& [k, v] : m.textual_per_prompt)
      row("textual_consistency", m.mode, "prompt" + std::to_string(k), v);
    for (const auto& [k, v] : m.visual_per_ref)
      row("visual_consistency", m.mode, "ref" + std::to_string(k), v);
    for (const auto& [k, v] : m.class_acc_per_prompt)
      row("class_accuracy", m.mode, "prompt" + std::to_string(k), v);
    row("textual_mean", m.mode, "", m.textual_mean);
    row("visual_mean", m.mode, "", m.visual_mean);
    if (m.class_acc_mean >= 0.0) row("class_acc_mean", m.mode, "", m.class_acc_mean);
    if (m.holdout_class_acc >= 0.0)
      row("holdout_class_acc", m.mode, "", m.holdout_class_acc);
    if (m.mask_concentration_mean >= 0.0)
      row("mask_concentration", m.mode, "", m.mask_concentration_mean);
  }
}

// ---- alpha sweep ----------------------------------------------------------------

AlphaSweepResult alpha_sweep(const DenoiserModel& model,
                             const AdapterWeights* adapter,
                             const NoiseSchedule& sched, EvalGridConfig grid,
                             std::span<const ReferenceImage> refs,
                             const TextureEncoder& tex_enc,
                             const std::vector<float>& alphas,
                             const std::string& out_dir) {
  if (alphas.empty()) throw contract_error("alpha_sweep: empty alpha list");
  for (size_t i = 1; i < alphas.size(); ++i)
    if (alphas[i] <= alphas[i - 1])
      throw contract_error("alpha_sweep: alphas must be strictly ascending");
  fs::create_directories(out_dir);

  // reference embeddings once
  std::vector<std::vector<float>> ref_embs;
  for (const auto& r : refs) ref_embs.push_back(tex_enc.embed(r.image));

  AlphaSweepResult result;
  result.alphas = alphas;
  for (float a : alphas) {
    auto cells = generate_grid(model, adapter, sched, grid, refs,
                               BlendMode::kBa, a);
    double sum = 0.0;
    for (const auto& c : cells)
      sum += cosine(tex_enc.embed(c.image), ref_embs[c.ref_idx]);
    result.mean_similarity.push_back(sum / cells.size());

    std::vector<Image> tiles;
    for (const auto& c : cells)
      if (c.seed_idx == 0) tiles.push_back(c.image);
    char name[64];
    std::snprintf(name, sizeof name, "sweep_alpha_%.2f.png", a);
    write_png((fs::path(out_dir) / name).string(),
              contact_sheet(tiles, static_cast<int>(refs.size()),
                            static_cast<int>(grid.prompts.size())));
  }

  std::vector<double> xs(alphas.begin(), alphas.end());
  result.spearman = spearman_rho(xs, result.mean_similarity);

  std::ofstream csv((fs::path(out_dir) / "sweep.csv").string());
  csv << "alpha,mean_similarity\n";
  char buf[80];
  for (size_t i = 0; i < alphas.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.4g,%.8g", double(alphas[i]),
                  result.mean_similarity[i]);
    csv << buf << "\n";
  }
  json j;
  j["alphas"] = result.alphas;
  j["mean_similarity"] = result.mean_similarity;
  j["spearman"] = result.spearman;
  std::ofstream js((fs::path(out_dir) / "sweep.json").string());
  js << j.dump(2) << "\n";
  return result;
}

}  // namespace blendiff
