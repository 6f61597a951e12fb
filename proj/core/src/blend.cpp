#include "blendiff/blend.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "blendiff/errors.hpp"
#include "blendiff/image.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace blendiff {

const char* blend_mode_name(BlendMode m) {
  switch (m) {
    case BlendMode::kOff: return "off";
    case BlendMode::kBa: return "ba";
    case BlendMode::kNaiveImca: return "naive-imca";
  }
  return "?";
}

BlendMode blend_mode_from_name(const std::string& name) {
  if (name == "off") return BlendMode::kOff;
  if (name == "ba") return BlendMode::kBa;
  if (name == "naive-imca") return BlendMode::kNaiveImca;
  throw config_error("unknown blend mode: " + name);
}

AdapterWeights AdapterWeights::init(const ModelConfig& cfg, uint64_t seed,
                                    float stddev) {
  Rng rng(seed, streams::kAdapterInit);
  AdapterWeights w;
  const int d = cfg.d_model;
  for (int i = 0; i < cfg.n_blocks; ++i) {
    w.w_k.push_back(Tensor::param({d, d}, rng, stddev));
    w.w_v.push_back(Tensor::param({d, d}, rng, stddev));
  }
  return w;
}

std::vector<std::pair<std::string, Tensor>> AdapterWeights::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < w_k.size(); ++i) {
    out.emplace_back("adapter.blk" + std::to_string(i) + ".wk", w_k[i]);
    out.emplace_back("adapter.blk" + std::to_string(i) + ".wv", w_v[i]);
  }
  return out;
}

int64_t AdapterWeights::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

uint64_t AdapterWeights::content_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : named_parameters()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(float), h);
  }
  return h;
}

// ---- mask capture -----------------------------------------------------------

void MaskCapture::accumulate(int block, int head, int n_heads,
                             std::span<const float> probs, int queries,
                             int keys) {
  const size_t idx = static_cast<size_t>(block) * n_heads + head;
  if (masks.size() <= idx) masks.resize(idx + 1);
  AttentionMask& m = masks[idx];
  if (m.weights.empty()) {
    m.block = block;
    m.head = head;
    m.queries = queries;
    m.keys = keys;
    m.samples = 1;
    m.weights.assign(probs.begin(), probs.end());
    forward_count = std::max(forward_count, m.samples);
    return;
  }
  if (m.queries != queries || m.keys != keys)
    throw contract_error("mask capture: geometry changed between forwards");
  ++m.samples;
  forward_count = std::max(forward_count, m.samples);
  const float inv = 1.f / static_cast<float>(m.samples);
  for (size_t i = 0; i < m.weights.size(); ++i)
    m.weights[i] += (probs[i] - m.weights[i]) * inv;
}

std::vector<float> MaskCapture::per_query_segment_mass() const {
  if (masks.empty() || segments.empty()) return {};
  const int q = masks[0].queries;
  const int ns = static_cast<int>(segments.size());
  std::vector<double> acc(static_cast<size_t>(q) * ns, 0.0);
  int counted = 0;
  for (const auto& m : masks) {
    if (m.weights.empty()) continue;
    ++counted;
    for (int i = 0; i < q; ++i) {
      int s0 = 0;
      for (int s = 0; s < ns; ++s) {
        double mass = 0.0;
        for (int k = s0; k < segments[s]; ++k)
          mass += m.weights[static_cast<size_t>(i) * m.keys + k];
        acc[static_cast<size_t>(i) * ns + s] += mass;
        s0 = segments[s];
      }
    }
  }
  std::vector<float> out(acc.size());
  for (size_t i = 0; i < acc.size(); ++i)
    out[i] = counted ? static_cast<float>(acc[i] / counted) : 0.f;
  return out;
}

void save_masks(const MaskCapture& cap, const std::string& dir) {
  fs::create_directories(dir);
  json meta;
  meta["segments"] = cap.segments;
  meta["forward_count"] = cap.forward_count;
  json entries = json::array();
  std::ofstream bin((fs::path(dir) / "masks.bin").string(), std::ios::binary);
  size_t offset = 0;
  for (const auto& m : cap.masks) {
    if (m.weights.empty()) continue;
    entries.push_back({{"block", m.block},
                       {"head", m.head},
                       {"queries", m.queries},
                       {"keys", m.keys},
                       {"samples", m.samples},
                       {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(m.weights.data()),
              static_cast<std::streamsize>(m.weights.size() * sizeof(float)));
    offset += m.weights.size();
  }
  meta["entries"] = std::move(entries);
  meta["per_query_segment_mass"] = cap.per_query_segment_mass();
  std::ofstream out((fs::path(dir) / "masks.json").string());
  out << meta.dump(2) << "\n";
}

MaskCapture load_masks(const std::string& dir) {
  std::ifstream in((fs::path(dir) / "masks.json").string());
  if (!in) throw config_error("load_masks: cannot open masks.json in " + dir);
  json meta = json::parse(in);
  std::ifstream bin((fs::path(dir) / "masks.bin").string(), std::ios::binary);
  if (!bin) throw config_error("load_masks: cannot open masks.bin in " + dir);

  MaskCapture cap;
  cap.segments = meta.at("segments").get<std::vector<int>>();
  cap.forward_count = meta.at("forward_count").get<int>();
  for (const auto& e : meta.at("entries")) {
    AttentionMask m;
    m.block = e.at("block").get<int>();
    m.head = e.at("head").get<int>();
    m.queries = e.at("queries").get<int>();
    m.keys = e.at("keys").get<int>();
    m.samples = e.value("samples", 1);
    m.weights.resize(static_cast<size_t>(m.queries) * m.keys);
    bin.seekg(static_cast<std::streamoff>(e.at("offset").get<size_t>() *
                                          sizeof(float)));
    bin.read(reinterpret_cast<char*>(m.weights.data()),
             static_cast<std::streamsize>(m.weights.size() * sizeof(float)));
    cap.masks.push_back(std::move(m));
  }
  return cap;
}

// ---- attention --------------------------------------------------------------

std::pair<Tensor, std::vector<int>> multi_ref_concat(std::span<const Tensor> refs) {
  if (refs.empty()) throw contract_error("multi_ref_concat: no references");
  const int d = refs[0].dim(1);
  std::vector<int> boundaries;
  std::vector<Tensor> parts;
  int total = 0;
  for (const auto& r : refs) {
    if (r.dim(1) != d)
      throw contract_error("multi_ref_concat: feature dim mismatch " +
                           shape_str(refs[0].shape()) + " vs " +
                           shape_str(r.shape()));
    total += r.dim(0);
    boundaries.push_back(total);
    parts.push_back(r);
  }
  if (parts.size() == 1) return {parts[0], std::move(boundaries)};
  return {concat(parts, 0), std::move(boundaries)};
}

Tensor multi_head_attention(const Tensor& q_src, const Tensor& kv_src,
                            const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor& wo, int n_heads, float inv_temp,
                            MaskCapture* sink, int block_index) {
  if (q_src.dim(1) != wq.dim(0) || kv_src.dim(1) != wk.dim(0))
    throw contract_error("attention: token dim mismatch: queries " +
                         shape_str(q_src.shape()) + ", keys " +
                         shape_str(kv_src.shape()) + ", wq " +
                         shape_str(wq.shape()));
  const int d = wq.dim(1);
  if (d % n_heads != 0)
    throw contract_error("attention: width not divisible by heads");
  const int dh = d / n_heads;
  const float factor = inv_temp / std::sqrt(static_cast<float>(dh));

  Tensor q = matmul(q_src, wq);
  Tensor k = matmul(kv_src, wk);
  Tensor v = matmul(kv_src, wv);

  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), factor);
    Tensor probs = softmax_rows(scores);
    if (sink)
      sink->accumulate(block_index, h, n_heads, probs.data(), probs.dim(0),
                       probs.dim(1));
    heads.push_back(matmul(probs, vh));
  }
  Tensor merged = n_heads == 1 ? heads[0] : concat(heads, 1);
  return matmul(merged, wo);
}

Tensor im_cross_attention(const Tensor& z_noisy, const Tensor& ref_feat,
                          const Tensor& wq_frozen, const Tensor& w_k_train,
                          const Tensor& w_v_train, const Tensor& wo_frozen,
                          int n_heads, float inv_temp, MaskCapture* sink,
                          int block_index) {
  return multi_head_attention(z_noisy, ref_feat, wq_frozen, w_k_train,
                              w_v_train, wo_frozen, n_heads, inv_temp, sink,
                              block_index);
}

BlendContext make_blend_context(const BlendSpec& spec,
                                const AdapterWeights* adapter,
                                std::span<const LayerActivations> refs) {
  BlendContext ctx;
  ctx.spec = spec;
  ctx.adapter = adapter;
  if (spec.mode == BlendMode::kOff) {
    if (spec.capture_masks)
      throw contract_error("blend: mask capture requires an active blend mode");
    return ctx;
  }
  if (refs.empty())
    throw contract_error("blend: mode " +
                         std::string(blend_mode_name(spec.mode)) +
                         " requires at least one reference");
  if (spec.mode == BlendMode::kBa && adapter == nullptr)
    throw contract_error("blend: mode ba requires adapter weights");
  if (spec.inv_temp <= 0.f)
    throw contract_error("blend: inv_temp must be positive");

  const size_t n_blocks = refs[0].sa_output.size();
  for (const auto& r : refs)
    if (r.sa_output.size() != n_blocks || r.sa_input.size() != n_blocks)
      throw contract_error("blend: reference activation depth mismatch");

  for (size_t b = 0; b < n_blocks; ++b) {
    std::vector<Tensor> outs, ins;
    for (const auto& r : refs) {
      outs.push_back(r.sa_output[b]);
      ins.push_back(r.sa_input[b]);
    }
    auto [cat_out, bounds] = multi_ref_concat(outs);
    auto [cat_in, bounds2] = multi_ref_concat(ins);
    ctx.ref_sa_out.push_back(cat_out);
    ctx.ref_sa_in.push_back(cat_in);
    if (b == 0) ctx.segments = bounds;
  }
  if (spec.capture_masks) {
    ctx.capture = std::make_shared<MaskCapture>();
    ctx.capture->segments = ctx.segments;
  }
  return ctx;
}

Tensor sa_module_output(const Tensor& h, const DenoiserBlock& blk,
                        const ModelConfig& cfg, int block_index,
                        const BlendContext* ctx) {
  if (ctx == nullptr || ctx->spec.mode == BlendMode::kOff)
    return multi_head_attention(h, h, blk.wq, blk.wk, blk.wv, blk.wo,
                                cfg.n_heads, 1.f);
  if (ctx->spec.mode == BlendMode::kNaiveImca) {
    // replace the module output with cross-attention onto the clean
    // reference tokens, frozen projections only
    return multi_head_attention(h, ctx->ref_sa_in[block_index], blk.wq, blk.wk,
                                blk.wv, blk.wo, cfg.n_heads, ctx->spec.inv_temp,
                                ctx->capture.get(), block_index);
  }
  // blended: frozen self-attention plus the scaled reference term
  Tensor sa = multi_head_attention(h, h, blk.wq, blk.wk, blk.wv, blk.wo,
                                   cfg.n_heads, 1.f);
  if (ctx->spec.alpha == 0.f) return sa;  // exact reduction to plain SA
  Tensor imca = im_cross_attention(
      h, ctx->ref_sa_out[block_index], blk.wq, ctx->adapter->w_k[block_index],
      ctx->adapter->w_v[block_index], blk.wo, cfg.n_heads, ctx->spec.inv_temp,
      ctx->capture.get(), block_index);
  return add(sa, scale(imca, ctx->spec.alpha));
}

double tempered_softmax_entropy(std::span<const float> logits, float inv_temp) {
  if (logits.empty()) return 0.0;
  double mx = -1e300;
  for (float v : logits) mx = std::max(mx, double(v) * inv_temp);
  double sum = 0.0;
  for (float v : logits) sum += std::exp(double(v) * inv_temp - mx);
  double entropy = 0.0;
  for (float v : logits) {
    double p = std::exp(double(v) * inv_temp - mx) / sum;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return entropy;
}

}  // namespace blendiff
