#include "blendiff/model.hpp"

#include <cmath>

#include "blendiff/blend.hpp"

namespace blendiff {

void ModelConfig::validate() const {
  if (image_size % patch_size != 0)
    throw config_error("model: image_size " + std::to_string(image_size) +
                       " not divisible by patch_size " +
                       std::to_string(patch_size));
  if (d_model % n_heads != 0)
    throw config_error("model: d_model " + std::to_string(d_model) +
                       " not divisible by n_heads " + std::to_string(n_heads));
  if (n_blocks < 1 || n_classes < 1 || t_max < 1)
    throw config_error("model: n_blocks, n_classes, t_max must be positive");
}

LayerActivations LayerActivations::detached() const {
  LayerActivations out;
  out.sa_input.reserve(sa_input.size());
  out.sa_output.reserve(sa_output.size());
  for (const auto& t : sa_input) out.sa_input.push_back(t.detach());
  for (const auto& t : sa_output) out.sa_output.push_back(t.detach());
  return out;
}

DenoiserModel DenoiserModel::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed, streams::kWeightInit);
  const int d = cfg.d_model;
  const int pd = cfg.patch_dim();
  const int hid = d * cfg.mlp_ratio;
  constexpr float kStd = 0.02f;

  DenoiserModel m;
  m.cfg = cfg;
  m.patch_w = Tensor::param({pd, d}, rng, kStd);
  m.patch_b = Tensor::param({d}, rng, kStd);
  m.pos = Tensor::param({cfg.tokens(), d}, rng, kStd);
  m.time_w1 = Tensor::param({d, d}, rng, kStd);
  m.time_b1 = Tensor::param({d}, rng, kStd);
  m.time_w2 = Tensor::param({d, d}, rng, kStd);
  m.time_b2 = Tensor::param({d}, rng, kStd);
  m.cls_table = Tensor::param({cfg.n_classes + 1, d}, rng, kStd);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    DenoiserBlock b;
    b.ln1_g = Tensor::full({d}, 1.f);
    b.ln1_b = Tensor::zeros({d});
    b.wq = Tensor::param({d, d}, rng, kStd);
    b.wk = Tensor::param({d, d}, rng, kStd);
    b.wv = Tensor::param({d, d}, rng, kStd);
    b.wo = Tensor::param({d, d}, rng, kStd);
    b.ln2_g = Tensor::full({d}, 1.f);
    b.ln2_b = Tensor::zeros({d});
    b.ca_wq = Tensor::param({d, d}, rng, kStd);
    b.ca_wk = Tensor::param({d, d}, rng, kStd);
    b.ca_wv = Tensor::param({d, d}, rng, kStd);
    b.ca_wo = Tensor::param({d, d}, rng, kStd);
    b.ln3_g = Tensor::full({d}, 1.f);
    b.ln3_b = Tensor::zeros({d});
    b.mlp_w1 = Tensor::param({d, hid}, rng, kStd);
    b.mlp_b1 = Tensor::param({hid}, rng, kStd);
    b.mlp_w2 = Tensor::param({hid, d}, rng, kStd);
    b.mlp_b2 = Tensor::param({d}, rng, kStd);
    b.ln1_g.set_requires_grad(true);
    b.ln1_b.set_requires_grad(true);
    b.ln2_g.set_requires_grad(true);
    b.ln2_b.set_requires_grad(true);
    b.ln3_g.set_requires_grad(true);
    b.ln3_b.set_requires_grad(true);
    m.blocks.push_back(std::move(b));
  }
  m.lnf_g = Tensor::full({d}, 1.f);
  m.lnf_b = Tensor::zeros({d});
  m.lnf_g.set_requires_grad(true);
  m.lnf_b.set_requires_grad(true);
  m.unembed_w = Tensor::param({d, pd}, rng, kStd);
  m.unembed_b = Tensor::param({pd}, rng, kStd);
  return m;
}

std::vector<std::pair<std::string, Tensor>> DenoiserModel::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch.w", patch_w);
  out.emplace_back("patch.b", patch_b);
  out.emplace_back("pos", pos);
  out.emplace_back("time.w1", time_w1);
  out.emplace_back("time.b1", time_b1);
  out.emplace_back("time.w2", time_w2);
  out.emplace_back("time.b2", time_b2);
  out.emplace_back("cls_table", cls_table);
  for (size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "blk" + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.g", b.ln1_g);
    out.emplace_back(p + "ln1.b", b.ln1_b);
    out.emplace_back(p + "sa.wq", b.wq);
    out.emplace_back(p + "sa.wk", b.wk);
    out.emplace_back(p + "sa.wv", b.wv);
    out.emplace_back(p + "sa.wo", b.wo);
    out.emplace_back(p + "ln2.g", b.ln2_g);
    out.emplace_back(p + "ln2.b", b.ln2_b);
    out.emplace_back(p + "ca.wq", b.ca_wq);
    out.emplace_back(p + "ca.wk", b.ca_wk);
    out.emplace_back(p + "ca.wv", b.ca_wv);
    out.emplace_back(p + "ca.wo", b.ca_wo);
    out.emplace_back(p + "ln3.g", b.ln3_g);
    out.emplace_back(p + "ln3.b", b.ln3_b);
    out.emplace_back(p + "mlp.w1", b.mlp_w1);
    out.emplace_back(p + "mlp.b1", b.mlp_b1);
    out.emplace_back(p + "mlp.w2", b.mlp_w2);
    out.emplace_back(p + "mlp.b2", b.mlp_b2);
  }
  out.emplace_back("final.ln.g", lnf_g);
  out.emplace_back("final.ln.b", lnf_b);
  out.emplace_back("unembed.w", unembed_w);
  out.emplace_back("unembed.b", unembed_b);
  return out;
}

int64_t DenoiserModel::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

void DenoiserModel::freeze() {
  for (auto& [name, t] : named_parameters()) {
    Tensor tt = t;
    tt.set_requires_grad(false);
  }
  frozen = true;
}

uint64_t DenoiserModel::content_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : named_parameters()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(float), h);
  }
  return h;
}

Tensor sinusoidal_embedding(int t, int dim) {
  const int half = dim / 2;
  std::vector<float> v(dim, 0.f);
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    v[i] = static_cast<float>(std::sin(t * freq));
    v[half + i] = static_cast<float>(std::cos(t * freq));
  }
  return Tensor::from_vec({1, dim}, std::move(v));
}

Tensor image_to_model_space(const Image& img) {
  std::vector<float> v(img.rgb.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = img.rgb[i] * 2.f - 1.f;
  return Tensor::from_vec({img.h, img.w, 3}, std::move(v));
}

Image model_space_to_image(const Tensor& t) {
  Image img;
  img.h = t.dim(0);
  img.w = t.dim(1);
  img.rgb.resize(t.data().size());
  const auto v = t.data();
  for (size_t i = 0; i < img.rgb.size(); ++i)
    img.rgb[i] = std::clamp((v[i] + 1.f) * 0.5f, 0.f, 1.f);
  return img;
}

ForwardResult forward(const DenoiserModel& model, const Tensor& x_t, int t,
                      int class_id, const BlendContext* blend) {
  const ModelConfig& cfg = model.cfg;
  if (t < 0 || t > cfg.t_max)
    throw contract_error("forward: timestep " + std::to_string(t) +
                         " outside [0," + std::to_string(cfg.t_max) + "]");
  if (class_id < 0 || class_id > cfg.n_classes)
    throw contract_error("forward: class id " + std::to_string(class_id) +
                         " outside [0," + std::to_string(cfg.n_classes) + "]");
  if (x_t.ndim() != 3 || x_t.dim(0) != cfg.image_size ||
      x_t.dim(1) != cfg.image_size || x_t.dim(2) != 3)
    throw contract_error("forward: input shape " + shape_str(x_t.shape()) +
                         " does not match config image size " +
                         std::to_string(cfg.image_size));

  Tensor tokens = patchify(x_t, cfg.patch_size);
  Tensor z = add_row(matmul(tokens, model.patch_w), model.patch_b);
  z = add(z, model.pos);

  Tensor temb = sinusoidal_embedding(t, cfg.d_model);
  temb = gelu(add_row(matmul(temb, model.time_w1), model.time_b1));
  temb = add_row(matmul(temb, model.time_w2), model.time_b2);
  z = add_row(z, temb);

  Tensor cls_tok = embedding_lookup(model.cls_table, {class_id});

  ForwardResult res;
  res.acts.sa_input.reserve(cfg.n_blocks);
  res.acts.sa_output.reserve(cfg.n_blocks);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    const DenoiserBlock& blk = model.blocks[i];

    Tensor h = layernorm(z, blk.ln1_g, blk.ln1_b);
    Tensor sa = sa_module_output(h, blk, cfg, i, blend);
    res.acts.sa_input.push_back(h);
    res.acts.sa_output.push_back(sa);
    z = add(z, sa);

    Tensor c = layernorm(z, blk.ln2_g, blk.ln2_b);
    Tensor ca = multi_head_attention(c, cls_tok, blk.ca_wq, blk.ca_wk,
                                     blk.ca_wv, blk.ca_wo, cfg.n_heads, 1.f);
    z = add(z, ca);

    Tensor m = layernorm(z, blk.ln3_g, blk.ln3_b);
    Tensor hmid = gelu(add_row(matmul(m, blk.mlp_w1), blk.mlp_b1));
    Tensor mo = add_row(matmul(hmid, blk.mlp_w2), blk.mlp_b2);
    z = add(z, mo);
  }

  Tensor zf = layernorm(z, model.lnf_g, model.lnf_b);
  Tensor eps_tokens = add_row(matmul(zf, model.unembed_w), model.unembed_b);
  res.eps = unpatchify(eps_tokens, cfg.image_size, cfg.image_size, 3,
                       cfg.patch_size);
  return res;
}

LayerActivations encode_reference(const DenoiserModel& model, const Image& ref,
                                  int class_id) {
  // clean image, t pinned to 0, no blending inside the reference stream
  Tensor x0 = image_to_model_space(ref);
  ForwardResult res = forward(model, x0, 0, class_id, nullptr);
  return res.acts.detached();
}

}  // namespace blendiff
