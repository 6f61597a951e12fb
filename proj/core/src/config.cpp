#include "blendiff/config.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "blendiff/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace blendiff {

namespace {

json palette_to_json(const std::vector<Rgb>& palette) {
  json arr = json::array();
  for (const auto& c : palette) arr.push_back({c[0], c[1], c[2]});
  return arr;
}

std::vector<Rgb> palette_from_json(const json& arr) {
  std::vector<Rgb> out;
  for (const auto& c : arr) out.push_back({c.at(0), c.at(1), c.at(2)});
  return out;
}

json hyper_to_json(const TrainHyper& h) {
  return {{"epochs", h.epochs},
          {"batch_size", h.batch_size},
          {"seed", h.seed},
          {"class_drop", h.class_drop},
          {"val_draws", h.val_draws},
          {"lr", h.opt.lr},
          {"beta1", h.opt.beta1},
          {"beta2", h.opt.beta2},
          {"weight_decay", h.opt.weight_decay},
          {"grad_clip", h.opt.grad_clip}};
}

void hyper_from_json(const json& j, TrainHyper& h) {
  h.epochs = j.value("epochs", h.epochs);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.seed = j.value("seed", h.seed);
  h.class_drop = j.value("class_drop", h.class_drop);
  h.val_draws = j.value("val_draws", h.val_draws);
  h.opt.lr = j.value("lr", h.opt.lr);
  h.opt.beta1 = j.value("beta1", h.opt.beta1);
  h.opt.beta2 = j.value("beta2", h.opt.beta2);
  h.opt.weight_decay = j.value("weight_decay", h.opt.weight_decay);
  h.opt.grad_clip = j.value("grad_clip", h.opt.grad_clip);
}

json config_to_json(const RunConfig& c) {
  json j;
  j["dataset"] = {{"image_size", c.dataset.image_size},
                  {"shape_classes", c.dataset.shape_classes},
                  {"texture_families", c.dataset.texture_families},
                  {"palette", palette_to_json(c.dataset.palette)},
                  {"samples_per_cell", c.dataset.samples_per_cell},
                  {"seed", c.dataset.seed},
                  {"holdout_textures", c.dataset.holdout_textures}};
  j["model"] = {{"image_size", c.model.image_size},
                {"patch_size", c.model.patch_size},
                {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"n_blocks", c.model.n_blocks},
                {"n_classes", c.model.n_classes},
                {"t_max", c.model.t_max},
                {"mlp_ratio", c.model.mlp_ratio}};
  j["schedule"] = {{"T", c.schedule.T},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}};
  j["train_base"] = hyper_to_json(c.train_base);
  j["train_adapter"] = hyper_to_json(c.train_adapter);
  j["blend"] = {{"alpha", c.blend.alpha},
                {"inv_temp", c.blend.inv_temp},
                {"mode", c.blend.mode}};
  j["sample"] = {{"steps", c.sample.steps},
                 {"sampler", c.sample.sampler},
                 {"guidance_scale", c.sample.guidance_scale},
                 {"guidance_blend_both", c.sample.guidance_blend_both}};
  j["eval"] = {{"seeds_per_cell", c.eval.seeds_per_cell},
               {"steps", c.eval.steps},
               {"guidance", c.eval.guidance},
               {"threads", c.eval.threads},
               {"seed", c.eval.seed},
               {"encoder_epochs", c.eval.encoder.epochs},
               {"encoder_lr", c.eval.encoder.lr},
               {"encoder_seed", c.eval.encoder.seed},
               {"swatches_per_family", c.eval.encoder.swatches_per_family},
               {"sweep_alphas", c.eval.sweep_alphas},
               {"sweep_prompts", c.eval.sweep_prompts},
               {"sweep_seeds", c.eval.sweep_seeds}};
  return j;
}

void config_from_json(const json& j, RunConfig& c) {
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    c.dataset.image_size = d.value("image_size", c.dataset.image_size);
    if (d.contains("shape_classes"))
      c.dataset.shape_classes = d["shape_classes"].get<std::vector<std::string>>();
    if (d.contains("texture_families"))
      c.dataset.texture_families =
          d["texture_families"].get<std::vector<std::string>>();
    if (d.contains("palette")) c.dataset.palette = palette_from_json(d["palette"]);
    c.dataset.samples_per_cell =
        d.value("samples_per_cell", c.dataset.samples_per_cell);
    c.dataset.seed = d.value("seed", c.dataset.seed);
    if (d.contains("holdout_textures"))
      c.dataset.holdout_textures = d["holdout_textures"].get<std::vector<int>>();
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    c.model.image_size = m.value("image_size", c.model.image_size);
    c.model.patch_size = m.value("patch_size", c.model.patch_size);
    c.model.d_model = m.value("d_model", c.model.d_model);
    c.model.n_heads = m.value("n_heads", c.model.n_heads);
    c.model.n_blocks = m.value("n_blocks", c.model.n_blocks);
    c.model.n_classes = m.value("n_classes", c.model.n_classes);
    c.model.t_max = m.value("t_max", c.model.t_max);
    c.model.mlp_ratio = m.value("mlp_ratio", c.model.mlp_ratio);
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    c.schedule.T = s.value("T", c.schedule.T);
    c.schedule.beta_start = s.value("beta_start", c.schedule.beta_start);
    c.schedule.beta_end = s.value("beta_end", c.schedule.beta_end);
  }
  if (j.contains("train_base")) hyper_from_json(j["train_base"], c.train_base);
  if (j.contains("train_adapter"))
    hyper_from_json(j["train_adapter"], c.train_adapter);
  if (j.contains("blend")) {
    const auto& b = j["blend"];
    c.blend.alpha = b.value("alpha", c.blend.alpha);
    c.blend.inv_temp = b.value("inv_temp", c.blend.inv_temp);
    c.blend.mode = b.value("mode", c.blend.mode);
  }
  if (j.contains("sample")) {
    const auto& s = j["sample"];
    c.sample.steps = s.value("steps", c.sample.steps);
    c.sample.sampler = s.value("sampler", c.sample.sampler);
    c.sample.guidance_scale = s.value("guidance_scale", c.sample.guidance_scale);
    c.sample.guidance_blend_both =
        s.value("guidance_blend_both", c.sample.guidance_blend_both);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    c.eval.seeds_per_cell = e.value("seeds_per_cell", c.eval.seeds_per_cell);
    c.eval.steps = e.value("steps", c.eval.steps);
    c.eval.guidance = e.value("guidance", c.eval.guidance);
    c.eval.threads = e.value("threads", c.eval.threads);
    c.eval.seed = e.value("seed", c.eval.seed);
    c.eval.encoder.epochs = e.value("encoder_epochs", c.eval.encoder.epochs);
    c.eval.encoder.lr = e.value("encoder_lr", c.eval.encoder.lr);
    c.eval.encoder.seed = e.value("encoder_seed", c.eval.encoder.seed);
    c.eval.encoder.swatches_per_family =
        e.value("swatches_per_family", c.eval.encoder.swatches_per_family);
    if (e.contains("sweep_alphas"))
      c.eval.sweep_alphas = e["sweep_alphas"].get<std::vector<float>>();
    c.eval.sweep_prompts = e.value("sweep_prompts", c.eval.sweep_prompts);
    c.eval.sweep_seeds = e.value("sweep_seeds", c.eval.sweep_seeds);
  }
}

// Applies one dotted override like "train_base.epochs=10" onto the json tree.
void apply_override(json& j, const std::string& kv) {
  const size_t eq = kv.find('=');
  if (eq == std::string::npos)
    throw usage_error("override must be key=value: " + kv);
  const std::string key = kv.substr(0, eq);
  const std::string value = kv.substr(eq + 1);

  json* node = &j;
  size_t pos = 0;
  while (true) {
    const size_t dot = key.find('.', pos);
    const std::string part =
        key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw usage_error("bad override key: " + key);
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::parse_error&) {
        parsed = value;  // bare string
      }
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.train_base.epochs = 30;
  c.train_base.opt.lr = 2e-4f;
  c.train_adapter.epochs = 5;
  c.train_adapter.opt.lr = 1e-5f;
  c.train_adapter.class_drop = 0.f;
  return c;
}

RunConfig RunConfig::load(const std::string& path_or_empty,
                          const std::vector<std::string>& overrides) {
  RunConfig c = defaults();
  json j = config_to_json(c);
  if (!path_or_empty.empty()) {
    std::ifstream in(path_or_empty);
    if (!in) throw config_error("config: cannot open " + path_or_empty);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw config_error("config: parse error in " + path_or_empty + ": " +
                         e.what());
    }
    j.merge_patch(file);
    c.source_path = path_or_empty;
  }
  for (const auto& kv : overrides) apply_override(j, kv);
  config_from_json(j, c);
  c.overrides = overrides;

  // keep model geometry in lockstep with dataset and schedule
  c.model.image_size = c.dataset.image_size;
  c.model.n_classes = c.dataset.n_shapes();
  c.model.t_max = c.schedule.T;
  return c;
}

RunConfig RunConfig::from_json_string(const std::string& text,
                                      const std::vector<std::string>& overrides) {
  RunConfig c = defaults();
  json j = config_to_json(c);
  j.merge_patch(json::parse(text));
  for (const auto& kv : overrides) apply_override(j, kv);
  config_from_json(j, c);
  c.overrides = overrides;
  c.model.image_size = c.dataset.image_size;
  c.model.n_classes = c.dataset.n_shapes();
  c.model.t_max = c.schedule.T;
  return c;
}

std::string RunConfig::to_json_string() const {
  return config_to_json(*this).dump(2);
}

void RunConfig::write_snapshot(
    const std::string& out_dir,
    const std::vector<std::pair<std::string, std::string>>& input_hashes) const {
  fs::create_directories(out_dir);
  json j;
  j["config"] = config_to_json(*this);
  j["provenance"] = {{"config_path", source_path}, {"overrides", overrides}};
  json hashes = json::object();
  for (const auto& [k, v] : input_hashes) hashes[k] = v;
  j["input_hashes"] = hashes;
  std::ofstream out((fs::path(out_dir) / "resolved_config.json").string());
  out << j.dump(2) << "\n";
}

}  // namespace blendiff
