// Command-line front end: dataset generation, two-phase training, sampling,
// evaluation, alpha sweeps and attention-mask visualization.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "blendiff/blend.hpp"
#include "blendiff/checkpoint.hpp"
#include "blendiff/config.hpp"
#include "blendiff/datagen.hpp"
#include "blendiff/diffusion.hpp"
#include "blendiff/errors.hpp"
#include "blendiff/eval.hpp"
#include "blendiff/image.hpp"
#include "blendiff/model.hpp"
#include "blendiff/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace blendiff;

namespace {

void emit_error(int code, const std::string& kind, const std::string& message) {
  json j;
  j["error"] = {{"code", code}, {"kind", kind}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

std::string ckpt_path(const std::string& out, const std::string& stem) {
  if (out.size() > 5 && out.substr(out.size() - 5) == ".ckpt") {
    fs::create_directories(fs::path(out).parent_path().empty()
                               ? "."
                               : fs::path(out).parent_path().string());
    return out;
  }
  fs::create_directories(out);
  return (fs::path(out) / (stem + ".ckpt")).string();
}

struct LoadedBase {
  RunConfig cfg;
  DenoiserModel model;
  NoiseSchedule sched;
  uint64_t hash = 0;
  std::string path;
};

LoadedBase load_base(const std::string& path,
                     const std::vector<std::string>& overrides = {}) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.phase != "base")
    throw config_error("checkpoint " + path + " holds phase '" + ckpt.phase +
                       "', expected base");
  json meta = json::parse(ckpt.meta_json);
  LoadedBase lb{RunConfig::from_json_string(meta.at("config").dump(), overrides),
                {}, {}, 0, path};
  lb.model = DenoiserModel::init(lb.cfg.model, 0);
  restore_tensors(ckpt, lb.model.named_parameters());
  lb.model.freeze();
  lb.sched = lb.cfg.schedule.build();
  lb.hash = lb.model.content_hash();
  return lb;
}

AdapterWeights load_adapter(const std::string& path, const ModelConfig& cfg,
                            uint64_t expect_base_hash) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.phase != "adapter")
    throw config_error("checkpoint " + path + " holds phase '" + ckpt.phase +
                       "', expected adapter");
  json meta = json::parse(ckpt.meta_json);
  if (meta.contains("base_hash") &&
      meta.at("base_hash").get<std::string>() != hex64(expect_base_hash))
    throw contract_error("adapter checkpoint " + path +
                         " was trained against a different base (hash " +
                         meta.at("base_hash").get<std::string>() + " vs " +
                         hex64(expect_base_hash) + ")");
  AdapterWeights adapter = AdapterWeights::init(cfg, 0);
  restore_tensors(ckpt, adapter.named_parameters());
  return adapter;
}

EvalGridConfig grid_from_file(const std::string& path, const RunConfig& cfg) {
  EvalGridConfig grid = default_eval_grid(cfg.dataset);
  grid.seeds_per_cell = cfg.eval.seeds_per_cell;
  grid.steps = cfg.eval.steps;
  grid.guidance = cfg.eval.guidance;
  grid.alpha = cfg.blend.alpha;
  grid.inv_temp = cfg.blend.inv_temp;
  grid.seed = cfg.eval.seed;
  grid.threads = cfg.eval.threads;
  if (path.empty()) return grid;

  std::ifstream in(path);
  if (!in) throw config_error("grid: cannot open " + path);
  json j = json::parse(in);
  if (j.contains("prompts")) grid.prompts = j["prompts"].get<std::vector<int>>();
  if (j.contains("references")) {
    grid.references.clear();
    for (const auto& r : j["references"]) {
      RefSpec rs;
      rs.kind = ref_kind_from_name(r.at("kind").get<std::string>());
      rs.texture_id = r.at("texture_id").get<int>();
      if (r.contains("texture_id_b") && !r["texture_id_b"].is_null())
        rs.texture_id_b = r["texture_id_b"].get<int>();
      rs.param_seed = r.value("param_seed", 0);
      grid.references.push_back(rs);
    }
  }
  grid.seeds_per_cell = j.value("seeds_per_cell", grid.seeds_per_cell);
  grid.steps = j.value("steps", grid.steps);
  grid.guidance = j.value("guidance", grid.guidance);
  grid.alpha = j.value("alpha", grid.alpha);
  grid.inv_temp = j.value("inv_temp", grid.inv_temp);
  grid.seed = j.value("seed", grid.seed);
  grid.threads = j.value("threads", grid.threads);
  return grid;
}

SurrogateEncoders obtain_encoders(const std::string& encoders_path,
                                  const RunConfig& cfg, const Dataset& data,
                                  const std::string& out_dir) {
  if (!encoders_path.empty() && fs::exists(encoders_path))
    return load_encoders(encoders_path, cfg.dataset.image_size,
                         cfg.dataset.n_shapes(), cfg.dataset.n_textures());
  SurrogateEncoders enc{train_shape_encoder(data, cfg.eval.encoder),
                        train_texture_encoder(cfg.dataset, cfg.eval.encoder)};
  const std::string save_to = encoders_path.empty()
                                  ? (fs::path(out_dir) / "encoders.ckpt").string()
                                  : encoders_path;
  save_encoders(save_to, enc);
  return enc;
}

std::vector<BlendMode> parse_modes(const std::string& csv) {
  std::vector<BlendMode> out;
  size_t pos = 0;
  while (pos <= csv.size()) {
    size_t c = csv.find(',', pos);
    std::string tok = csv.substr(pos, c == std::string::npos ? std::string::npos
                                                             : c - pos);
    if (!tok.empty()) out.push_back(blend_mode_from_name(tok));
    if (c == std::string::npos) break;
    pos = c + 1;
  }
  return out;
}

// ---- subcommands -----------------------------------------------------------

int cmd_gen_data(const std::string& config, std::vector<std::string> overrides,
                 const std::string& out) {
  RunConfig cfg = RunConfig::load(config, overrides);
  cfg.write_snapshot(out, {});
  BuildResult res = build_dataset(cfg.dataset, out);
  std::cerr << "wrote " << res.rows.size() << " images under " << out << "\n";
  return 0;
}

int cmd_train_base(const std::string& config, std::vector<std::string> overrides,
                   const std::string& data_dir, const std::string& out,
                   const std::string& resume) {
  RunConfig cfg = RunConfig::load(config, overrides);
  const std::string out_file = ckpt_path(out, "base");
  const std::string out_dir = fs::path(out_file).parent_path().string();
  cfg.write_snapshot(out_dir, {});

  Dataset data = Dataset::load(data_dir);
  NoiseSchedule sched = cfg.schedule.build();
  DenoiserModel model = DenoiserModel::init(cfg.model, cfg.train_base.seed);
  AdamW opt(model.named_parameters(), cfg.train_base.opt);
  int start_epoch = 0;
  if (!resume.empty()) {
    Checkpoint ckpt = load_checkpoint(resume);
    restore_tensors(ckpt, model.named_parameters());
    opt.restore_state(ckpt);
    start_epoch = json::parse(ckpt.meta_json).at("rng").at("next_epoch").get<int>();
  }

  TrainResult res = train_base(
      model, data, sched, cfg.train_base, opt, start_epoch,
      [](int epoch, float tr, float vl) {
        std::cerr << "epoch " << epoch << " train " << tr << " val " << vl << "\n";
      });

  Checkpoint ckpt;
  ckpt.phase = "base";
  json meta;
  meta["config"] = json::parse(cfg.to_json_string());
  meta["rng"] = {{"seed", cfg.train_base.seed}, {"next_epoch", cfg.train_base.epochs}};
  meta["final_val_loss"] = res.final_val_loss;
  ckpt.meta_json = meta.dump();
  ckpt.tensors = snapshot_tensors(model.named_parameters());
  for (auto& t : opt.state_tensors()) ckpt.tensors.push_back(std::move(t));
  save_checkpoint(out_file, ckpt);
  write_curves_csv((fs::path(out_dir) / "curves.csv").string(), res.curve);
  std::cerr << "base checkpoint: " << out_file << " (hash "
            << hex64(model.content_hash()) << ")\n";
  return 0;
}

int cmd_train_adapter(const std::string& config,
                      std::vector<std::string> overrides,
                      const std::string& base_path, const std::string& data_dir,
                      const std::string& out, const std::string& resume) {
  LoadedBase base = load_base(base_path, overrides);
  if (!config.empty()) {
    // explicit config overrides the snapshot stored in the checkpoint,
    // model geometry stays pinned to the checkpoint
    RunConfig file_cfg = RunConfig::load(config, overrides);
    file_cfg.model = base.cfg.model;
    file_cfg.dataset = base.cfg.dataset;
    file_cfg.schedule = base.cfg.schedule;
    base.cfg = file_cfg;
  }
  const std::string out_file = ckpt_path(out, "adapter");
  const std::string out_dir = fs::path(out_file).parent_path().string();
  base.cfg.write_snapshot(out_dir, {{"base", hex64(base.hash)}});

  Dataset data = Dataset::load(data_dir);
  AdapterWeights adapter =
      AdapterWeights::init(base.cfg.model, base.cfg.train_adapter.seed);
  AdamW opt(adapter.named_parameters(), base.cfg.train_adapter.opt);
  int start_epoch = 0;
  if (!resume.empty()) {
    Checkpoint ckpt = load_checkpoint(resume);
    restore_tensors(ckpt, adapter.named_parameters());
    opt.restore_state(ckpt);
    start_epoch = json::parse(ckpt.meta_json).at("rng").at("next_epoch").get<int>();
  }

  TrainResult res = train_adapter(
      base.model, adapter, data, base.sched, base.cfg.train_adapter, opt,
      start_epoch, [](int epoch, float tr, float vl) {
        std::cerr << "epoch " << epoch << " train " << tr << " val " << vl << "\n";
      });
  if (base.model.content_hash() != base.hash)
    throw contract_error("train-adapter: base hash changed during training");

  Checkpoint ckpt;
  ckpt.phase = "adapter";
  json meta;
  meta["config"] = json::parse(base.cfg.to_json_string());
  meta["rng"] = {{"seed", base.cfg.train_adapter.seed},
                 {"next_epoch", base.cfg.train_adapter.epochs}};
  meta["base_hash"] = hex64(base.hash);
  meta["final_val_loss"] = res.final_val_loss;
  ckpt.meta_json = meta.dump();
  ckpt.tensors = snapshot_tensors(adapter.named_parameters());
  for (auto& t : opt.state_tensors()) ckpt.tensors.push_back(std::move(t));
  save_checkpoint(out_file, ckpt);
  write_curves_csv((fs::path(out_dir) / "adapter_curves.csv").string(), res.curve);
  std::cerr << "adapter checkpoint: " << out_file << "\n";
  return 0;
}

int cmd_sample(const std::string& base_path, const std::string& adapter_path,
               int class_id, const std::vector<std::string>& ref_args,
               float alpha, float inv_temp, const std::string& mode_name,
               uint64_t seed, const std::string& out, bool capture_masks,
               int steps, const std::string& sampler, float guidance,
               std::vector<std::string> overrides) {
  LoadedBase base = load_base(base_path, overrides);
  fs::create_directories(out);

  SampleRequest req;
  req.class_id = class_id;
  req.blend.mode = blend_mode_from_name(mode_name);
  req.blend.alpha = alpha >= 0.f ? alpha : base.cfg.blend.alpha;
  req.blend.inv_temp = inv_temp > 0.f ? inv_temp : base.cfg.blend.inv_temp;
  req.blend.capture_masks = capture_masks;
  req.seed = seed;
  req.steps = steps > 0 ? steps : base.cfg.sample.steps;
  req.guidance_scale = guidance >= 1.f ? guidance : base.cfg.sample.guidance_scale;
  req.sampler = (sampler.empty() ? base.cfg.sample.sampler : sampler) == "ddpm"
                    ? SamplerKind::kDdpm
                    : SamplerKind::kDdim;
  req.guidance_blend_both = base.cfg.sample.guidance_blend_both;

  std::vector<Image> refs;
  for (const auto& arg : ref_args) {
    size_t pos = 0;
    while (pos <= arg.size()) {
      size_t c = arg.find(',', pos);
      std::string tok =
          arg.substr(pos, c == std::string::npos ? std::string::npos : c - pos);
      if (!tok.empty()) refs.push_back(read_png(tok));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
  }

  AdapterWeights adapter;
  const AdapterWeights* adapter_ptr = nullptr;
  std::vector<std::pair<std::string, std::string>> hashes = {
      {"base", hex64(base.hash)}};
  if (!adapter_path.empty()) {
    adapter = load_adapter(adapter_path, base.cfg.model, base.hash);
    adapter_ptr = &adapter;
    hashes.emplace_back("adapter", hex64(adapter.content_hash()));
  }
  base.cfg.write_snapshot(out, hashes);

  SampleResult res = sample(base.model, adapter_ptr, req, base.sched, refs);
  write_png((fs::path(out) / "sample.png").string(), res.image);
  if (res.masks) save_masks(*res.masks, (fs::path(out) / "masks").string());
  std::cerr << "sample written to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& base_path, const std::string& adapter_path,
             const std::string& grid_path, const std::string& data_dir,
             const std::string& out, const std::string& encoders_path,
             const std::string& modes_csv, std::vector<std::string> overrides) {
  LoadedBase base = load_base(base_path, overrides);
  AdapterWeights adapter = load_adapter(adapter_path, base.cfg.model, base.hash);
  fs::create_directories(out);
  base.cfg.write_snapshot(out, {{"base", hex64(base.hash)},
                                {"adapter", hex64(adapter.content_hash())}});

  Dataset data = Dataset::load(data_dir);
  SurrogateEncoders enc = obtain_encoders(encoders_path, base.cfg, data, out);
  EvalGridConfig grid = grid_from_file(grid_path, base.cfg);
  EvalReport report =
      run_eval(base.model, &adapter, base.sched, grid, enc, base.cfg.dataset,
               parse_modes(modes_csv), out);
  for (const auto& m : report.modes)
    std::cerr << m.mode << ": textual " << m.textual_mean << " visual "
              << m.visual_mean << " class_acc " << m.class_acc_mean << "\n";
  return 0;
}

int cmd_sweep_alpha(const std::string& alphas_csv, const std::string& base_path,
                    const std::string& adapter_path, const std::string& data_dir,
                    const std::string& grid_path, const std::string& out,
                    const std::string& encoders_path,
                    std::vector<std::string> overrides) {
  LoadedBase base = load_base(base_path, overrides);
  AdapterWeights adapter = load_adapter(adapter_path, base.cfg.model, base.hash);
  fs::create_directories(out);
  base.cfg.write_snapshot(out, {{"base", hex64(base.hash)},
                                {"adapter", hex64(adapter.content_hash())}});

  std::vector<float> alphas;
  size_t pos = 0;
  while (pos <= alphas_csv.size()) {
    size_t c = alphas_csv.find(',', pos);
    std::string tok = alphas_csv.substr(
        pos, c == std::string::npos ? std::string::npos : c - pos);
    if (!tok.empty()) alphas.push_back(std::stof(tok));
    if (c == std::string::npos) break;
    pos = c + 1;
  }

  Dataset data = Dataset::load(data_dir);
  SurrogateEncoders enc = obtain_encoders(encoders_path, base.cfg, data, out);
  EvalGridConfig grid = grid_from_file(grid_path, base.cfg);
  // sweeps run on a reduced grid: swatch references, fewer prompts/seeds
  std::vector<RefSpec> swatches;
  for (const auto& r : grid.references)
    if (r.kind == RefKind::kSwatch) swatches.push_back(r);
  if (!swatches.empty()) grid.references = swatches;
  if (base.cfg.eval.sweep_prompts > 0 &&
      base.cfg.eval.sweep_prompts < static_cast<int>(grid.prompts.size()))
    grid.prompts.resize(base.cfg.eval.sweep_prompts);
  grid.seeds_per_cell = std::min(grid.seeds_per_cell, base.cfg.eval.sweep_seeds);

  auto refs = realize_references(grid, base.cfg.dataset);
  AlphaSweepResult res = alpha_sweep(base.model, &adapter, base.sched, grid,
                                     refs, enc.texture, alphas, out);
  std::cerr << "alpha sweep spearman rho = " << res.spearman << "\n";
  return 0;
}

int cmd_mask_viz(const std::string& masks_dir, const std::string& out) {
  MaskCapture cap = load_masks(masks_dir);
  if (cap.masks.empty()) throw config_error("mask-viz: no masks in " + masks_dir);
  fs::create_directories(out);

  // per (block, head): mean attention mass per key as a heatmap tile row
  auto render = [&](const AttentionMask& m, const std::string& name) {
    const int keys = m.keys;
    std::vector<float> key_mass(keys, 0.f);
    for (int q = 0; q < m.queries; ++q)
      for (int k = 0; k < keys; ++k)
        key_mass[k] += m.weights[static_cast<size_t>(q) * keys + k];
    float mx = 0.f;
    for (auto& v : key_mass) {
      v /= static_cast<float>(m.queries);
      mx = std::max(mx, v);
    }
    if (mx > 0.f)
      for (auto& v : key_mass) v /= mx;
    // lay the key axis out per reference segment, each segment a square grid
    const int nseg = std::max<size_t>(cap.segments.size(), 1);
    const int seg_keys = keys / nseg;
    const int side = static_cast<int>(std::lround(std::sqrt(seg_keys)));
    std::vector<Image> tiles;
    for (int s = 0; s < nseg; ++s) {
      std::vector<float> seg(key_mass.begin() + s * seg_keys,
                             key_mass.begin() + (s + 1) * seg_keys);
      tiles.push_back(heatmap(seg, side, side, 8));
    }
    write_png((fs::path(out) / (name + ".png")).string(),
              contact_sheet(tiles, 1, nseg, 4));
  };

  for (const auto& m : cap.masks) {
    if (m.weights.empty()) continue;
    render(m, "mask_b" + std::to_string(m.block) + "_h" + std::to_string(m.head));
  }
  // aggregate across blocks and heads
  AttentionMask agg;
  for (const auto& m : cap.masks) {
    if (m.weights.empty()) continue;
    if (agg.weights.empty()) {
      agg = m;
    } else {
      for (size_t i = 0; i < agg.weights.size(); ++i)
        agg.weights[i] += m.weights[i];
    }
  }
  render(agg, "mask_aggregate");
  std::cerr << "heatmaps written to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blendiff: reference-blended class-conditional diffusion"};
  app.require_subcommand(1);

  std::string config, data_dir, out, base_path, adapter_path, resume;
  std::string grid_path, encoders_path, masks_dir;
  std::string mode_name = "off", sampler, modes_csv = "ba,naive-imca";
  std::string alphas_csv = "0,0.25,0.5,0.6,0.75,1.0";
  std::vector<std::string> overrides, ref_args;
  int class_id = 0, steps = 0;
  float alpha = -1.f, inv_temp = -1.f, guidance = 0.f;
  uint64_t seed = 0;
  bool capture_masks = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--set", overrides,
                    "config override key=value (repeatable)");
  };

  auto* gen = app.add_subcommand("gen-data", "render the dataset + manifests");
  gen->add_option("--config", config, "config JSON");
  gen->add_option("--out", out, "output directory")->required();
  add_common(gen);

  auto* tb = app.add_subcommand("train-base", "phase 1: train the denoiser");
  tb->add_option("--config", config, "config JSON");
  tb->add_option("--data", data_dir, "gen-data output directory")->required();
  tb->add_option("--out", out, "checkpoint path or directory")->required();
  tb->add_option("--resume", resume, "resume from checkpoint");
  add_common(tb);

  auto* ta = app.add_subcommand("train-adapter",
                                "phase 2: train the blending adapter");
  ta->add_option("--config", config, "config JSON (optional; defaults to base)");
  ta->add_option("--base", base_path, "frozen base checkpoint")->required();
  ta->add_option("--data", data_dir, "gen-data output directory")->required();
  ta->add_option("--out", out, "checkpoint path or directory")->required();
  ta->add_option("--resume", resume, "resume from checkpoint");
  add_common(ta);

  auto* sm = app.add_subcommand("sample", "generate one image");
  sm->add_option("--base", base_path, "base checkpoint")->required();
  sm->add_option("--adapter", adapter_path, "adapter checkpoint");
  sm->add_option("--class", class_id, "class id")->required();
  sm->add_option("--ref", ref_args, "reference PNG path(s), comma-splittable");
  sm->add_option("--alpha", alpha, "blend strength");
  sm->add_option("--inv-temp", inv_temp, "softmax sharpening");
  sm->add_option("--mode", mode_name, "ba | naive-imca | off");
  sm->add_option("--seed", seed, "sampling seed");
  sm->add_option("--steps", steps, "sampler steps");
  sm->add_option("--sampler", sampler, "ddpm | ddim");
  sm->add_option("--guidance", guidance, "guidance scale (>= 1)");
  sm->add_option("--out", out, "output directory")->required();
  sm->add_flag("--capture-masks", capture_masks, "dump attention masks");
  add_common(sm);

  auto* ev = app.add_subcommand("eval", "metric protocol over a prompt x "
                                        "reference grid");
  ev->add_option("--base", base_path, "base checkpoint")->required();
  ev->add_option("--adapter", adapter_path, "adapter checkpoint")->required();
  ev->add_option("--grid", grid_path, "grid JSON (defaults from config)");
  ev->add_option("--data", data_dir, "gen-data output directory")->required();
  ev->add_option("--encoders", encoders_path, "surrogate encoder checkpoint");
  ev->add_option("--modes", modes_csv, "comma list of blend modes");
  ev->add_option("--out", out, "output directory")->required();
  add_common(ev);

  auto* sw = app.add_subcommand("sweep-alpha", "blend-strength sweep");
  sw->add_option("--alphas", alphas_csv, "comma list, ascending, include 0");
  sw->add_option("--base", base_path, "base checkpoint")->required();
  sw->add_option("--adapter", adapter_path, "adapter checkpoint")->required();
  sw->add_option("--data", data_dir, "gen-data output directory")->required();
  sw->add_option("--grid", grid_path, "grid JSON");
  sw->add_option("--encoders", encoders_path, "surrogate encoder checkpoint");
  sw->add_option("--out", out, "output directory")->required();
  add_common(sw);

  auto* mv = app.add_subcommand("mask-viz", "attention-mask heatmaps");
  mv->add_option("--masks", masks_dir, "directory with masks.json/.bin")
      ->required();
  mv->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error(1, "usage", e.what());
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config, overrides, out);
    if (tb->parsed())
      return cmd_train_base(config, overrides, data_dir, out, resume);
    if (ta->parsed())
      return cmd_train_adapter(config, overrides, base_path, data_dir, out,
                               resume);
    if (sm->parsed())
      return cmd_sample(base_path, adapter_path, class_id, ref_args, alpha,
                        inv_temp, mode_name, seed, out, capture_masks, steps,
                        sampler, guidance, overrides);
    if (ev->parsed())
      return cmd_eval(base_path, adapter_path, grid_path, data_dir, out,
                      encoders_path, modes_csv, overrides);
    if (sw->parsed())
      return cmd_sweep_alpha(alphas_csv, base_path, adapter_path, data_dir,
                             grid_path, out, encoders_path, overrides);
    if (mv->parsed()) return cmd_mask_viz(masks_dir, out);
    emit_error(1, "usage", "no subcommand");
    return 1;
  } catch (const usage_error& e) {
    emit_error(1, "usage", e.what());
    return 1;
  } catch (const config_error& e) {
    emit_error(2, "config", e.what());
    return 2;
  } catch (const contract_error& e) {
    emit_error(3, "invariant", e.what());
    return 3;
  } catch (const numeric_error& e) {
    emit_error(4, "numeric", e.what());
    return 4;
  } catch (const std::exception& e) {
    emit_error(4, "numeric", e.what());
    return 4;
  }
}
