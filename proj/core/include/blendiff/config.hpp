#pragma once

#include <string>
#include <vector>

#include "blendiff/datagen.hpp"
#include "blendiff/diffusion.hpp"
#include "blendiff/eval.hpp"
#include "blendiff/model.hpp"
#include "blendiff/train.hpp"

namespace blendiff {

struct ScheduleConfig {
  int T = 400;
  float beta_start = 1e-4f;
  float beta_end = 2e-2f;
  NoiseSchedule build() const {
    return NoiseSchedule::linear(T, beta_start, beta_end);
  }
};

struct SampleDefaults {
  int steps = 24;
  std::string sampler = "ddim";
  float guidance_scale = 1.f;
  bool guidance_blend_both = true;
};

struct BlendDefaults {
  float alpha = 0.6f;
  float inv_temp = 1.f;
  std::string mode = "ba";
};

struct EvalConfig {
  int seeds_per_cell = 4;
  int steps = 24;
  float guidance = 2.0f;
  int threads = 0;
  uint64_t seed = 0;
  EncoderTrainConfig encoder;
  std::vector<float> sweep_alphas = {0.f, 0.25f, 0.5f, 0.6f, 0.75f, 1.f};
  // sweep subsets (full grid everywhere else)
  int sweep_prompts = 3;
  int sweep_seeds = 2;
};

// Fully resolved run configuration: built-in defaults, overlaid by a JSON
// config file, overlaid by CLI overrides, in that order. A serialized copy
// lands in every output directory.
struct RunConfig {
  DatasetSpec dataset;
  ModelConfig model;
  ScheduleConfig schedule;
  TrainHyper train_base;
  TrainHyper train_adapter;
  BlendDefaults blend;
  SampleDefaults sample;
  EvalConfig eval;

  std::string source_path;                 // config file, if any
  std::vector<std::string> overrides;      // applied key=value pairs

  static RunConfig defaults();
  static RunConfig load(const std::string& path_or_empty,
                        const std::vector<std::string>& overrides);
  // Rebuild from a serialized snapshot (e.g. a checkpoint's config copy).
  static RunConfig from_json_string(const std::string& text,
                                    const std::vector<std::string>& overrides = {});

  std::string to_json_string() const;
  // resolved snapshot + provenance + input hashes
  void write_snapshot(const std::string& out_dir,
                      const std::vector<std::pair<std::string, std::string>>&
                          input_hashes) const;
};

}  // namespace blendiff
