#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "blendiff/image.hpp"
#include "blendiff/rng.hpp"

namespace blendiff {

using Rgb = std::array<float, 3>;

// Shape classes play the role of the text condition, texture families the
// role of the visual condition; the two label axes are independent by
// construction.
enum ShapeClass { kCircle = 0, kSquare, kTriangle, kStar, kCross, kBar };
enum TextureFamily { kStripes = 0, kDots, kChecker, kRings, kGradient, kNoise };

extern const std::vector<std::string> kShapeNames;
extern const std::vector<std::string> kTextureNames;
extern const std::vector<Rgb> kDefaultPalette;
constexpr Rgb kBackground{0.08f, 0.08f, 0.10f};

struct TextureParams {
  int frequency = 3;       // periods / cells across the anchor box
  float phase = 0.f;       // in [0,1)
  Rgb color_a{1, 1, 1};
  Rgb color_b{0, 0, 0};
  int axis = 0;            // gradient direction: 0 = x, 1 = y
  uint64_t lattice_seed = 0;  // value-noise lattice
};

TextureParams sample_texture_params(int texture_id, const std::vector<Rgb>& palette,
                                    Rng& rng);

// Texture color at anchor-box coordinates (u,v) in [0,1]^2.
Rgb texture_color(int texture_id, const TextureParams& p, float u, float v);

struct DatasetSpec {
  int image_size = 32;
  std::vector<std::string> shape_classes = kShapeNames;
  std::vector<std::string> texture_families = kTextureNames;
  std::vector<Rgb> palette = kDefaultPalette;
  int samples_per_cell = 64;
  uint64_t seed = 0;
  std::vector<int> holdout_textures = {kRings};

  int n_shapes() const { return static_cast<int>(shape_classes.size()); }
  int n_textures() const { return static_cast<int>(texture_families.size()); }
  bool is_holdout(int texture_id) const;
  void validate() const;
};

struct Sample {
  Image image;
  int shape_id = 0;
  int texture_id = 0;
  TextureParams params;
};

enum class RefKind { kSwatch, kShaped, kSplitHalf };
const char* ref_kind_name(RefKind k);
RefKind ref_kind_from_name(const std::string& name);

struct ReferenceImage {
  Image image;
  int texture_id = 0;
  RefKind kind = RefKind::kSwatch;
  // split-half only: right-half texture
  std::optional<int> texture_id_b;
  std::optional<TextureParams> params_b;
  TextureParams params;
};

// Coverage mask (anti-aliased, 1px boundary) and anchor box of a shape.
struct ShapeGeometry {
  float bx0, by0, bx1, by1;  // anchor box in pixels
};
ShapeGeometry shape_geometry(int shape_id, int size);
float shape_coverage(int shape_id, int size, float x, float y);

Sample render_sample(int shape_id, int texture_id, const TextureParams& params,
                     const DatasetSpec& spec);
ReferenceImage render_reference(int texture_id, RefKind kind,
                                const TextureParams& params, const DatasetSpec& spec);
ReferenceImage render_split_reference(int texture_a, const TextureParams& pa,
                                      int texture_b, const TextureParams& pb,
                                      const DatasetSpec& spec);

struct ManifestRow {
  std::string path;
  int shape_id;
  int texture_id;
  std::string split;  // train | val | test
};

struct BuildResult {
  std::vector<ManifestRow> rows;
  std::vector<std::string> manifest_paths;
};

// Renders the full grid to out_dir/images/, writes train/val/test CSV
// manifests plus a reference set under out_dir/references/.
BuildResult build_dataset(const DatasetSpec& spec, const std::string& out_dir);

std::vector<ManifestRow> read_manifest(const std::string& csv_path);

}  // namespace blendiff
