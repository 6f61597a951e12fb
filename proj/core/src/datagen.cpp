#include "blendiff/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "blendiff/errors.hpp"

namespace fs = std::filesystem;

namespace blendiff {

const std::vector<std::string> kShapeNames = {"circle", "square", "triangle",
                                              "star",   "cross",  "bar"};
const std::vector<std::string> kTextureNames = {"stripes",  "dots",
                                                "checker",  "rings",
                                                "gradient", "noise"};
const std::vector<Rgb> kDefaultPalette = {
    {0.90f, 0.20f, 0.20f}, {0.95f, 0.60f, 0.15f}, {0.95f, 0.90f, 0.20f},
    {0.20f, 0.80f, 0.30f}, {0.20f, 0.80f, 0.85f}, {0.25f, 0.40f, 0.90f},
    {0.60f, 0.30f, 0.85f}, {0.95f, 0.95f, 0.95f}};

bool DatasetSpec::is_holdout(int texture_id) const {
  return std::find(holdout_textures.begin(), holdout_textures.end(),
                   texture_id) != holdout_textures.end();
}

void DatasetSpec::validate() const {
  if (samples_per_cell < 1)
    throw config_error("datagen: samples_per_cell must be >= 1, got " +
                       std::to_string(samples_per_cell));
  if (image_size < 8 || image_size % 4 != 0)
    throw config_error("datagen: image_size must be a multiple of 4 and >= 8");
  if (palette.size() < 2) throw config_error("datagen: palette needs >= 2 colors");
  for (int t : holdout_textures)
    if (t < 0 || t >= n_textures())
      throw config_error("datagen: holdout texture id " + std::to_string(t) +
                         " out of range");
}

static float luminance(const Rgb& c) {
  return 0.299f * c[0] + 0.587f * c[1] + 0.114f * c[2];
}

TextureParams sample_texture_params(int texture_id, const std::vector<Rgb>& palette,
                                    Rng& rng) {
  TextureParams p;
  p.frequency = 2 + static_cast<int>(rng.below(3));  // 2..4
  p.phase = rng.uniform();
  int a = static_cast<int>(rng.below(static_cast<uint32_t>(palette.size())));
  int b = static_cast<int>(rng.below(static_cast<uint32_t>(palette.size())));
  while (b == a) b = static_cast<int>(rng.below(static_cast<uint32_t>(palette.size())));
  p.color_a = palette[a];
  p.color_b = palette[b];
  p.axis = static_cast<int>(rng.below(2));
  p.lattice_seed = rng.next_u64();
  if (texture_id == kGradient) {
    // monotone luminance needs distinct endpoint luminances
    while (std::abs(luminance(p.color_a) - luminance(p.color_b)) < 0.15f) {
      b = static_cast<int>(rng.below(static_cast<uint32_t>(palette.size())));
      if (b == a) continue;
      p.color_b = palette[b];
    }
  }
  return p;
}

static Rgb mix(const Rgb& a, const Rgb& b, float t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t,
          a[2] + (b[2] - a[2]) * t};
}

static float fract(float x) { return x - std::floor(x); }

static float value_noise(uint64_t seed, int f, float u, float v) {
  // smoothstep-interpolated lattice noise, f cells per axis
  auto lattice = [seed](int ix, int iy) {
    uint64_t h = seed ^ (0x9e3779b97f4a7c15ull * (ix * 73856093 + iy * 19349663 + 1));
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return static_cast<float>((h ^ (h >> 31)) >> 40) * 0x1.0p-24f;
  };
  float x = u * f, y = v * f;
  int ix = static_cast<int>(std::floor(x)), iy = static_cast<int>(std::floor(y));
  float fx = x - ix, fy = y - iy;
  float sx = fx * fx * (3.f - 2.f * fx);
  float sy = fy * fy * (3.f - 2.f * fy);
  float v00 = lattice(ix, iy), v10 = lattice(ix + 1, iy);
  float v01 = lattice(ix, iy + 1), v11 = lattice(ix + 1, iy + 1);
  float a = v00 + (v10 - v00) * sx;
  float b = v01 + (v11 - v01) * sx;
  return a + (b - a) * sy;
}

Rgb texture_color(int texture_id, const TextureParams& p, float u, float v) {
  switch (texture_id) {
    case kStripes: {
      bool bright = fract(p.frequency * u + p.phase) < 0.5f;
      return bright ? p.color_a : p.color_b;
    }
    case kDots: {
      float cu = fract(p.frequency * u + p.phase) - 0.5f;
      float cv = fract(p.frequency * v + p.phase) - 0.5f;
      float r = std::sqrt(cu * cu + cv * cv);
      return r < 0.30f ? p.color_a : p.color_b;
    }
    case kChecker: {
      int cx = static_cast<int>(std::floor(p.frequency * u + p.phase));
      int cy = static_cast<int>(std::floor(p.frequency * v + p.phase));
      return ((cx + cy) & 1) ? p.color_b : p.color_a;
    }
    case kRings: {
      float du = u - 0.5f, dv = v - 0.5f;
      float r = std::sqrt(du * du + dv * dv) * 2.f;  // 1 at box edge midpoint
      bool bright = fract(p.frequency * r + p.phase) < 0.5f;
      return bright ? p.color_a : p.color_b;
    }
    case kGradient: {
      float t = p.axis == 0 ? u : v;
      return mix(p.color_a, p.color_b, t);
    }
    case kNoise: {
      float n = value_noise(p.lattice_seed, std::max(2, p.frequency) * 2, u, v);
      return mix(p.color_a, p.color_b, n);
    }
    default:
      throw config_error("texture_color: unknown texture id " +
                         std::to_string(texture_id));
  }
}

// ---- shape signed distance fields (pixels; negative inside) ----------------

namespace {

float sdf_circle(float x, float y, float r) {
  return std::sqrt(x * x + y * y) - r;
}

float sdf_box(float x, float y, float hx, float hy) {
  float dx = std::abs(x) - hx, dy = std::abs(y) - hy;
  float ox = std::max(dx, 0.f), oy = std::max(dy, 0.f);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(dx, dy), 0.f);
}

float sdf_polygon(float x, float y, const float* vx, const float* vy, int n) {
  float best = 1e9f;
  int crossings = 0;
  for (int i = 0; i < n; ++i) {
    int j = (i + 1) % n;
    float ex = vx[j] - vx[i], ey = vy[j] - vy[i];
    float px = x - vx[i], py = y - vy[i];
    float t = std::clamp((px * ex + py * ey) / (ex * ex + ey * ey), 0.f, 1.f);
    float dx = px - ex * t, dy = py - ey * t;
    best = std::min(best, std::sqrt(dx * dx + dy * dy));
    if ((vy[i] > y) != (vy[j] > y)) {
      float xint = vx[i] + (y - vy[i]) / (vy[j] - vy[i]) * (vx[j] - vx[i]);
      if (x < xint) ++crossings;
    }
  }
  return (crossings & 1) ? -best : best;
}

float sdf_triangle(float x, float y, float half_w, float half_h) {
  // isoceles triangle, apex up (y grows downward in image space)
  const float vx[3] = {0.f, half_w, -half_w};
  const float vy[3] = {-half_h, half_h, half_h};
  return sdf_polygon(x, y, vx, vy, 3);
}

float sdf_star5(float x, float y, float r_outer, float r_inner) {
  constexpr int kPoints = 5;
  float vx[2 * kPoints], vy[2 * kPoints];
  for (int i = 0; i < 2 * kPoints; ++i) {
    float ang = -1.5707963f + 3.14159265f * i / kPoints;
    float r = (i % 2 == 0) ? r_outer : r_inner;
    vx[i] = r * std::cos(ang);
    vy[i] = r * std::sin(ang);
  }
  return sdf_polygon(x, y, vx, vy, 2 * kPoints);
}

}  // namespace

ShapeGeometry shape_geometry(int shape_id, int size) {
  const float s = static_cast<float>(size);
  const float cx = s / 2.f, cy = s / 2.f;
  auto box = [&](float hx, float hy) {
    return ShapeGeometry{cx - hx, cy - hy, cx + hx, cy + hy};
  };
  switch (shape_id) {
    case kCircle:
      return box(0.35f * s, 0.35f * s);
    case kSquare:
      return box(0.30f * s, 0.30f * s);
    case kTriangle:
      return box(0.40f * s, 0.33f * s);
    case kStar:
      return box(0.42f * s, 0.42f * s);
    case kCross:
      return box(0.36f * s, 0.36f * s);
    case kBar:
      return box(0.38f * s, 0.14f * s);
    default:
      throw config_error("shape_geometry: unknown shape id " +
                         std::to_string(shape_id));
  }
}

float shape_coverage(int shape_id, int size, float x, float y) {
  const float s = static_cast<float>(size);
  const float px = x - s / 2.f, py = y - s / 2.f;
  float d;
  switch (shape_id) {
    case kCircle:
      d = sdf_circle(px, py, 0.35f * s);
      break;
    case kSquare:
      d = sdf_box(px, py, 0.30f * s, 0.30f * s);
      break;
    case kTriangle:
      d = sdf_triangle(px, py, 0.40f * s, 0.33f * s);
      break;
    case kStar:
      d = sdf_star5(px, py, 0.42f * s, 0.19f * s);
      break;
    case kCross:
      d = std::min(sdf_box(px, py, 0.36f * s, 0.11f * s),
                   sdf_box(px, py, 0.11f * s, 0.36f * s));
      break;
    case kBar:
      d = sdf_box(px, py, 0.38f * s, 0.14f * s);
      break;
    default:
      throw config_error("shape_coverage: unknown shape id " +
                         std::to_string(shape_id));
  }
  return std::clamp(0.5f - d, 0.f, 1.f);  // 1px anti-aliased boundary
}

Sample render_sample(int shape_id, int texture_id, const TextureParams& params,
                     const DatasetSpec& spec) {
  if (shape_id < 0 || shape_id >= spec.n_shapes())
    throw config_error("render_sample: unknown shape id " +
                       std::to_string(shape_id));
  if (texture_id < 0 || texture_id >= spec.n_textures())
    throw config_error("render_sample: unknown texture id " +
                       std::to_string(texture_id));
  const int n = spec.image_size;
  const ShapeGeometry g = shape_geometry(shape_id, n);
  Sample s;
  s.shape_id = shape_id;
  s.texture_id = texture_id;
  s.params = params;
  s.image = Image::filled(n, n, kBackground[0], kBackground[1], kBackground[2]);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      float cov = shape_coverage(shape_id, n, x + 0.5f, y + 0.5f);
      if (cov <= 0.f) continue;
      float u = (x + 0.5f - g.bx0) / (g.bx1 - g.bx0);
      float v = (y + 0.5f - g.by0) / (g.by1 - g.by0);
      Rgb c = texture_color(texture_id, params, u, v);
      float* px = s.image.px(y, x);
      px[0] = kBackground[0] + (c[0] - kBackground[0]) * cov;
      px[1] = kBackground[1] + (c[1] - kBackground[1]) * cov;
      px[2] = kBackground[2] + (c[2] - kBackground[2]) * cov;
    }
  return s;
}

ReferenceImage render_reference(int texture_id, RefKind kind,
                                const TextureParams& params,
                                const DatasetSpec& spec) {
  if (texture_id < 0 || texture_id >= spec.n_textures())
    throw config_error("render_reference: unknown texture id " +
                       std::to_string(texture_id));
  if (kind == RefKind::kSplitHalf)
    throw config_error("render_reference: split-half needs two textures; use "
                       "render_split_reference");
  const int n = spec.image_size;
  ReferenceImage r;
  r.texture_id = texture_id;
  r.kind = kind;
  r.params = params;
  r.image = Image::filled(n, n, kBackground[0], kBackground[1], kBackground[2]);
  if (kind == RefKind::kSwatch) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        Rgb c = texture_color(texture_id, params, (x + 0.5f) / n, (y + 0.5f) / n);
        float* px = r.image.px(y, x);
        px[0] = c[0];
        px[1] = c[1];
        px[2] = c[2];
      }
  } else {  // shaped: texture inside a circle mask
    const ShapeGeometry g = shape_geometry(kCircle, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        float cov = shape_coverage(kCircle, n, x + 0.5f, y + 0.5f);
        if (cov <= 0.f) continue;
        float u = (x + 0.5f - g.bx0) / (g.bx1 - g.bx0);
        float v = (y + 0.5f - g.by0) / (g.by1 - g.by0);
        Rgb c = texture_color(texture_id, params, u, v);
        float* px = r.image.px(y, x);
        px[0] = kBackground[0] + (c[0] - kBackground[0]) * cov;
        px[1] = kBackground[1] + (c[1] - kBackground[1]) * cov;
        px[2] = kBackground[2] + (c[2] - kBackground[2]) * cov;
      }
  }
  return r;
}

ReferenceImage render_split_reference(int texture_a, const TextureParams& pa,
                                      int texture_b, const TextureParams& pb,
                                      const DatasetSpec& spec) {
  const int n = spec.image_size;
  const int half = n / 2;
  ReferenceImage r;
  r.texture_id = texture_a;
  r.texture_id_b = texture_b;
  r.kind = RefKind::kSplitHalf;
  r.params = pa;
  r.params_b = pb;
  r.image = Image::filled(n, n, 0.f, 0.f, 0.f);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      // each half gets its own full [0,1] texture box
      Rgb c = x < half
                  ? texture_color(texture_a, pa, (x + 0.5f) / half, (y + 0.5f) / n)
                  : texture_color(texture_b, pb, (x - half + 0.5f) / half,
                                  (y + 0.5f) / n);
      float* px = r.image.px(y, x);
      px[0] = c[0];
      px[1] = c[1];
      px[2] = c[2];
    }
  return r;
}

const char* ref_kind_name(RefKind k) {
  switch (k) {
    case RefKind::kSwatch: return "swatch";
    case RefKind::kShaped: return "shaped";
    case RefKind::kSplitHalf: return "split-half";
  }
  return "?";
}

RefKind ref_kind_from_name(const std::string& name) {
  if (name == "swatch") return RefKind::kSwatch;
  if (name == "shaped") return RefKind::kShaped;
  if (name == "split-half") return RefKind::kSplitHalf;
  throw config_error("unknown reference kind: " + name);
}

// ---- dataset build ----------------------------------------------------------

BuildResult build_dataset(const DatasetSpec& spec, const std::string& out_dir) {
  spec.validate();
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "references");

  BuildResult result;
  Rng root(spec.seed, streams::kDataGen);

  for (int shape = 0; shape < spec.n_shapes(); ++shape) {
    for (int tex = 0; tex < spec.n_textures(); ++tex) {
      Rng cell_rng = root.split(shape * 1000 + tex);
      const bool holdout = spec.is_holdout(tex);
      for (int i = 0; i < spec.samples_per_cell; ++i) {
        TextureParams params =
            sample_texture_params(tex, spec.palette, cell_rng);
        Sample s = render_sample(shape, tex, params, spec);
        std::string rel = "images/s" + std::to_string(shape) + "_t" +
                          std::to_string(tex) + "_" + std::to_string(i) + ".png";
        write_png((fs::path(out_dir) / rel).string(), s.image);

        std::string split;
        if (holdout) {
          split = "test";
        } else {
          const int spc = spec.samples_per_cell;
          int train_n = std::max(1, (spc * 8) / 10);
          int val_n = spc / 10;
          // small cells still get one row per split
          if (spc >= 3) {
            if (val_n == 0) val_n = 1;
            if (spc - train_n - val_n < 1) train_n = spc - val_n - 1;
          }
          split = i < train_n ? "train" : (i < train_n + val_n ? "val" : "test");
        }
        result.rows.push_back({rel, shape, tex, split});
      }
    }
  }

  // reference set: one swatch per family, one shaped holdout, split-half pairs
  Rng ref_rng(spec.seed, streams::kReference);
  std::ofstream refs((fs::path(out_dir) / "references" / "refs.csv").string());
  refs << "path,texture_id,texture_id_b,kind\n";
  auto dump_ref = [&](const ReferenceImage& r, const std::string& name) {
    std::string rel = "references/" + name + ".png";
    write_png((fs::path(out_dir) / rel).string(), r.image);
    refs << rel << "," << r.texture_id << ","
         << (r.texture_id_b ? std::to_string(*r.texture_id_b) : "") << ","
         << ref_kind_name(r.kind) << "\n";
  };
  for (int tex = 0; tex < spec.n_textures(); ++tex) {
    TextureParams p = sample_texture_params(tex, spec.palette, ref_rng);
    dump_ref(render_reference(tex, RefKind::kSwatch, p, spec),
             "swatch_t" + std::to_string(tex));
  }
  if (!spec.holdout_textures.empty()) {
    TextureParams p =
        sample_texture_params(spec.holdout_textures[0], spec.palette, ref_rng);
    dump_ref(render_reference(spec.holdout_textures[0], RefKind::kShaped, p, spec),
             "shaped_holdout");
  }
  {
    TextureParams pa = sample_texture_params(kStripes, spec.palette, ref_rng);
    TextureParams pb = sample_texture_params(kDots, spec.palette, ref_rng);
    dump_ref(render_split_reference(kStripes, pa, kDots, pb, spec), "split_0_1");
    TextureParams pc = sample_texture_params(kChecker, spec.palette, ref_rng);
    TextureParams pd = sample_texture_params(kGradient, spec.palette, ref_rng);
    dump_ref(render_split_reference(kChecker, pc, kGradient, pd, spec), "split_2_4");
  }
  refs.close();

  // per-split manifests; rows keep the split column for single-file loads
  for (const std::string split : {"train", "val", "test"}) {
    std::string path = (fs::path(out_dir) / (split + ".csv")).string();
    std::ofstream out(path);
    out << "path,shape_id,texture_id,split\n";
    for (const auto& row : result.rows)
      if (row.split == split)
        out << row.path << "," << row.shape_id << "," << row.texture_id << ","
            << row.split << "\n";
    result.manifest_paths.push_back(path);
  }
  return result;
}

std::vector<ManifestRow> read_manifest(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw config_error("read_manifest: cannot open " + csv_path);
  std::vector<ManifestRow> rows;
  std::string line;
  std::getline(in, line);  // header
  if (line != "path,shape_id,texture_id,split")
    throw config_error("read_manifest: unexpected header in " + csv_path);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ManifestRow row;
    size_t p0 = line.find(','), p1 = line.find(',', p0 + 1),
           p2 = line.find(',', p1 + 1);
    if (p0 == std::string::npos || p1 == std::string::npos ||
        p2 == std::string::npos)
      throw config_error("read_manifest: malformed row: " + line);
    row.path = line.substr(0, p0);
    row.shape_id = std::stoi(line.substr(p0 + 1, p1 - p0 - 1));
    row.texture_id = std::stoi(line.substr(p1 + 1, p2 - p1 - 1));
    row.split = line.substr(p2 + 1);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace blendiff
