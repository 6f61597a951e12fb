#include "blendiff/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "blendiff/errors.hpp"

namespace blendiff {

Image Image::filled(int h, int w, float r, float g, float b) {
  Image img;
  img.h = h;
  img.w = w;
  img.rgb.resize(static_cast<size_t>(h) * w * 3);
  for (size_t i = 0; i < img.rgb.size(); i += 3) {
    img.rgb[i] = r;
    img.rgb[i + 1] = g;
    img.rgb[i + 2] = b;
  }
  return img;
}

Tensor Image::to_tensor() const {
  return Tensor::from_vec({h, w, 3}, rgb);
}

Image Image::from_tensor(const Tensor& t) {
  if (t.ndim() != 3 || t.dim(2) != 3)
    throw contract_error("Image::from_tensor: expected H x W x 3, got " +
                         shape_str(t.shape()));
  Image img;
  img.h = t.dim(0);
  img.w = t.dim(1);
  img.rgb.assign(t.data().begin(), t.data().end());
  return img;
}

namespace {
struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
}  // namespace

void write_png(const std::string& path, const Image& img) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw config_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw numeric_error("write_png: libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw numeric_error("write_png: libpng error on " + path);
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row(static_cast<size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w * 3; ++x) {
      float v = img.rgb[static_cast<size_t>(y) * img.w * 3 + x];
      row[x] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw config_error("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw numeric_error("read_png: libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw numeric_error("read_png: libpng error on " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  Image img;
  img.w = static_cast<int>(png_get_image_width(png, info));
  img.h = static_cast<int>(png_get_image_height(png, info));
  img.rgb.resize(static_cast<size_t>(img.h) * img.w * 3);

  std::vector<uint8_t> row(png_get_rowbytes(png, info));
  for (int y = 0; y < img.h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < img.w * 3; ++x)
      img.rgb[static_cast<size_t>(y) * img.w * 3 + x] = row[x] / 255.f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Image contact_sheet(const std::vector<Image>& imgs, int rows, int cols, int pad) {
  if (imgs.empty()) throw contract_error("contact_sheet: no images");
  const int h = imgs[0].h, w = imgs[0].w;
  Image sheet = Image::filled(rows * (h + pad) + pad, cols * (w + pad) + pad,
                              1.f, 1.f, 1.f);
  for (size_t i = 0; i < imgs.size() && i < static_cast<size_t>(rows) * cols; ++i) {
    const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
    const Image& im = imgs[i];
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) {
        float* dst = sheet.px(pad + r * (h + pad) + y, pad + c * (w + pad) + x);
        const float* src = im.px(y, x);
        dst[0] = src[0];
        dst[1] = src[1];
        dst[2] = src[2];
      }
  }
  return sheet;
}

Image heatmap(const std::vector<float>& values, int rows, int cols, int cell) {
  if (static_cast<int>(values.size()) != rows * cols)
    throw contract_error("heatmap: " + std::to_string(values.size()) +
                         " values for " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " grid");
  Image img = Image::filled(rows * cell, cols * cell, 0.f, 0.f, 0.f);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      float v = std::clamp(values[static_cast<size_t>(r) * cols + c], 0.f, 1.f);
      // blue (0) -> yellow (0.5) -> red (1)
      float red = std::clamp(2.f * v, 0.f, 1.f);
      float green = v < 0.5f ? 2.f * v : 2.f * (1.f - v);
      float blue = std::clamp(1.f - 2.f * v, 0.f, 1.f);
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) {
          float* px = img.px(r * cell + y, c * cell + x);
          px[0] = red;
          px[1] = green;
          px[2] = blue;
        }
    }
  return img;
}

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("hash_file: cannot open " + path);
  std::vector<char> buf(65536);
  uint64_t h = 0xcbf29ce484222325ull;
  while (in) {
    in.read(buf.data(), buf.size());
    h = fnv1a64(buf.data(), static_cast<size_t>(in.gcount()), h);
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace blendiff
