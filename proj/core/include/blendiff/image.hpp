#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blendiff/tensor.hpp"

namespace blendiff {

// RGB image, row-major, values in [0,1].
struct Image {
  int h = 0;
  int w = 0;
  std::vector<float> rgb;  // h*w*3

  static Image filled(int h, int w, float r, float g, float b);
  float* px(int y, int x) { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
  const float* px(int y, int x) const {
    return rgb.data() + (static_cast<size_t>(y) * w + x) * 3;
  }

  // {h, w, 3} tensor in [0,1] (leaf, no grad).
  Tensor to_tensor() const;
  static Image from_tensor(const Tensor& t);
};

// 8-bit PNG round trip; values quantized to round(v*255).
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Tile images into rows x cols grid with a separator border.
Image contact_sheet(const std::vector<Image>& imgs, int rows, int cols,
                    int pad = 2);

// Map values in [0,1] to a blue -> yellow -> red heat color ramp; cells
// rendered at `cell` pixels each.
Image heatmap(const std::vector<float>& values, int rows, int cols, int cell = 8);

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t hash_file(const std::string& path);
std::string hex64(uint64_t v);

}  // namespace blendiff
