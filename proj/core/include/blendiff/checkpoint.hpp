#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blendiff/tensor.hpp"

namespace blendiff {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

// Container format: "ITBL" magic, u32 format version, u64 header length,
// JSON header (phase, free-form meta, tensor table), then the named f32
// buffers little-endian in header order. save(load(x)) is byte-identical.
struct Checkpoint {
  uint32_t version = 1;
  std::string phase;      // base | adapter | encoders
  std::string meta_json;  // config snapshot, rng state, hashes
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  uint64_t content_hash() const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::vector<NamedTensor> snapshot_tensors(
    const std::vector<std::pair<std::string, Tensor>>& named);
// Copies checkpoint data into existing tensors; names and shapes must match.
void restore_tensors(const Checkpoint& ckpt,
                     const std::vector<std::pair<std::string, Tensor>>& named);

}  // namespace blendiff
