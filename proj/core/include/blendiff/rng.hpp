#pragma once

#include <cmath>
#include <cstdint>

namespace blendiff {

// Counter-based PRNG: draw i on stream s is a pure function of
// (seed, s, i), so any draw sequence can be replayed bit-exactly and
// independent streams never interact. The output function is the
// splitmix64 finalizer applied to base + i*gamma.
class Rng {
 public:
  // seed hashed before the stream folds in, so (seed, stream) pairs with
  // coincidentally equal values land on unrelated bases
  Rng(uint64_t seed, uint64_t stream)
      : base_(finalize(finalize(seed + kStreamTag) + stream)) {}

  uint64_t next_u64() {
    have_spare_ = false;  // normal() cache is part of the call sequence
    return at(counter_++);
  }

  // Random access without advancing state.
  uint64_t at(uint64_t i) const { return finalize(base_ + kGamma * i); }

  // Uniform in [0,1).
  float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // Uniform in (0,1]; never zero, safe under log().
  double uniform_open() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; second value of each pair is cached.
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform_open();
    double u2 = uniform_open();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    have_spare_ = true;
    return static_cast<float>(r * std::cos(a));
  }

  // Unbiased integer in [0,n) by rejection.
  uint32_t below(uint32_t n) {
    uint64_t limit = (~uint64_t{0} / n) * n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return static_cast<uint32_t>(v % n);
  }

  // Derived independent stream; deterministic in (this stream, substream).
  Rng split(uint64_t substream) const { return Rng(base_, substream); }

  uint64_t counter() const { return counter_; }

 private:
  static constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ull;
  static constexpr uint64_t kStreamTag = 0x8e2c6d3a74b15f09ull;

  static uint64_t finalize(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t base_;
  uint64_t counter_ = 0;
  bool have_spare_ = false;
  float spare_ = 0.f;
};

// Fixed stream ids so independent consumers never share a sequence.
namespace streams {
constexpr uint64_t kDataGen = 1;
constexpr uint64_t kWeightInit = 2;
constexpr uint64_t kAdapterInit = 3;
constexpr uint64_t kTrainNoise = 4;
constexpr uint64_t kValNoise = 5;
constexpr uint64_t kShuffle = 6;
constexpr uint64_t kClassDrop = 7;
constexpr uint64_t kSampleInit = 8;
constexpr uint64_t kSampleStep = 9;
constexpr uint64_t kEncoder = 10;
constexpr uint64_t kSwatch = 11;
constexpr uint64_t kReference = 12;
constexpr uint64_t kEvalSeed = 13;
}  // namespace streams

}  // namespace blendiff
