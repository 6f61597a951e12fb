#pragma once

#include <functional>

#include "blendiff/tensor.hpp"

namespace blendiff {

struct GradCheckResult {
  float max_rel_err = 0.f;
  int64_t worst_index = -1;
};

// Compares the reverse-mode gradient of a scalar-valued f at x against
// central differences (f(x+h) - f(x-h)) / 2h per coordinate. The error is
// |ga - gf| / max(|ga| + |gf|, 1): relative above unit scale, absolute
// below it. f must return a scalar tensor.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           Tensor x, float h = 1e-3f);

}  // namespace blendiff
