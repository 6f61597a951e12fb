#include "blendiff/gradcheck.hpp"

#include <cmath>

#include "blendiff/errors.hpp"

namespace blendiff {

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           Tensor x, float h) {
  x.set_requires_grad(true);
  x.zero_grad();

  Tensor y = f(x);
  if (y.size() != 1)
    throw contract_error("grad_check: f must be scalar-valued, got shape " +
                         shape_str(y.shape()));
  y.backward();
  std::vector<float> analytic(x.grad().begin(), x.grad().end());

  GradCheckResult res;
  auto data = x.data_mut();
  for (int64_t i = 0; i < x.size(); ++i) {
    const float saved = data[i];
    data[i] = saved + h;
    const float fp = f(x).item();
    data[i] = saved - h;
    const float fm = f(x).item();
    data[i] = saved;

    const float numeric = (fp - fm) / (2.f * h);
    // relative above unit scale, absolute below: f32 forward evaluations
    // carry ~ulp(f)/2h of difference noise, which a pure ratio would
    // amplify on small-gradient coordinates
    const float denom = std::max(std::abs(analytic[i]) + std::abs(numeric), 1.f);
    const float rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace blendiff
