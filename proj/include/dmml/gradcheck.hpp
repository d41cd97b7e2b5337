#pragma once

// Central finite differences against reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dmml/tensor.hpp"

namespace dmml {

// Denominator floor for the relative error, so that entries whose true
// gradient is ~0 are judged on absolute error instead.
inline constexpr double kGradcheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
}

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// `f` rebuilds the scalar graph from the current values of `inputs` (leaves
// that require grad). Every input entry is perturbed.
inline GradcheckResult gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps = 1e-5) {
  for (auto& t : inputs) {
    t.mutable_grad();
    t.zero_grad();
  }
  backward(f());
  GradcheckResult r;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto v = t.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + eps;
      const double up = f().item();
      v[i] = saved - eps;
      const double down = f().item();
      v[i] = saved;
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], (up - down) / (2.0 * eps)));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace dmml
