// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dpf/rng.hpp"
#include "dpf/tensor.hpp"

namespace dpf::test {

inline Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

// abs(a-b) relative to magnitude, with an absolute fallback so near-zero
// pairs do not blow up the ratio.
inline double rel_err(double a, double b, double abs_floor = 1e-9) {
  double diff = std::fabs(a - b);
  double mag = std::max(std::fabs(a), std::fabs(b));
  if (mag < abs_floor) return 0.0;
  return diff / mag;
}

struct FdResult {
  double max_rel = 0.0;
  int checked = 0;
  std::string worst;
};

// Central-difference check of analytic gradients. `eval` must recompute the
// scalar objective from the parameters' current tensor values. `analytic`
// holds the gradient captured from one backward pass before perturbation.
inline FdResult fd_check(const std::function<double()>& eval,
                         std::vector<std::pair<Tensor*, const Tensor*>> params, Rng& rng,
                         int samples_per_param = 8, double h = 1e-5,
                         double abs_floor = 1e-9) {
  FdResult res;
  for (auto& [value, analytic] : params) {
    int64_t n = value->numel();
    int count = static_cast<int>(std::min<int64_t>(samples_per_param, n));
    for (int s = 0; s < count; ++s) {
      int64_t idx = n <= samples_per_param ? s : rng.uniform_int(n);
      double orig = value->data()[idx];
      double step = h * std::max(1.0, std::fabs(orig));
      value->data()[idx] = orig + step;
      double fp = eval();
      value->data()[idx] = orig - step;
      double fm = eval();
      value->data()[idx] = orig;
      double fd = (fp - fm) / (2.0 * step);
      double an = analytic->data()[idx];
      double e = std::fabs(fd - an) <= abs_floor ? 0.0 : rel_err(fd, an, abs_floor);
      if (e > res.max_rel) {
        res.max_rel = e;
        res.worst = "idx=" + std::to_string(idx) + " fd=" + std::to_string(fd) +
                    " analytic=" + std::to_string(an);
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace dpf::test
