// Copyright 2026 The M2H Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "m2h/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace m2h {

template <class T>
GradCheckReport grad_check(const std::function<TensorT<T>(std::vector<TensorT<T>>&)>& f,
                           std::vector<TensorT<T>> inputs, const GradCheckOptions& opts) {
  GradCheckReport report;
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }

  TensorT<T> y = f(inputs);
  if (y.numel() != 1) raise<UsageError>("grad_check: f must be scalar-valued");
  if (!all_finite(y)) {
    report.finite = false;
    report.worst_location = "forward output";
    return report;
  }
  backward(y);

  std::vector<std::vector<T>> analytic;
  analytic.reserve(inputs.size());
  for (auto& x : inputs) {
    x.grad();  // ensure allocated even if untouched
    analytic.push_back(x.grad());
  }

  Rng rng(opts.sample_seed);
  NoGradGuard no_grad;
  for (size_t t = 0; t < inputs.size(); ++t) {
    auto& xdata = inputs[t].data();
    const int64_t n = static_cast<int64_t>(xdata.size());
    std::vector<int64_t> coords;
    if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
      // deterministic sample without replacement
      std::vector<int64_t> all(n);
      for (int64_t i = 0; i < n; ++i) all[i] = i;
      for (int k = 0; k < opts.max_coords_per_tensor; ++k) {
        const int64_t j = k + static_cast<int64_t>(rng.uniform_int(n - k));
        std::swap(all[k], all[j]);
        coords.push_back(all[k]);
      }
    } else {
      coords.resize(n);
      for (int64_t i = 0; i < n; ++i) coords[i] = i;
    }
    for (int64_t c : coords) {
      const T orig = xdata[c];
      const double h = opts.h0 * std::max(1.0, std::abs(static_cast<double>(orig)));
      xdata[c] = static_cast<T>(static_cast<double>(orig) + h);
      const TensorT<T> yp = f(inputs);
      xdata[c] = static_cast<T>(static_cast<double>(orig) - h);
      const TensorT<T> ym = f(inputs);
      xdata[c] = orig;
      if (!all_finite(yp) || !all_finite(ym)) {
        report.finite = false;
        report.pass = false;
        report.worst_location = "input " + std::to_string(t) + " @ " + std::to_string(c) +
                                " (non-finite during finite differences)";
        return report;
      }
      const double numeric =
          (static_cast<double>(yp.item()) - static_cast<double>(ym.item())) / (2.0 * h);
      const double a = static_cast<double>(analytic[t][c]) * opts.corrupt_scale;
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_location = "input " + std::to_string(t) + " @ " + std::to_string(c);
      }
    }
  }
  report.pass = report.finite && report.max_rel_err <= opts.tol;
  return report;
}

template GradCheckReport grad_check<float>(
    const std::function<TensorT<float>(std::vector<TensorT<float>>&)>&,
    std::vector<TensorT<float>>, const GradCheckOptions&);
template GradCheckReport grad_check<double>(
    const std::function<TensorT<double>(std::vector<TensorT<double>>&)>&,
    std::vector<TensorT<double>>, const GradCheckOptions&);

}  // namespace m2h
