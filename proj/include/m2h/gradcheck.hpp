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

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "m2h/tensor.hpp"

namespace m2h {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_location;
  bool pass = false;
  bool finite = true;
  int64_t coords_checked = 0;
};

struct GradCheckOptions {
  double h0 = 1e-5;    // step is h0 * max(1, |x|)
  double tol = 1e-4;
  int max_coords_per_tensor = 0;  // 0 checks every coordinate
  uint64_t sample_seed = 7;
  double corrupt_scale = 1.0;  // test hook: scales analytic grads before comparing
};

// Compares analytic gradients of a scalar-valued function against central
// finite differences. rel_err = |a - n| / max(|a|, |n|, 1e-8).
template <class T>
GradCheckReport grad_check(
    const std::function<TensorT<T>(std::vector<TensorT<T>>&)>& f,
    std::vector<TensorT<T>> inputs, const GradCheckOptions& opts = {});

}  // namespace m2h
