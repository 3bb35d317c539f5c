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

#include <array>
#include <string>

#include "m2h/config.hpp"
#include "m2h/encoder.hpp"
#include "m2h/nn.hpp"

namespace m2h {

// Fixed task order relied on by the WMCA concatenation.
enum Task : int { kTaskEdges = 0, kTaskNormals = 1, kTaskSemantics = 2, kTaskDepth = 3 };
inline const char* task_name(int t) {
  static const char* names[4] = {"edges", "normals", "semantics", "depth"};
  return names[t];
}

// K = 4 maps at H/4, H/8, H/16, H/32, C channels each.
template <class T>
struct FeaturePyramidT {
  std::array<TensorT<T>, 4> maps;
};

template <class T>
struct TaskBundleT {
  std::array<TensorT<T>, 4> maps;  // e, n, s, d
  TensorT<T>& operator[](int t) { return maps[static_cast<size_t>(t)]; }
  const TensorT<T>& operator[](int t) const { return maps[static_cast<size_t>(t)]; }
};

// [B, N, emb] tokens back onto their [B, emb, gh, gw] grid.
template <class T>
TensorT<T> tokens_to_grid(const TokenSetT<T>& tokens);

// Multi-scale token reassembly: per scale, 1x1-project tokens to C channels on
// the grid, then resample to the pyramid scale (x4 and x2 transposed convs for
// the two finest levels, identity at the grid scale, strided 3x3 below it).
// Shared across tasks.
template <class T>
struct MstrT {
  std::array<Conv2dT<T>, 4> proj;
  ConvTranspose2dT<T> up4;
  ConvTranspose2dT<T> up2;
  Conv2dT<T> down2;

  void init(Rng& rng, const ModelConfig& cfg);
  FeaturePyramidT<T> forward(const std::vector<TokenSetT<T>>& taps) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

// Per-task multi-scale fusion: refine each level with a 3x3 conv, then fuse
// coarsest-to-finest with bilinear x2 upsampling and addition.
template <class T>
struct MsfT {
  std::array<Conv2dT<T>, 4> refine;

  void init(Rng& rng, const ModelConfig& cfg);
  TensorT<T> forward(const FeaturePyramidT<T>& pyramid) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

// Final-layer tokens -> shared reassembly to H'xW' at C channels, then a
// per-task 1x1 projection producing the unique features U_t.
template <class T>
struct UniqueProjT {
  Conv2dT<T> proj;
  ConvTranspose2dT<T> up4;
  std::array<Conv2dT<T>, 4> task_proj;

  void init(Rng& rng, const ModelConfig& cfg);
  TensorT<T> shared_map(const TokenSetT<T>& final_tokens) const;
  TensorT<T> forward_task(const TensorT<T>& shared, int task) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

}  // namespace m2h
