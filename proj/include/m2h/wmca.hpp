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
#include <vector>

#include "m2h/config.hpp"
#include "m2h/nn.hpp"
#include "m2h/reassembly.hpp"

namespace m2h {

// Non-overlapping p x p windows of a B x C x H x W map, flattened to tokens.
// M = ceil(H/p) * ceil(W/p); the map is zero-padded bottom/right when H or W
// is not a multiple of p, and the padding is recorded for exact inversion.
template <class T>
struct WindowedTokensT {
  TensorT<T> tokens;  // [(B*M), p*p, C]
  int batch = 0;
  int win_rows = 0, win_cols = 0;  // window grid; M = win_rows * win_cols
  int pad_h = 0, pad_w = 0;
  int orig_h = 0, orig_w = 0;

  int window_count() const { return win_rows * win_cols; }
};

template <class T>
WindowedTokensT<T> window_partition(const TensorT<T>& x, int p);

// Exact inverse of window_partition on the unpadded region.
template <class T>
TensorT<T> window_unpartition(const WindowedTokensT<T>& w, int p, int out_h, int out_w);

// One windowed cross-task attention layer: per-task LayerNorm on window
// tokens, concatenation over the four tasks, multi-head attention and FFN
// with residuals, then the inverse split/reshape.
template <class T>
struct WmcaLayerT {
  std::array<LayerNormT<T>, 4> task_ln;
  MhaT<T> attn;
  FfnT<T> ffn;
  int window = 7;
  bool mask_padding = false;

  void init(Rng& rng, const ModelConfig& cfg);
  TaskBundleT<T> forward(const TaskBundleT<T>& bundle, AttnCapture<T>* capture = nullptr) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

template <class T>
struct WmcaT {
  std::vector<WmcaLayerT<T>> layers;

  void init(Rng& rng, const ModelConfig& cfg);
  TaskBundleT<T> forward(const TaskBundleT<T>& bundle, AttnCapture<T>* capture = nullptr) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

// Reference implementation of one layer as unwindowed global cross-task
// attention over the full maps, sharing the layer's parameters. Equals the
// windowed path when p == H == W; used as the small-instance oracle and as
// the bench baseline.
template <class T>
TaskBundleT<T> global_cross_task_forward(const WmcaLayerT<T>& layer, const TaskBundleT<T>& bundle,
                                         AttnCapture<T>* capture = nullptr);

// Instrumented multiply-add measurement of a forward pass over random task
// maps of the given size.
struct AttentionCost {
  int feat_h = 0, feat_w = 0;
  int window = 0;
  int window_count = 0;   // M (1 for the global baseline)
  uint64_t attention_macs = 0;  // QK^T and A*V terms only
  uint64_t total_macs = 0;
  double wall_ms = 0.0;
};

AttentionCost measure_attention_cost(const ModelConfig& cfg, int feat_h, int feat_w,
                                     bool global_attention);

}  // namespace m2h
