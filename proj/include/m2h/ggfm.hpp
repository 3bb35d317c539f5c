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

#include "m2h/config.hpp"
#include "m2h/encoder.hpp"
#include "m2h/nn.hpp"
#include "m2h/reassembly.hpp"
#include "m2h/wmca.hpp"

namespace m2h {

// Squeeze-and-excitation style channel gating with a residual: the gated map
// is F + g (x) F, i.e. channel c is scaled by (1 + g_c).
template <class T>
struct GgfmT {
  LinearT<T> w1;  // C -> C/r, no bias
  LinearT<T> w2;  // C/r -> C, bias

  void init(Rng& rng, const ModelConfig& cfg);
  TensorT<T> compute_gate(const TensorT<T>& f) const;  // sigmoid MLP of GAP(F), [B, C]
  static TensorT<T> apply_gate(const TensorT<T>& f, const TensorT<T>& gate);
  TensorT<T> forward(const TensorT<T>& f) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

// Elementwise fusion of the gated map with the unique backbone features U_t.
template <class T>
TensorT<T> ggfm_fuse_unique(const TensorT<T>& f_global, const TensorT<T>& unique);

// Concatenate the local (WMCA) and global (GGFM) streams over channels and
// project back to C with a per-task 1x1 convolution.
template <class T>
struct StreamFuseT {
  Conv2dT<T> proj;  // 1x1, 2C -> C

  void init(Rng& rng, const ModelConfig& cfg);
  TensorT<T> forward(const TensorT<T>& local, const TensorT<T>& global) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

enum class HeadActivation { kLogits, kDepth, kNormals };

// Task decoder: 3x3 conv (C -> C/2) + GELU, bilinear x4 to full resolution,
// 1x1 conv to the task channels, then the task activation. Depth maps through
// a bounded softplus ratio max_depth * s / (1 + s) so it stays in
// (0, max_depth] without sigmoid-style gradient saturation; normals are
// L2-normalized per pixel.
template <class T>
struct HeadT {
  Conv2dT<T> conv1;
  Conv2dT<T> conv2;
  HeadActivation activation = HeadActivation::kLogits;
  double max_depth = 10.0;

  void init(Rng& rng, const ModelConfig& cfg, int out_channels, HeadActivation act);
  TensorT<T> forward(const TensorT<T>& fused) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

template <class T>
struct PredictionsT {
  TensorT<T> seg_logits;   // [B, num_classes, H, W]
  TensorT<T> depth;        // [B, 1, H, W], meters in (0, max_depth]
  TensorT<T> normals;      // [B, 3, H, W], unit vectors
  TensorT<T> edge_logits;  // [B, 1, H, W]
};

// Optional taps into the forward pass for tests and ablation probes.
template <class T>
struct ForwardDebugT {
  AttnCapture<T>* wmca_attention = nullptr;
  TaskBundleT<T>* preliminary = nullptr;  // F^t before the two streams
  TaskBundleT<T>* local_stream = nullptr;
  TaskBundleT<T>* global_stream = nullptr;
};

template <class T>
struct M2HModelT {
  ModelConfig cfg;
  EncoderT<T> encoder;
  MstrT<T> mstr;
  std::array<MsfT<T>, 4> msf;
  UniqueProjT<T> unique;
  WmcaT<T> wmca;
  std::array<GgfmT<T>, 4> ggfm;
  std::array<StreamFuseT<T>, 4> fuse;
  std::array<HeadT<T>, 4> heads;

  void init(Rng& rng, const ModelConfig& config);
  PredictionsT<T> forward(const TensorT<T>& image, const ForwardDebugT<T>* debug = nullptr) const;
  void collect(ParamMap<T>& map) const;
  std::vector<TensorT<T>> parameters() const;
};

}  // namespace m2h
