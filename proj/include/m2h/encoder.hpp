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

#include <vector>

#include "m2h/config.hpp"
#include "m2h/nn.hpp"
#include "m2h/tensor.hpp"

namespace m2h {

// Spatial tokens: N = grid_h * grid_w rows of width emb_d.
template <class T>
struct TokenSetT {
  TensorT<T> tokens;  // [B, N, emb_d]
  int grid_h = 0;
  int grid_w = 0;
};

// Trainable patchify + learned positional embedding. No class token; every
// token is spatial.
template <class T>
struct PatchEmbedT {
  LinearT<T> proj;
  TensorT<T> pos;  // [N, emb_d]
  int patch = 16;
  int grid_h = 0, grid_w = 0;
  int emb_d = 0;

  void init(Rng& rng, const ModelConfig& cfg);
  TokenSetT<T> forward(const TensorT<T>& image) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

// Pre-norm transformer block: x + MHSA(LN(x)), then x + FFN(LN(x)).
template <class T>
struct MevitBlockT {
  LayerNormT<T> ln1, ln2;
  MhaT<T> attn;
  FfnT<T> ffn;

  void init(Rng& rng, const ModelConfig& cfg);
  TensorT<T> forward(const TensorT<T>& tokens, AttnCapture<T>* capture = nullptr) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

template <class T>
struct MultiScaleTokens {
  std::vector<TokenSetT<T>> taps;  // K entries, inputs to MSTR
  TokenSetT<T> final;              // last block output, source of the U_t projections
};

template <class T>
struct EncoderT {
  PatchEmbedT<T> patch;
  std::vector<MevitBlockT<T>> blocks;
  std::vector<int> taps;

  void init(Rng& rng, const ModelConfig& cfg);
  MultiScaleTokens<T> encode_multiscale(const TensorT<T>& image,
                                        AttnCapture<T>* capture = nullptr) const;
  void collect(const std::string& prefix, ParamMap<T>& map) const;
};

}  // namespace m2h
