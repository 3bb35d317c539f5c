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

#include <string>
#include <vector>

#include "m2h/tensor.hpp"

namespace m2h {

template <class T>
struct ParamEntry {
  std::string name;
  TensorT<T> tensor;
};

template <class T>
using ParamMap = std::vector<ParamEntry<T>>;

template <class T>
void collect_param(ParamMap<T>& out, const std::string& name, const TensorT<T>& t) {
  if (t.defined()) out.push_back({name, t});
}

// Fully-connected layer. Weight is stored [in, out] so y = x W + b applies to
// the trailing feature axis of an arbitrary-rank input.
template <class T>
struct LinearT {
  TensorT<T> w;
  TensorT<T> b;
  int in = 0, out = 0;

  void init(Rng& rng, int in_dim, int out_dim, bool bias = true) {
    in = in_dim;
    out = out_dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    w = uniform_tensor<T>(rng, {in_dim, out_dim}, -bound, bound);
    w.set_requires_grad(true);
    if (bias) {
      b = TensorT<T>::zeros({out_dim});
      b.set_requires_grad(true);
    } else {
      b = TensorT<T>();
    }
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    TensorT<T> y;
    if (x.ndim() == 2) {
      y = matmul(x, w);
    } else {
      Shape s = x.shape();
      const int64_t rows = x.numel() / s.back();
      auto flat = reshape(x, {static_cast<int>(rows), s.back()});
      auto yy = matmul(flat, w);
      Shape out_shape = s;
      out_shape.back() = out;
      y = reshape(yy, out_shape);
    }
    if (b.defined()) y = add_bias_lastdim(y, b);
    return y;
  }

  void collect(const std::string& prefix, ParamMap<T>& map) const {
    collect_param(map, prefix + ".w", w);
    collect_param(map, prefix + ".b", b);
  }
};

template <class T>
struct Conv2dT {
  TensorT<T> w;  // [out, in/groups, kh, kw]
  TensorT<T> b;
  int stride = 1, pad = 0, groups = 1;

  void init(Rng& rng, int in_ch, int out_ch, int k, int stride_ = 1, int pad_ = 0,
            int groups_ = 1, bool bias = true) {
    stride = stride_;
    pad = pad_;
    groups = groups_;
    const int fan_in = (in_ch / groups_) * k * k;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    w = uniform_tensor<T>(rng, {out_ch, in_ch / groups_, k, k}, -bound, bound);
    w.set_requires_grad(true);
    if (bias) {
      b = TensorT<T>::zeros({out_ch});
      b.set_requires_grad(true);
    } else {
      b = TensorT<T>();
    }
  }

  TensorT<T> forward(const TensorT<T>& x) const { return conv2d(x, w, b, stride, pad, groups); }

  void collect(const std::string& prefix, ParamMap<T>& map) const {
    collect_param(map, prefix + ".w", w);
    collect_param(map, prefix + ".b", b);
  }
};

template <class T>
struct ConvTranspose2dT {
  TensorT<T> w;  // [in, out, k, k]
  TensorT<T> b;
  int stride = 1;

  void init(Rng& rng, int in_ch, int out_ch, int k, int stride_, bool bias = true) {
    stride = stride_;
    const int fan_in = in_ch * k * k;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    w = uniform_tensor<T>(rng, {in_ch, out_ch, k, k}, -bound, bound);
    w.set_requires_grad(true);
    if (bias) {
      b = TensorT<T>::zeros({out_ch});
      b.set_requires_grad(true);
    } else {
      b = TensorT<T>();
    }
  }

  TensorT<T> forward(const TensorT<T>& x) const { return conv_transpose2d(x, w, b, stride); }

  void collect(const std::string& prefix, ParamMap<T>& map) const {
    collect_param(map, prefix + ".w", w);
    collect_param(map, prefix + ".b", b);
  }
};

template <class T>
struct LayerNormT {
  TensorT<T> gamma;
  TensorT<T> beta;
  T eps = T(1e-5);

  void init(int dim, T eps_ = T(1e-5)) {
    eps = eps_;
    gamma = TensorT<T>::full({dim}, T(1));
    gamma.set_requires_grad(true);
    beta = TensorT<T>::zeros({dim});
    beta.set_requires_grad(true);
  }

  TensorT<T> forward(const TensorT<T>& x, int axis = -1) const {
    return layer_norm(x, gamma, beta, eps, axis);
  }

  void collect(const std::string& prefix, ParamMap<T>& map) const {
    collect_param(map, prefix + ".gamma", gamma);
    collect_param(map, prefix + ".beta", beta);
  }
};

// Captured attention probabilities (one entry per attention call), used by
// tests asserting that softmax rows sum to one.
template <class T>
struct AttnCapture {
  std::vector<TensorT<T>> probs;
};

// Multi-head attention over a [B, S, C] token tensor (queries, keys, and
// values all come from the same sequence). key_valid, when provided, marks
// padded key positions to exclude per batch row ([B * S] row-major).
template <class T>
struct MhaT {
  LinearT<T> wq, wk, wv, wo;
  int heads = 1;
  bool use_out_proj = true;

  void init(Rng& rng, int channels, int heads_, bool qkv_bias, bool out_proj) {
    M2H_CHECK_CFG(channels % heads_ == 0, "mha: channels ", channels,
                  " not divisible by heads ", heads_);
    heads = heads_;
    use_out_proj = out_proj;
    wq.init(rng, channels, channels, qkv_bias);
    wk.init(rng, channels, channels, qkv_bias);
    wv.init(rng, channels, channels, qkv_bias);
    if (out_proj) wo.init(rng, channels, channels, true);
  }

  TensorT<T> forward(const TensorT<T>& x, AttnCapture<T>* capture = nullptr,
                     const std::vector<uint8_t>* key_valid = nullptr,
                     MacKind score_kind = MacKind::kAttnScores,
                     MacKind apply_kind = MacKind::kAttnApply) const {
    const int B = x.dim(0), S = x.dim(1), C = x.dim(2);
    const int dh = C / heads;
    auto split_heads = [&](const TensorT<T>& t) {
      auto r = reshape(t, {B, S, heads, dh});
      auto p = permute(r, {0, 2, 1, 3});
      return reshape(p, {B * heads, S, dh});
    };
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto q = split_heads(scale(wq.forward(x), inv_sqrt_dh));
    auto k = split_heads(wk.forward(x));
    auto v = split_heads(wv.forward(x));
    auto scores = bmm(q, k, false, true, score_kind);  // [B*h, S, S]
    if (key_valid) {
      M2H_CHECK_DIM(static_cast<int64_t>(key_valid->size()) == static_cast<int64_t>(B) * S,
                    "mha: key_valid size mismatch");
      std::vector<T> maskbuf(static_cast<size_t>(B) * heads * S * S, T(0));
      for (int b = 0; b < B; ++b)
        for (int j = 0; j < S; ++j)
          if (!(*key_valid)[static_cast<size_t>(b) * S + j])
            for (int h = 0; h < heads; ++h)
              for (int i = 0; i < S; ++i)
                maskbuf[((static_cast<int64_t>(b) * heads + h) * S + i) * S + j] = T(-1e30);
      scores = add(scores, TensorT<T>::from({B * heads, S, S}, std::move(maskbuf)));
    }
    auto probs = softmax(scores, -1);
    if (capture) capture->probs.push_back(probs);
    auto ctx = bmm(probs, v, false, false, apply_kind);  // [B*h, S, dh]
    auto merged = reshape(permute(reshape(ctx, {B, heads, S, dh}), {0, 2, 1, 3}), {B, S, C});
    return use_out_proj ? wo.forward(merged) : merged;
  }

  void collect(const std::string& prefix, ParamMap<T>& map) const {
    wq.collect(prefix + ".wq", map);
    wk.collect(prefix + ".wk", map);
    wv.collect(prefix + ".wv", map);
    if (use_out_proj) wo.collect(prefix + ".wo", map);
  }
};

// Two-layer feed-forward block with GELU.
template <class T>
struct FfnT {
  LinearT<T> fc1, fc2;

  void init(Rng& rng, int channels, int hidden) {
    fc1.init(rng, channels, hidden, true);
    fc2.init(rng, hidden, channels, true);
  }

  TensorT<T> forward(const TensorT<T>& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  void collect(const std::string& prefix, ParamMap<T>& map) const {
    fc1.collect(prefix + ".fc1", map);
    fc2.collect(prefix + ".fc2", map);
  }
};

}  // namespace m2h
