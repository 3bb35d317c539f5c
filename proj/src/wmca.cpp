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

#include "m2h/wmca.hpp"

#include <chrono>

namespace m2h {

template <class T>
WindowedTokensT<T> window_partition(const TensorT<T>& x, int p) {
  M2H_CHECK_DIM(x.ndim() == 4, "window_partition: expected BxCxHxW, got ", shape_str(x.shape()));
  M2H_CHECK_DIM(p >= 1, "window_partition: window must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  WindowedTokensT<T> out;
  out.batch = B;
  out.orig_h = H;
  out.orig_w = W;
  out.win_rows = (H + p - 1) / p;
  out.win_cols = (W + p - 1) / p;
  out.pad_h = out.win_rows * p - H;
  out.pad_w = out.win_cols * p - W;
  TensorT<T> padded = (out.pad_h || out.pad_w) ? pad2d(x, 0, out.pad_h, 0, out.pad_w) : x;
  auto v = reshape(padded, {B, C, out.win_rows, p, out.win_cols, p});
  v = permute(v, {0, 2, 4, 3, 5, 1});  // [B, wr, wc, pr, pc, C]
  out.tokens = reshape(v, {B * out.window_count(), p * p, C});
  return out;
}

template <class T>
TensorT<T> window_unpartition(const WindowedTokensT<T>& w, int p, int out_h, int out_w) {
  M2H_CHECK_DIM(out_h == w.orig_h && out_w == w.orig_w,
                "window_unpartition: requested ", out_h, "x", out_w,
                " but windows were built from ", w.orig_h, "x", w.orig_w);
  const auto& t = w.tokens;
  M2H_CHECK_DIM(t.ndim() == 3 && t.dim(0) == w.batch * w.window_count() && t.dim(1) == p * p,
                "window_unpartition: token geometry mismatch for ", shape_str(t.shape()));
  const int C = t.dim(2);
  const int Hp = w.win_rows * p, Wp = w.win_cols * p;
  auto v = reshape(t, {w.batch, w.win_rows, w.win_cols, p, p, C});
  v = permute(v, {0, 5, 1, 3, 2, 4});  // [B, C, wr, pr, wc, pc]
  auto full = reshape(v, {w.batch, C, Hp, Wp});
  if (w.pad_h || w.pad_w) return crop2d(full, 0, 0, w.orig_h, w.orig_w);
  return full;
}

template <class T>
void WmcaLayerT<T>::init(Rng& rng, const ModelConfig& cfg) {
  window = cfg.window;
  mask_padding = cfg.wmca_mask_padding;
  for (auto& ln : task_ln) ln.init(cfg.channels);
  attn.init(rng, cfg.channels, cfg.wmca_heads, /*qkv_bias=*/false,
            /*out_proj=*/cfg.wmca_out_proj);
  ffn.init(rng, cfg.channels, cfg.channels * cfg.ffn_expansion);
}

template <class T>
TaskBundleT<T> WmcaLayerT<T>::forward(const TaskBundleT<T>& bundle,
                                      AttnCapture<T>* capture) const {
  const auto& shape0 = bundle[0].shape();
  for (int t = 1; t < 4; ++t)
    M2H_CHECK_DIM(shape_eq(bundle[t].shape(), shape0),
                  "wmca: task map shapes disagree (", shape_str(bundle[t].shape()), " vs ",
                  shape_str(shape0), ")");
  const int H = shape0[2], W = shape0[3];
  const int p = window;
  const int p2 = p * p;

  std::array<WindowedTokensT<T>, 4> wins;
  std::vector<TensorT<T>> normed;
  normed.reserve(4);
  for (int t = 0; t < 4; ++t) {
    wins[static_cast<size_t>(t)] = window_partition(bundle[t], p);
    normed.push_back(task_ln[static_cast<size_t>(t)].forward(wins[static_cast<size_t>(t)].tokens));
  }
  auto z = concat(normed, 1);  // [(B*M), 4*p^2, C]

  std::vector<uint8_t> key_valid;
  const std::vector<uint8_t>* valid_ptr = nullptr;
  if (mask_padding && (wins[0].pad_h || wins[0].pad_w)) {
    const auto& w0 = wins[0];
    const int rows = w0.batch * w0.window_count();
    key_valid.assign(static_cast<size_t>(rows) * 4 * p2, 1);
    for (int b = 0; b < w0.batch; ++b)
      for (int wr = 0; wr < w0.win_rows; ++wr)
        for (int wc = 0; wc < w0.win_cols; ++wc) {
          const int row = (b * w0.win_rows + wr) * w0.win_cols + wc;
          for (int pr = 0; pr < p; ++pr)
            for (int pc = 0; pc < p; ++pc) {
              const bool inside = (wr * p + pr) < w0.orig_h && (wc * p + pc) < w0.orig_w;
              if (inside) continue;
              for (int g = 0; g < 4; ++g)
                key_valid[static_cast<size_t>(row) * 4 * p2 + g * p2 + pr * p + pc] = 0;
            }
        }
    valid_ptr = &key_valid;
  }

  auto z_attn = add(z, attn.forward(z, capture, valid_ptr));
  auto z_ffn = add(z_attn, ffn.forward(z_attn));

  TaskBundleT<T> out;
  for (int t = 0; t < 4; ++t) {
    WindowedTokensT<T> wt = wins[static_cast<size_t>(t)];
    wt.tokens = slice(z_ffn, 1, t * p2, p2);
    out[t] = window_unpartition(wt, p, H, W);
  }
  return out;
}

template <class T>
void WmcaLayerT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  for (int t = 0; t < 4; ++t)
    task_ln[static_cast<size_t>(t)].collect(prefix + ".ln_" + task_name(t), map);
  attn.collect(prefix + ".attn", map);
  ffn.collect(prefix + ".ffn", map);
}

template <class T>
void WmcaT<T>::init(Rng& rng, const ModelConfig& cfg) {
  layers.resize(cfg.wmca_layers);
  for (auto& l : layers) l.init(rng, cfg);
}

template <class T>
TaskBundleT<T> WmcaT<T>::forward(const TaskBundleT<T>& bundle, AttnCapture<T>* capture) const {
  TaskBundleT<T> cur = bundle;
  for (const auto& l : layers) cur = l.forward(cur, capture);
  return cur;
}

template <class T>
void WmcaT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(prefix + ".layer" + std::to_string(i), map);
}

template <class T>
TaskBundleT<T> global_cross_task_forward(const WmcaLayerT<T>& layer, const TaskBundleT<T>& bundle,
                                         AttnCapture<T>* capture) {
  const int B = bundle[0].dim(0), C = bundle[0].dim(1);
  const int H = bundle[0].dim(2), W = bundle[0].dim(3);
  const int S = H * W;
  std::vector<TensorT<T>> normed;
  normed.reserve(4);
  for (int t = 0; t < 4; ++t) {
    auto flat = reshape(permute(bundle[t], {0, 2, 3, 1}), {B, S, C});
    normed.push_back(layer.task_ln[static_cast<size_t>(t)].forward(flat));
  }
  auto z = concat(normed, 1);  // [B, 4*S, C]
  auto z_attn = add(z, layer.attn.forward(z, capture));
  auto z_ffn = add(z_attn, layer.ffn.forward(z_attn));
  TaskBundleT<T> out;
  for (int t = 0; t < 4; ++t) {
    auto part = slice(z_ffn, 1, t * S, S);
    out[t] = permute(reshape(part, {B, H, W, C}), {0, 3, 1, 2});
  }
  return out;
}

AttentionCost measure_attention_cost(const ModelConfig& cfg, int feat_h, int feat_w,
                                     bool global_attention) {
  Rng rng(12345);
  WmcaLayerT<float> layer;
  layer.init(rng, cfg);
  TaskBundleT<float> bundle;
  for (int t = 0; t < 4; ++t)
    bundle[t] = randn_tensor<float>(rng, {1, cfg.channels, feat_h, feat_w}, 0.5);

  AttentionCost cost;
  cost.feat_h = feat_h;
  cost.feat_w = feat_w;
  cost.window = global_attention ? feat_h : cfg.window;
  if (global_attention) {
    cost.window_count = 1;
  } else {
    cost.window_count =
        ((feat_h + cfg.window - 1) / cfg.window) * ((feat_w + cfg.window - 1) / cfg.window);
  }

  auto& mc = MacCounter::instance();
  mc.reset();
  mc.enabled = true;
  NoGradGuard no_grad;
  const auto start = std::chrono::steady_clock::now();
  if (global_attention) {
    (void)global_cross_task_forward(layer, bundle);
  } else {
    (void)layer.forward(bundle);
  }
  const auto stop = std::chrono::steady_clock::now();
  mc.enabled = false;
  cost.attention_macs = mc.attention();
  cost.total_macs = mc.total();
  cost.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
  return cost;
}

template struct WindowedTokensT<float>;
template struct WindowedTokensT<double>;
template WindowedTokensT<float> window_partition<float>(const TensorT<float>&, int);
template WindowedTokensT<double> window_partition<double>(const TensorT<double>&, int);
template TensorT<float> window_unpartition<float>(const WindowedTokensT<float>&, int, int, int);
template TensorT<double> window_unpartition<double>(const WindowedTokensT<double>&, int, int,
                                                    int);
template struct WmcaLayerT<float>;
template struct WmcaLayerT<double>;
template struct WmcaT<float>;
template struct WmcaT<double>;
template TaskBundleT<float> global_cross_task_forward<float>(const WmcaLayerT<float>&,
                                                             const TaskBundleT<float>&,
                                                             AttnCapture<float>*);
template TaskBundleT<double> global_cross_task_forward<double>(const WmcaLayerT<double>&,
                                                               const TaskBundleT<double>&,
                                                               AttnCapture<double>*);

}  // namespace m2h
