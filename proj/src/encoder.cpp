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

#include "m2h/encoder.hpp"

namespace m2h {

template <class T>
void PatchEmbedT<T>::init(Rng& rng, const ModelConfig& cfg) {
  patch = cfg.patch;
  grid_h = cfg.token_grid_h();
  grid_w = cfg.token_grid_w();
  emb_d = cfg.emb_d;
  proj.init(rng, 3 * patch * patch, emb_d, true);
  pos = randn_tensor<T>(rng, {grid_h * grid_w, emb_d}, 0.02);
  pos.set_requires_grad(true);
}

template <class T>
TokenSetT<T> PatchEmbedT<T>::forward(const TensorT<T>& image) const {
  M2H_CHECK_DIM(image.ndim() == 4 && image.dim(1) == 3, "patch_embed: expected Bx3xHxW, got ",
                shape_str(image.shape()));
  const int B = image.dim(0), H = image.dim(2), W = image.dim(3);
  if (H % patch != 0 || W % patch != 0)
    raise<ConfigError>("patch_embed: image ", H, "x", W, " not divisible by patch ", patch);
  if (H / patch != grid_h || W / patch != grid_w)
    raise<ConfigError>("patch_embed: image ", H, "x", W,
                       " does not match the configured grid (positional embedding is sized for ",
                       grid_h * patch, "x", grid_w * patch, ")");
  const int N = grid_h * grid_w;
  auto x = reshape(image, {B, 3, grid_h, patch, grid_w, patch});
  x = permute(x, {0, 2, 4, 1, 3, 5});  // [B, gh, gw, 3, p, p]
  x = reshape(x, {B, N, 3 * patch * patch});
  auto tok = proj.forward(x);  // [B, N, emb]
  // positional embedding broadcast over batch: treat N*emb as one feature row
  auto flat = reshape(tok, {B, N * emb_d});
  auto posflat = reshape(pos, {N * emb_d});
  flat = add_bias_lastdim(flat, posflat);
  return {reshape(flat, {B, N, emb_d}), grid_h, grid_w};
}

template <class T>
void PatchEmbedT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  proj.collect(prefix + ".proj", map);
  collect_param(map, prefix + ".pos", pos);
}

template <class T>
void MevitBlockT<T>::init(Rng& rng, const ModelConfig& cfg) {
  ln1.init(cfg.emb_d);
  ln2.init(cfg.emb_d);
  attn.init(rng, cfg.emb_d, cfg.enc_heads, /*qkv_bias=*/true, /*out_proj=*/true);
  ffn.init(rng, cfg.emb_d, cfg.emb_d * cfg.ffn_expansion);
}

template <class T>
TensorT<T> MevitBlockT<T>::forward(const TensorT<T>& tokens, AttnCapture<T>* capture) const {
  auto x = add(tokens, attn.forward(ln1.forward(tokens), capture));
  return add(x, ffn.forward(ln2.forward(x)));
}

template <class T>
void MevitBlockT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  ln1.collect(prefix + ".ln1", map);
  attn.collect(prefix + ".attn", map);
  ln2.collect(prefix + ".ln2", map);
  ffn.collect(prefix + ".ffn", map);
}

template <class T>
void EncoderT<T>::init(Rng& rng, const ModelConfig& cfg) {
  patch.init(rng, cfg);
  blocks.resize(cfg.enc_blocks);
  for (auto& b : blocks) b.init(rng, cfg);
  taps = cfg.taps;
  for (int t : taps)
    M2H_CHECK_CFG(t >= 1 && t <= cfg.enc_blocks, "encoder tap ", t, " out of range");
}

template <class T>
MultiScaleTokens<T> EncoderT<T>::encode_multiscale(const TensorT<T>& image,
                                                   AttnCapture<T>* capture) const {
  MultiScaleTokens<T> out;
  TokenSetT<T> t = patch.forward(image);
  for (size_t i = 0; i < blocks.size(); ++i) {
    t.tokens = blocks[i].forward(t.tokens, capture);
    const int layer = static_cast<int>(i) + 1;
    for (int tap : taps)
      if (tap == layer) out.taps.push_back(t);
  }
  out.final = t;
  return out;
}

template <class T>
void EncoderT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  patch.collect(prefix + ".patch", map);
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".block" + std::to_string(i), map);
}

template struct PatchEmbedT<float>;
template struct PatchEmbedT<double>;
template struct MevitBlockT<float>;
template struct MevitBlockT<double>;
template struct EncoderT<float>;
template struct EncoderT<double>;

}  // namespace m2h
