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

#include "m2h/reassembly.hpp"

namespace m2h {

template <class T>
TensorT<T> tokens_to_grid(const TokenSetT<T>& t) {
  const int B = t.tokens.dim(0);
  const int N = t.tokens.dim(1);
  const int emb = t.tokens.dim(2);
  M2H_CHECK_DIM(N == t.grid_h * t.grid_w, "tokens_to_grid: ", N, " tokens vs grid ", t.grid_h,
                "x", t.grid_w);
  auto x = reshape(t.tokens, {B, t.grid_h, t.grid_w, emb});
  return permute(x, {0, 3, 1, 2});
}

template <class T>
void MstrT<T>::init(Rng& rng, const ModelConfig& cfg) {
  for (auto& p : proj) p.init(rng, cfg.emb_d, cfg.channels, 1);
  up4.init(rng, cfg.channels, cfg.channels, 4, 4);
  up2.init(rng, cfg.channels, cfg.channels, 2, 2);
  // 4x4 stride-2 halves an even grid exactly (3x3 would need floor semantics)
  down2.init(rng, cfg.channels, cfg.channels, 4, 2, 1);
}

template <class T>
FeaturePyramidT<T> MstrT<T>::forward(const std::vector<TokenSetT<T>>& taps) const {
  M2H_CHECK_DIM(taps.size() == 4, "mstr: expected 4 token sets, got ", taps.size());
  FeaturePyramidT<T> pyr;
  for (int i = 0; i < 4; ++i) {
    auto grid = proj[static_cast<size_t>(i)].forward(tokens_to_grid(taps[static_cast<size_t>(i)]));
    switch (i) {
      case 0: pyr.maps[0] = up4.forward(grid); break;
      case 1: pyr.maps[1] = up2.forward(grid); break;
      case 2: pyr.maps[2] = grid; break;
      case 3: pyr.maps[3] = down2.forward(grid); break;
    }
  }
  for (int i = 0; i < 3; ++i) {
    M2H_CHECK_DIM(pyr.maps[i].dim(2) == 2 * pyr.maps[i + 1].dim(2) &&
                      pyr.maps[i].dim(3) == 2 * pyr.maps[i + 1].dim(3),
                  "mstr: pyramid scale law violated between levels ", i, " and ", i + 1);
  }
  return pyr;
}

template <class T>
void MstrT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  for (int i = 0; i < 4; ++i)
    proj[static_cast<size_t>(i)].collect(prefix + ".proj" + std::to_string(i), map);
  up4.collect(prefix + ".up4", map);
  up2.collect(prefix + ".up2", map);
  down2.collect(prefix + ".down2", map);
}

template <class T>
void MsfT<T>::init(Rng& rng, const ModelConfig& cfg) {
  const int groups = cfg.depthwise_refine ? cfg.channels : 1;
  for (auto& r : refine) r.init(rng, cfg.channels, cfg.channels, 3, 1, 1, groups);
}

template <class T>
TensorT<T> MsfT<T>::forward(const FeaturePyramidT<T>& pyramid) const {
  auto acc = refine[3].forward(pyramid.maps[3]);
  for (int i = 2; i >= 0; --i)
    acc = add(refine[static_cast<size_t>(i)].forward(pyramid.maps[static_cast<size_t>(i)]),
              bilinear_upsample(acc, 2));
  return acc;
}

template <class T>
void MsfT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  for (int i = 0; i < 4; ++i)
    refine[static_cast<size_t>(i)].collect(prefix + ".refine" + std::to_string(i), map);
}

template <class T>
void UniqueProjT<T>::init(Rng& rng, const ModelConfig& cfg) {
  proj.init(rng, cfg.emb_d, cfg.channels, 1);
  up4.init(rng, cfg.channels, cfg.channels, 4, 4);
  for (auto& tp : task_proj) tp.init(rng, cfg.channels, cfg.channels, 1);
}

template <class T>
TensorT<T> UniqueProjT<T>::shared_map(const TokenSetT<T>& final_tokens) const {
  return up4.forward(proj.forward(tokens_to_grid(final_tokens)));
}

template <class T>
TensorT<T> UniqueProjT<T>::forward_task(const TensorT<T>& shared, int task) const {
  return task_proj[static_cast<size_t>(task)].forward(shared);
}

template <class T>
void UniqueProjT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  proj.collect(prefix + ".proj", map);
  up4.collect(prefix + ".up4", map);
  for (int t = 0; t < 4; ++t)
    task_proj[static_cast<size_t>(t)].collect(prefix + "." + task_name(t), map);
}

template TensorT<float> tokens_to_grid<float>(const TokenSetT<float>&);
template TensorT<double> tokens_to_grid<double>(const TokenSetT<double>&);
template struct MstrT<float>;
template struct MstrT<double>;
template struct MsfT<float>;
template struct MsfT<double>;
template struct UniqueProjT<float>;
template struct UniqueProjT<double>;

}  // namespace m2h
