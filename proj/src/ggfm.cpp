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

#include "m2h/ggfm.hpp"

namespace m2h {

template <class T>
void GgfmT<T>::init(Rng& rng, const ModelConfig& cfg) {
  w1.init(rng, cfg.channels, cfg.channels / cfg.se_reduction, /*bias=*/false);
  w2.init(rng, cfg.channels / cfg.se_reduction, cfg.channels, /*bias=*/true);
}

template <class T>
TensorT<T> GgfmT<T>::compute_gate(const TensorT<T>& f) const {
  auto z = global_avg_pool(f);  // [B, C]
  return sigmoid(w2.forward(relu(w1.forward(z))));
}

template <class T>
TensorT<T> GgfmT<T>::apply_gate(const TensorT<T>& f, const TensorT<T>& gate) {
  return add(f, mul_channel_gate(f, gate));
}

template <class T>
TensorT<T> GgfmT<T>::forward(const TensorT<T>& f) const {
  return apply_gate(f, compute_gate(f));
}

template <class T>
void GgfmT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  w1.collect(prefix + ".w1", map);
  w2.collect(prefix + ".w2", map);
}

template <class T>
TensorT<T> ggfm_fuse_unique(const TensorT<T>& f_global, const TensorT<T>& unique) {
  return add(f_global, unique);
}

template <class T>
void StreamFuseT<T>::init(Rng& rng, const ModelConfig& cfg) {
  proj.init(rng, 2 * cfg.channels, cfg.channels, 1);
}

template <class T>
TensorT<T> StreamFuseT<T>::forward(const TensorT<T>& local, const TensorT<T>& global) const {
  return proj.forward(concat(std::vector<TensorT<T>>{local, global}, 1));
}

template <class T>
void StreamFuseT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  proj.collect(prefix + ".proj", map);
}

template <class T>
void HeadT<T>::init(Rng& rng, const ModelConfig& cfg, int out_channels, HeadActivation act) {
  activation = act;
  max_depth = cfg.max_depth;
  conv1.init(rng, cfg.channels, cfg.head_ch(), 3, 1, 1);
  conv2.init(rng, cfg.head_ch(), out_channels, 1);
}

template <class T>
TensorT<T> HeadT<T>::forward(const TensorT<T>& fused) const {
  auto x = gelu(conv1.forward(fused));
  x = bilinear_upsample(x, 4);
  x = conv2.forward(x);
  switch (activation) {
    case HeadActivation::kLogits:
      return x;
    case HeadActivation::kDepth: {
      auto s = softplus(x);
      return scale(divt(s, add_const(s, T(1))), static_cast<T>(max_depth));
    }
    case HeadActivation::kNormals: {
      auto norm_sq = sum_axes(mul(x, x), {1}, /*keepdim=*/true);
      return mul_bcast_channel(x, rsqrtt(add_const(norm_sq, T(1e-12))));
    }
  }
  return x;
}

template <class T>
void HeadT<T>::collect(const std::string& prefix, ParamMap<T>& map) const {
  conv1.collect(prefix + ".conv1", map);
  conv2.collect(prefix + ".conv2", map);
}

template <class T>
void M2HModelT<T>::init(Rng& rng, const ModelConfig& config) {
  cfg = config;
  cfg.finalize();
  encoder.init(rng, cfg);
  mstr.init(rng, cfg);
  for (auto& m : msf) m.init(rng, cfg);
  unique.init(rng, cfg);
  wmca.init(rng, cfg);
  for (auto& g : ggfm) g.init(rng, cfg);
  for (auto& f : fuse) f.init(rng, cfg);
  heads[kTaskEdges].init(rng, cfg, 1, HeadActivation::kLogits);
  heads[kTaskNormals].init(rng, cfg, 3, HeadActivation::kNormals);
  heads[kTaskSemantics].init(rng, cfg, cfg.num_classes, HeadActivation::kLogits);
  heads[kTaskDepth].init(rng, cfg, 1, HeadActivation::kDepth);
}

template <class T>
PredictionsT<T> M2HModelT<T>::forward(const TensorT<T>& image,
                                      const ForwardDebugT<T>* debug) const {
  auto ms = encoder.encode_multiscale(image);
  auto pyramid = mstr.forward(ms.taps);

  TaskBundleT<T> prelim;
  for (int t = 0; t < 4; ++t) prelim[t] = msf[static_cast<size_t>(t)].forward(pyramid);
  if (debug && debug->preliminary) *debug->preliminary = prelim;

  TaskBundleT<T> local =
      cfg.use_wmca ? wmca.forward(prelim, debug ? debug->wmca_attention : nullptr) : prelim;
  if (debug && debug->local_stream) *debug->local_stream = local;

  auto shared_unique = unique.shared_map(ms.final);
  TaskBundleT<T> global;
  for (int t = 0; t < 4; ++t) {
    auto u = unique.forward_task(shared_unique, t);
    auto g = cfg.use_ggfm ? ggfm[static_cast<size_t>(t)].forward(prelim[t]) : prelim[t];
    global[t] = ggfm_fuse_unique(g, u);
  }
  if (debug && debug->global_stream) *debug->global_stream = global;

  PredictionsT<T> pred;
  for (int t = 0; t < 4; ++t) {
    auto fused = fuse[static_cast<size_t>(t)].forward(local[t], global[t]);
    auto y = heads[static_cast<size_t>(t)].forward(fused);
    switch (t) {
      case kTaskEdges: pred.edge_logits = y; break;
      case kTaskNormals: pred.normals = y; break;
      case kTaskSemantics: pred.seg_logits = y; break;
      case kTaskDepth: pred.depth = y; break;
    }
  }
  return pred;
}

template <class T>
void M2HModelT<T>::collect(ParamMap<T>& map) const {
  encoder.collect("encoder", map);
  mstr.collect("mstr", map);
  for (int t = 0; t < 4; ++t)
    msf[static_cast<size_t>(t)].collect(std::string("msf.") + task_name(t), map);
  unique.collect("unique", map);
  wmca.collect("wmca", map);
  for (int t = 0; t < 4; ++t)
    ggfm[static_cast<size_t>(t)].collect(std::string("ggfm.") + task_name(t), map);
  for (int t = 0; t < 4; ++t)
    fuse[static_cast<size_t>(t)].collect(std::string("fuse.") + task_name(t), map);
  for (int t = 0; t < 4; ++t)
    heads[static_cast<size_t>(t)].collect(std::string("head.") + task_name(t), map);
}

template <class T>
std::vector<TensorT<T>> M2HModelT<T>::parameters() const {
  ParamMap<T> map;
  collect(map);
  std::vector<TensorT<T>> out;
  out.reserve(map.size());
  for (auto& e : map) out.push_back(e.tensor);
  return out;
}

template struct GgfmT<float>;
template struct GgfmT<double>;
template TensorT<float> ggfm_fuse_unique<float>(const TensorT<float>&, const TensorT<float>&);
template TensorT<double> ggfm_fuse_unique<double>(const TensorT<double>&, const TensorT<double>&);
template struct StreamFuseT<float>;
template struct StreamFuseT<double>;
template struct HeadT<float>;
template struct HeadT<double>;
template struct M2HModelT<float>;
template struct M2HModelT<double>;

}  // namespace m2h
