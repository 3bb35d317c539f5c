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

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "m2h/common.hpp"

namespace m2h {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

// Multiply-add instrumentation. Attention kernels tag their bmm calls so the
// bench can separate QK^T / A*V cost from projections and FFNs.
enum class MacKind { kOther = 0, kAttnScores = 1, kAttnApply = 2 };

struct MacCounter {
  bool enabled = false;
  uint64_t other = 0;
  uint64_t attn_scores = 0;
  uint64_t attn_apply = 0;

  uint64_t attention() const { return attn_scores + attn_apply; }
  uint64_t total() const { return other + attn_scores + attn_apply; }
  void reset() { other = attn_scores = attn_apply = 0; }
  void add(MacKind kind, uint64_t n) {
    switch (kind) {
      case MacKind::kAttnScores: attn_scores += n; break;
      case MacKind::kAttnApply: attn_apply += n; break;
      default: other += n; break;
    }
  }
  static MacCounter& instance();
};

// Global gradient-mode flag; forward passes run without taping when disabled.
bool& grad_mode();

struct NoGradGuard {
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  bool prev;
};

template <class T>
struct TensorImplT {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until first accumulation; same size as data

  // Tape record: seq is the execution order id, parents are the inputs, and
  // backward_fn scatters this node's grad into the parents' grads.
  uint64_t seq = 0;
  bool is_leaf = true;
  std::vector<std::shared_ptr<TensorImplT>> parents;
  std::function<void(TensorImplT&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;
  explicit TensorT(std::shared_ptr<TensorImplT<T>> impl) : impl_(std::move(impl)) {}

  static TensorT zeros(const Shape& shape);
  static TensorT full(const Shape& shape, T value);
  static TensorT from(const Shape& shape, std::vector<T> values);
  static TensorT scalar(T value) { return full({1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return impl_->numel(); }

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  T item() const {
    M2H_CHECK_DIM(numel() == 1, "item() on tensor with ", numel(), " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  TensorT& set_requires_grad(bool v = true) {
    impl_->requires_grad = v;
    return *this;
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<T>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<T>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  std::shared_ptr<TensorImplT<T>>& impl() { return impl_; }
  const std::shared_ptr<TensorImplT<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImplT<T>> impl_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---- creation helpers ----
template <class T>
TensorT<T> randn_tensor(Rng& rng, const Shape& shape, double stddev = 1.0, double mean = 0.0);
template <class T>
TensorT<T> uniform_tensor(Rng& rng, const Shape& shape, double lo, double hi);

// ---- elementwise / scalar ----
template <class T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> divt(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> scale(const TensorT<T>& x, T c);
template <class T> TensorT<T> add_const(const TensorT<T>& x, T c);
template <class T> TensorT<T> relu(const TensorT<T>& x);
template <class T> TensorT<T> gelu(const TensorT<T>& x);
template <class T> TensorT<T> sigmoid(const TensorT<T>& x);
template <class T> TensorT<T> softplus(const TensorT<T>& x);
template <class T> TensorT<T> logt(const TensorT<T>& x);   // DomainError on x <= 0
template <class T> TensorT<T> expt(const TensorT<T>& x);
template <class T> TensorT<T> abst(const TensorT<T>& x);
template <class T> TensorT<T> sqrtt(const TensorT<T>& x);
template <class T> TensorT<T> rsqrtt(const TensorT<T>& x);
template <class T> TensorT<T> minimum_const(const TensorT<T>& x, T c);

// ---- reductions ----
template <class T> TensorT<T> sum_all(const TensorT<T>& x);
template <class T> TensorT<T> mean_all(const TensorT<T>& x);
template <class T>
TensorT<T> sum_axes(const TensorT<T>& x, const std::vector<int>& axes, bool keepdim = false);

// ---- shape / movement ----
template <class T> TensorT<T> reshape(const TensorT<T>& x, const Shape& shape);
template <class T> TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& perm);
template <class T> TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len);
template <class T> TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis);
// Zero padding / cropping of the two trailing spatial axes of a B x C x H x W map.
template <class T> TensorT<T> pad2d(const TensorT<T>& x, int top, int bottom, int left, int right);
template <class T> TensorT<T> crop2d(const TensorT<T>& x, int top, int left, int h, int w);

// ---- broadcast helpers ----
template <class T> TensorT<T> add_bias_lastdim(const TensorT<T>& x, const TensorT<T>& b);
template <class T> TensorT<T> add_bias_channel(const TensorT<T>& x, const TensorT<T>& b);
// y[b,c,h,w] = x[b,c,h,w] * g[b,c]
template <class T> TensorT<T> mul_channel_gate(const TensorT<T>& x, const TensorT<T>& g);
// y[b,c,h,w] = x[b,c,h,w] * m[b,0,h,w]
template <class T> TensorT<T> mul_bcast_channel(const TensorT<T>& x, const TensorT<T>& m);

// ---- linear algebra ----
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);
// Batched matmul with optional transposes: out[b] = op(a[b]) * op(b[b]).
template <class T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool trans_a = false,
               bool trans_b = false, MacKind mac_kind = MacKind::kOther);

// ---- neural-net primitives ----
template <class T> TensorT<T> softmax(const TensorT<T>& x, int axis);
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps, int axis = -1);
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int stride,
                  int pad, int groups = 1);
template <class T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                            int stride);
template <class T> TensorT<T> bilinear_upsample(const TensorT<T>& x, int factor);
template <class T> TensorT<T> global_avg_pool(const TensorT<T>& x);  // BxCxHxW -> BxC

// Forward/backward spatial differences with replicate boundary (result keeps
// the input shape; the replicated edge yields a zero difference there).
// axis is 2 (rows, H) or 3 (columns, W) of a B x C x H x W tensor.
template <class T> TensorT<T> diff_forward(const TensorT<T>& x, int axis);
template <class T> TensorT<T> diff_backward(const TensorT<T>& x, int axis);

// ---- fused losses ----
// Mean pixelwise cross entropy over labels != ignore_index. labels are B*H*W
// row-major class ids. Throws DataError on out-of-range labels.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels,
                         int ignore_index);
// Huber over mask != 0, mean over valid count. Throws DataError on empty mask.
template <class T>
TensorT<T> huber_loss(const TensorT<T>& pred, const TensorT<T>& target,
                      const std::vector<uint8_t>& mask, T delta);
// Mean binary cross entropy with logits; pos_weight scales the positive term.
template <class T>
TensorT<T> bce_with_logits(const TensorT<T>& logits, const TensorT<T>& targets, T pos_weight);

// ---- autodiff driver ----
// Reverse pass from a scalar loss. Visits every recorded node exactly once in
// reverse execution order, accumulates into requires_grad leaves, then clears
// the tape (parents + closures) so tensors decay to plain values.
template <class T> void backward(const TensorT<T>& loss);

template <class T> bool all_finite(const TensorT<T>& x);

}  // namespace m2h
