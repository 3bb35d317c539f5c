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

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "m2h/tensor.hpp"
#include "tensor_detail.hpp"

namespace m2h {

using detail::make_op;

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int stride,
                  int pad, int groups) {
  M2H_CHECK_DIM(x.ndim() == 4, "conv2d: input must be BxCxHxW, got ", shape_str(x.shape()));
  M2H_CHECK_DIM(w.ndim() == 4, "conv2d: weight must be OxIxKhxKw, got ", shape_str(w.shape()));
  M2H_CHECK_DIM(stride >= 1 && pad >= 0 && groups >= 1, "conv2d: bad stride/pad/groups");
  const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), Cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  M2H_CHECK_DIM(kh >= 1 && kw >= 1, "conv2d: kernel must be at least 1x1");
  M2H_CHECK_DIM(Ci % groups == 0 && Co % groups == 0, "conv2d: channels not divisible by groups");
  M2H_CHECK_DIM(Cig == Ci / groups, "conv2d: weight input channels ", Cig, " vs expected ",
                Ci / groups);
  const int numer_h = H + 2 * pad - kh;
  const int numer_w = W + 2 * pad - kw;
  M2H_CHECK_DIM(numer_h >= 0 && numer_w >= 0 && numer_h % stride == 0 && numer_w % stride == 0,
                "conv2d: non-integral output size for input ", shape_str(x.shape()), " kernel ",
                kh, "x", kw, " stride ", stride, " pad ", pad);
  const int Ho = numer_h / stride + 1;
  const int Wo = numer_w / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias)
    M2H_CHECK_DIM(bias.ndim() == 1 && bias.dim(0) == Co, "conv2d: bias shape mismatch");

  auto& mc = MacCounter::instance();
  if (mc.enabled)
    mc.add(MacKind::kOther, static_cast<uint64_t>(B) * Co * Ho * Wo * Cig * kh * kw);

  const int Cog = Co / groups;
  const auto& xd = x.data();
  const auto& wd = w.data();
  std::vector<T> out(static_cast<size_t>(B) * Co * Ho * Wo, T(0));
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Co; ++co) {
      const int g = co / Cog;
      T* orow0 = out.data() + (static_cast<int64_t>(b) * Co + co) * Ho * Wo;
      const T bv = has_bias ? bias.data()[co] : T(0);
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          T acc = bv;
          for (int cig = 0; cig < Cig; ++cig) {
            const int ci = g * Cig + cig;
            const T* xplane = xd.data() + (static_cast<int64_t>(b) * Ci + ci) * H * W;
            const T* wplane =
                wd.data() + ((static_cast<int64_t>(co) * Cig + cig) * kh) * kw;
            for (int r = 0; r < kh; ++r) {
              const int ih = oh * stride - pad + r;
              if (ih < 0 || ih >= H) continue;
              const int iw0 = ow * stride - pad;
              const T* xr = xplane + static_cast<int64_t>(ih) * W;
              const T* wr = wplane + static_cast<int64_t>(r) * kw;
              for (int c = 0; c < kw; ++c) {
                const int iw = iw0 + c;
                if (iw < 0 || iw >= W) continue;
                acc += xr[iw] * wr[c];
              }
            }
          }
          orow0[static_cast<int64_t>(oh) * Wo + ow] = acc;
        }
    }

  auto xi = x.impl(), wi = w.impl();
  auto bi = has_bias ? bias.impl() : nullptr;
  std::vector<TensorT<T>> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return make_op<T>(
      {B, Co, Ho, Wo}, std::move(out), parents,
      [xi, wi, bi, B, Ci, H, W, Co, Cig, Cog, kh, kw, Ho, Wo, stride, pad](TensorImplT<T>& self) {
        const bool dx = xi->requires_grad, dw = wi->requires_grad;
        const bool db = bi && bi->requires_grad;
        if (dx) xi->ensure_grad();
        if (dw) wi->ensure_grad();
        if (db) bi->ensure_grad();
        auto& mc2 = MacCounter::instance();
        if (mc2.enabled) {
          const uint64_t n = static_cast<uint64_t>(B) * Co * Ho * Wo * Cig * kh * kw;
          if (dx) mc2.add(MacKind::kOther, n);
          if (dw) mc2.add(MacKind::kOther, n);
        }
        for (int b = 0; b < B; ++b)
          for (int co = 0; co < Co; ++co) {
            const int g = co / Cog;
            const T* grow0 = self.grad.data() + (static_cast<int64_t>(b) * Co + co) * Ho * Wo;
            for (int oh = 0; oh < Ho; ++oh)
              for (int ow = 0; ow < Wo; ++ow) {
                const T gy = grow0[static_cast<int64_t>(oh) * Wo + ow];
                if (gy == T(0)) continue;
                if (db) bi->grad[co] += gy;
                if (!dx && !dw) continue;
                for (int cig = 0; cig < Cig; ++cig) {
                  const int ci = g * Cig + cig;
                  const int64_t xbase = (static_cast<int64_t>(b) * Ci + ci) * H * W;
                  const int64_t wbase = (static_cast<int64_t>(co) * Cig + cig) * kh * kw;
                  for (int r = 0; r < kh; ++r) {
                    const int ih = oh * stride - pad + r;
                    if (ih < 0 || ih >= H) continue;
                    for (int c = 0; c < kw; ++c) {
                      const int iw = ow * stride - pad + c;
                      if (iw < 0 || iw >= W) continue;
                      const int64_t xoff = xbase + static_cast<int64_t>(ih) * W + iw;
                      const int64_t woff = wbase + static_cast<int64_t>(r) * kw + c;
                      if (dx) xi->grad[xoff] += gy * wi->data[woff];
                      if (dw) wi->grad[woff] += gy * xi->data[xoff];
                    }
                  }
                }
              }
          }
      });
}

// ---------------------------------------------------------------------------
// conv_transpose2d (kernel == stride upsampling; pad 0)
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                            int stride) {
  M2H_CHECK_DIM(x.ndim() == 4 && w.ndim() == 4, "conv_transpose2d: expected 4-d tensors");
  const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Wci = w.dim(0), Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  M2H_CHECK_DIM(Wci == Ci, "conv_transpose2d: weight input channels ", Wci, " vs ", Ci);
  M2H_CHECK_DIM(stride >= 1, "conv_transpose2d: bad stride");
  const int Ho = (H - 1) * stride + kh;
  const int Wo = (W - 1) * stride + kw;
  const bool has_bias = bias.defined();
  if (has_bias)
    M2H_CHECK_DIM(bias.ndim() == 1 && bias.dim(0) == Co, "conv_transpose2d: bias shape mismatch");

  auto& mc = MacCounter::instance();
  if (mc.enabled)
    mc.add(MacKind::kOther, static_cast<uint64_t>(B) * Ci * H * W * Co * kh * kw);

  const auto& xd = x.data();
  const auto& wd = w.data();
  std::vector<T> out(static_cast<size_t>(B) * Co * Ho * Wo, T(0));
  for (int b = 0; b < B; ++b) {
    for (int ci = 0; ci < Ci; ++ci) {
      const T* xplane = xd.data() + (static_cast<int64_t>(b) * Ci + ci) * H * W;
      for (int ih = 0; ih < H; ++ih)
        for (int iw = 0; iw < W; ++iw) {
          const T xv = xplane[static_cast<int64_t>(ih) * W + iw];
          if (xv == T(0)) continue;
          for (int co = 0; co < Co; ++co) {
            T* oplane = out.data() + (static_cast<int64_t>(b) * Co + co) * Ho * Wo;
            const T* wplane = wd.data() + (static_cast<int64_t>(ci) * Co + co) * kh * kw;
            for (int r = 0; r < kh; ++r) {
              T* orow = oplane + static_cast<int64_t>(ih * stride + r) * Wo + iw * stride;
              const T* wr = wplane + static_cast<int64_t>(r) * kw;
              for (int c = 0; c < kw; ++c) orow[c] += xv * wr[c];
            }
          }
        }
    }
    if (has_bias) {
      for (int co = 0; co < Co; ++co) {
        T* oplane = out.data() + (static_cast<int64_t>(b) * Co + co) * Ho * Wo;
        const T bv = bias.data()[co];
        for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) oplane[i] += bv;
      }
    }
  }

  auto xi = x.impl(), wi = w.impl();
  auto bi = has_bias ? bias.impl() : nullptr;
  std::vector<TensorT<T>> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return make_op<T>(
      {B, Co, Ho, Wo}, std::move(out), parents,
      [xi, wi, bi, B, Ci, H, W, Co, kh, kw, Ho, Wo, stride](TensorImplT<T>& self) {
        const bool dx = xi->requires_grad, dw = wi->requires_grad;
        const bool db = bi && bi->requires_grad;
        if (dx) xi->ensure_grad();
        if (dw) wi->ensure_grad();
        if (db) bi->ensure_grad();
        auto& mc2 = MacCounter::instance();
        if (mc2.enabled) {
          const uint64_t n = static_cast<uint64_t>(B) * Ci * H * W * Co * kh * kw;
          if (dx) mc2.add(MacKind::kOther, n);
          if (dw) mc2.add(MacKind::kOther, n);
        }
        for (int b = 0; b < B; ++b) {
          if (db) {
            for (int co = 0; co < Co; ++co) {
              const T* gplane = self.grad.data() + (static_cast<int64_t>(b) * Co + co) * Ho * Wo;
              T s = 0;
              for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) s += gplane[i];
              bi->grad[co] += s;
            }
          }
          if (!dx && !dw) continue;
          for (int ci = 0; ci < Ci; ++ci) {
            const int64_t xbase = (static_cast<int64_t>(b) * Ci + ci) * H * W;
            for (int ih = 0; ih < H; ++ih)
              for (int iw = 0; iw < W; ++iw) {
                const int64_t xoff = xbase + static_cast<int64_t>(ih) * W + iw;
                T gx = 0;
                for (int co = 0; co < Co; ++co) {
                  const T* gplane =
                      self.grad.data() + (static_cast<int64_t>(b) * Co + co) * Ho * Wo;
                  const int64_t wbase = (static_cast<int64_t>(ci) * Co + co) * kh * kw;
                  for (int r = 0; r < kh; ++r) {
                    const T* grow =
                        gplane + static_cast<int64_t>(ih * stride + r) * Wo + iw * stride;
                    for (int c = 0; c < kw; ++c) {
                      const T gy = grow[c];
                      if (dx) gx += gy * wi->data[wbase + static_cast<int64_t>(r) * kw + c];
                      if (dw)
                        wi->grad[wbase + static_cast<int64_t>(r) * kw + c] +=
                            gy * xi->data[xoff];
                    }
                  }
                }
                if (dx) xi->grad[xoff] += gx;
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// bilinear upsample / global average pool
// ---------------------------------------------------------------------------

namespace {

struct LerpTap {
  int lo, hi;
  double w_hi;  // weight on hi tap; (1 - w_hi) on lo
};

inline std::vector<LerpTap> bilinear_taps(int n_in, int factor) {
  std::vector<LerpTap> taps(static_cast<size_t>(n_in) * factor);
  for (int o = 0; o < n_in * factor; ++o) {
    const double src = (o + 0.5) / factor - 0.5;
    double flo = std::floor(src);
    double frac = src - flo;
    int lo = static_cast<int>(flo);
    int hi = lo + 1;
    if (lo < 0) { lo = 0; hi = 0; frac = 0.0; }
    if (hi > n_in - 1) { hi = n_in - 1; if (lo > n_in - 1) lo = n_in - 1; }
    taps[o] = {lo, hi, frac};
  }
  return taps;
}

}  // namespace

template <class T>
TensorT<T> bilinear_upsample(const TensorT<T>& x, int factor) {
  M2H_CHECK_DIM(x.ndim() == 4, "bilinear_upsample: expected BxCxHxW");
  M2H_CHECK_DIM(factor >= 1, "bilinear_upsample: factor must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  const auto htaps = bilinear_taps(H, factor);
  const auto wtaps = bilinear_taps(W, factor);
  const auto& xd = x.data();
  std::vector<T> out(static_cast<size_t>(B) * C * Ho * Wo);
  for (int bc = 0; bc < B * C; ++bc) {
    const T* xp = xd.data() + static_cast<int64_t>(bc) * H * W;
    T* op = out.data() + static_cast<int64_t>(bc) * Ho * Wo;
    for (int oh = 0; oh < Ho; ++oh) {
      const auto& th = htaps[oh];
      const T wh = static_cast<T>(th.w_hi);
      const T* r0 = xp + static_cast<int64_t>(th.lo) * W;
      const T* r1 = xp + static_cast<int64_t>(th.hi) * W;
      for (int ow = 0; ow < Wo; ++ow) {
        const auto& tw = wtaps[ow];
        const T ww = static_cast<T>(tw.w_hi);
        const T top = r0[tw.lo] * (T(1) - ww) + r0[tw.hi] * ww;
        const T bot = r1[tw.lo] * (T(1) - ww) + r1[tw.hi] * ww;
        op[static_cast<int64_t>(oh) * Wo + ow] = top * (T(1) - wh) + bot * wh;
      }
    }
  }
  auto xi = x.impl();
  return make_op<T>({B, C, Ho, Wo}, std::move(out), {x},
                    [xi, B, C, H, W, Ho, Wo, htaps, wtaps](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      for (int bc = 0; bc < B * C; ++bc) {
                        T* gx = xi->grad.data() + static_cast<int64_t>(bc) * H * W;
                        const T* gy = self.grad.data() + static_cast<int64_t>(bc) * Ho * Wo;
                        for (int oh = 0; oh < Ho; ++oh) {
                          const auto& th = htaps[oh];
                          const T wh = static_cast<T>(th.w_hi);
                          for (int ow = 0; ow < Wo; ++ow) {
                            const auto& tw = wtaps[ow];
                            const T ww = static_cast<T>(tw.w_hi);
                            const T g = gy[static_cast<int64_t>(oh) * Wo + ow];
                            gx[static_cast<int64_t>(th.lo) * W + tw.lo] +=
                                g * (T(1) - wh) * (T(1) - ww);
                            gx[static_cast<int64_t>(th.lo) * W + tw.hi] += g * (T(1) - wh) * ww;
                            gx[static_cast<int64_t>(th.hi) * W + tw.lo] += g * wh * (T(1) - ww);
                            gx[static_cast<int64_t>(th.hi) * W + tw.hi] += g * wh * ww;
                          }
                        }
                      }
                    });
}

template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  M2H_CHECK_DIM(x.ndim() == 4, "global_avg_pool: expected BxCxHxW");
  const int B = x.dim(0), C = x.dim(1);
  const int64_t HW = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  const auto& xd = x.data();
  std::vector<T> out(static_cast<size_t>(B) * C);
  const T inv = T(1) / static_cast<T>(HW);
  for (int bc = 0; bc < B * C; ++bc) {
    const T* xp = xd.data() + static_cast<int64_t>(bc) * HW;
    T s = 0;
    for (int64_t i = 0; i < HW; ++i) s += xp[i];
    out[bc] = s * inv;
  }
  auto xi = x.impl();
  return make_op<T>({B, C}, std::move(out), {x}, [xi, B, C, HW, inv](TensorImplT<T>& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int bc = 0; bc < B * C; ++bc) {
      const T g = self.grad[bc] * inv;
      T* gx = xi->grad.data() + static_cast<int64_t>(bc) * HW;
      for (int64_t i = 0; i < HW; ++i) gx[i] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// spatial differences with replicate boundary
// ---------------------------------------------------------------------------

namespace {

template <class T>
TensorT<T> diff_impl(const TensorT<T>& x, int axis, bool forward) {
  M2H_CHECK_DIM(x.ndim() == 4, "diff: expected BxCxHxW");
  M2H_CHECK_DIM(axis == 2 || axis == 3, "diff: axis must be 2 (H) or 3 (W)");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int n = axis == 2 ? H : W;
  const int64_t step = axis == 2 ? W : 1;
  const auto& xd = x.data();
  std::vector<T> out(xd.size(), T(0));
  const int64_t planes = static_cast<int64_t>(B) * C;
  const int64_t plane_sz = static_cast<int64_t>(H) * W;
  const int lines = axis == 2 ? W : H;
  const int64_t line_stride = axis == 2 ? 1 : W;
  for (int64_t p = 0; p < planes; ++p) {
    const T* xp = xd.data() + p * plane_sz;
    T* op = out.data() + p * plane_sz;
    for (int l = 0; l < lines; ++l) {
      const int64_t base = l * line_stride;
      if (forward) {
        for (int i = 0; i + 1 < n; ++i)
          op[base + i * step] = xp[base + (i + 1) * step] - xp[base + i * step];
        // replicated boundary sample: zero difference at the trailing edge
      } else {
        for (int i = 1; i < n; ++i)
          op[base + i * step] = xp[base + i * step] - xp[base + (i - 1) * step];
      }
    }
  }
  auto xi = x.impl();
  return make_op<T>(x.shape(), std::move(out), {x},
                    [xi, planes, plane_sz, lines, line_stride, step, n,
                     forward](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      for (int64_t p = 0; p < planes; ++p) {
                        T* gx = xi->grad.data() + p * plane_sz;
                        const T* gy = self.grad.data() + p * plane_sz;
                        for (int l = 0; l < lines; ++l) {
                          const int64_t base = l * line_stride;
                          if (forward) {
                            for (int i = 0; i + 1 < n; ++i) {
                              const T g = gy[base + i * step];
                              gx[base + (i + 1) * step] += g;
                              gx[base + i * step] -= g;
                            }
                          } else {
                            for (int i = 1; i < n; ++i) {
                              const T g = gy[base + i * step];
                              gx[base + i * step] += g;
                              gx[base + (i - 1) * step] -= g;
                            }
                          }
                        }
                      }
                    });
}

}  // namespace

template <class T>
TensorT<T> diff_forward(const TensorT<T>& x, int axis) {
  return diff_impl(x, axis, true);
}

template <class T>
TensorT<T> diff_backward(const TensorT<T>& x, int axis) {
  return diff_impl(x, axis, false);
}

// ---------------------------------------------------------------------------
// fused losses
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels,
                         int ignore_index) {
  M2H_CHECK_DIM(logits.ndim() == 4, "cross_entropy: logits must be BxKxHxW");
  const int B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const int64_t P = static_cast<int64_t>(H) * W;
  M2H_CHECK_DIM(static_cast<int64_t>(labels.size()) == B * P,
                "cross_entropy: labels size ", labels.size(), " vs ", B * P, " pixels");
  for (int lab : labels) {
    if (lab == ignore_index) continue;
    if (lab < 0 || lab >= K)
      raise<DataError>("cross_entropy: label ", lab, " out of range [0, ", K, ")");
  }
  const auto& xd = logits.data();
  int64_t count = 0;
  double loss = 0.0;
  for (int b = 0; b < B; ++b)
    for (int64_t p = 0; p < P; ++p) {
      const int lab = labels[b * P + p];
      if (lab == ignore_index) continue;
      const int64_t base = static_cast<int64_t>(b) * K * P + p;
      T mx = xd[base];
      for (int k = 1; k < K; ++k) mx = std::max(mx, xd[base + k * P]);
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(xd[base + k * P] - mx));
      loss += std::log(sum) - static_cast<double>(xd[base + lab * P] - mx);
      ++count;
    }
  if (count == 0) raise<DataError>("cross_entropy: no valid labels");
  const T mean_loss = static_cast<T>(loss / static_cast<double>(count));
  auto xi = logits.impl();
  return make_op<T>({1}, {mean_loss}, {logits},
                    [xi, labels, ignore_index, B, K, P, count](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      const T g = self.grad[0] / static_cast<T>(count);
                      for (int b = 0; b < B; ++b)
                        for (int64_t p = 0; p < P; ++p) {
                          const int lab = labels[b * P + p];
                          if (lab == ignore_index) continue;
                          const int64_t base = static_cast<int64_t>(b) * K * P + p;
                          T mx = xi->data[base];
                          for (int k = 1; k < K; ++k) mx = std::max(mx, xi->data[base + k * P]);
                          T sum = 0;
                          for (int k = 0; k < K; ++k) sum += std::exp(xi->data[base + k * P] - mx);
                          const T inv = T(1) / sum;
                          for (int k = 0; k < K; ++k) {
                            const T prob = std::exp(xi->data[base + k * P] - mx) * inv;
                            xi->grad[base + k * P] += g * (prob - (k == lab ? T(1) : T(0)));
                          }
                        }
                    });
}

template <class T>
TensorT<T> huber_loss(const TensorT<T>& pred, const TensorT<T>& target,
                      const std::vector<uint8_t>& mask, T delta) {
  M2H_CHECK_DIM(shape_eq(pred.shape(), target.shape()), "huber_loss: shape mismatch");
  M2H_CHECK_DIM(mask.empty() || static_cast<int64_t>(mask.size()) == pred.numel(),
                "huber_loss: mask size mismatch");
  const auto &pd = pred.data(), &td = target.data();
  int64_t count = 0;
  double loss = 0.0;
  for (size_t i = 0; i < pd.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double r = static_cast<double>(pd[i]) - static_cast<double>(td[i]);
    const double a = std::abs(r);
    loss += a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
    ++count;
  }
  if (count == 0) raise<DataError>("huber_loss: empty valid mask");
  const T mean_loss = static_cast<T>(loss / static_cast<double>(count));
  auto pi = pred.impl(), ti = target.impl();
  return make_op<T>({1}, {mean_loss}, {pred, target},
                    [pi, ti, mask, delta, count](TensorImplT<T>& self) {
                      const T g = self.grad[0] / static_cast<T>(count);
                      const bool dp = pi->requires_grad, dt = ti->requires_grad;
                      if (dp) pi->ensure_grad();
                      if (dt) ti->ensure_grad();
                      for (size_t i = 0; i < pi->data.size(); ++i) {
                        if (!mask.empty() && !mask[i]) continue;
                        T r = pi->data[i] - ti->data[i];
                        r = std::max(-delta, std::min(delta, r));
                        if (dp) pi->grad[i] += g * r;
                        if (dt) ti->grad[i] -= g * r;
                      }
                    });
}

template <class T>
TensorT<T> bce_with_logits(const TensorT<T>& logits, const TensorT<T>& targets, T pos_weight) {
  M2H_CHECK_DIM(shape_eq(logits.shape(), targets.shape()), "bce_with_logits: shape mismatch");
  const auto &xd = logits.data(), &zd = targets.data();
  const int64_t n = logits.numel();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(xd[i]);
    const double z = static_cast<double>(zd[i]);
    // softplus(x) = log(1 + e^x), computed stably
    const double sp_pos = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    const double sp_neg = sp_pos - x;  // softplus(-x) == softplus(x) - x
    loss += static_cast<double>(pos_weight) * z * sp_neg + (1.0 - z) * sp_pos;
  }
  const T mean_loss = static_cast<T>(loss / static_cast<double>(n));
  auto xi = logits.impl(), zi = targets.impl();
  return make_op<T>({1}, {mean_loss}, {logits, targets},
                    [xi, zi, pos_weight, n](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      const T g = self.grad[0] / static_cast<T>(n);
                      for (int64_t i = 0; i < n; ++i) {
                        const T x = xi->data[i];
                        const T z = zi->data[i];
                        T s;
                        if (x >= T(0)) s = T(1) / (T(1) + std::exp(-x));
                        else {
                          const T e = std::exp(x);
                          s = e / (T(1) + e);
                        }
                        xi->grad[i] += g * ((T(1) - z) * s - pos_weight * z * (T(1) - s));
                      }
                    });
}

// ---------------------------------------------------------------------------
// backward driver
// ---------------------------------------------------------------------------

template <class T>
void backward(const TensorT<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    raise<UsageError>("backward: loss must be a defined scalar tensor");
  auto* root = loss.impl().get();
  if (!root->requires_grad)
    raise<UsageError>("backward: loss does not require grad (no recorded graph)");

  // The node list holds owning pointers: clearing parent links below must not
  // free a node that is still awaiting its own cleanup.
  std::vector<std::shared_ptr<TensorImplT<T>>> nodes;
  std::unordered_set<TensorImplT<T>*> visited;
  std::vector<std::shared_ptr<TensorImplT<T>>> stack{loss.impl()};
  visited.insert(root);
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents)
      if (visited.insert(p.get()).second) stack.push_back(p);
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const std::shared_ptr<TensorImplT<T>>& a,
               const std::shared_ptr<TensorImplT<T>>& b) { return a->seq > b->seq; });

  root->ensure_grad();
  root->grad[0] = T(1);
  for (const auto& n : nodes) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Clear the tape: closures and parent links go away, intermediate grads are
  // released, leaf grads stay for the optimizer.
  for (const auto& n : nodes) {
    n->backward_fn = nullptr;
    n->parents.clear();
    if (!n->is_leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <class T>
bool all_finite(const TensorT<T>& x) {
  for (T v : x.data())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define M2H_INSTANTIATE_NN(T)                                                                  \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, \
                                int, int);                                                     \
  template TensorT<T> conv_transpose2d<T>(const TensorT<T>&, const TensorT<T>&,               \
                                          const TensorT<T>&, int);                            \
  template TensorT<T> bilinear_upsample<T>(const TensorT<T>&, int);                           \
  template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                                  \
  template TensorT<T> diff_forward<T>(const TensorT<T>&, int);                                \
  template TensorT<T> diff_backward<T>(const TensorT<T>&, int);                               \
  template TensorT<T> cross_entropy<T>(const TensorT<T>&, const std::vector<int>&, int);      \
  template TensorT<T> huber_loss<T>(const TensorT<T>&, const TensorT<T>&,                     \
                                    const std::vector<uint8_t>&, T);                          \
  template TensorT<T> bce_with_logits<T>(const TensorT<T>&, const TensorT<T>&, T);            \
  template void backward<T>(const TensorT<T>&);                                               \
  template bool all_finite<T>(const TensorT<T>&);

M2H_INSTANTIATE_NN(float)
M2H_INSTANTIATE_NN(double)

}  // namespace m2h
