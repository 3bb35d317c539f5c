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

#include "m2h/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "tensor_detail.hpp"

namespace m2h {

uint64_t& detail::seq_counter() {
  thread_local uint64_t c = 0;
  return c;
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

MacCounter& MacCounter::instance() {
  thread_local MacCounter counter;
  return counter;
}

bool& grad_mode() {
  thread_local bool mode = true;
  return mode;
}

using detail::check_same_shape;
using detail::for_each_index;
using detail::make_impl;
using detail::make_op;
using detail::row_major_strides;
using detail::unary_op;

// ---------------------------------------------------------------------------
// creation
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> TensorT<T>::zeros(const Shape& shape) {
  return TensorT(make_impl<T>(shape, std::vector<T>(shape_numel(shape), T(0))));
}

template <class T>
TensorT<T> TensorT<T>::full(const Shape& shape, T value) {
  return TensorT(make_impl<T>(shape, std::vector<T>(shape_numel(shape), value)));
}

template <class T>
TensorT<T> TensorT<T>::from(const Shape& shape, std::vector<T> values) {
  return TensorT(make_impl<T>(shape, std::move(values)));
}

template <class T>
TensorT<T> randn_tensor(Rng& rng, const Shape& shape, double stddev, double mean) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(mean, stddev));
  return TensorT<T>::from(shape, std::move(v));
}

template <class T>
TensorT<T> uniform_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return TensorT<T>::from(shape, std::move(v));
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "add");
  const auto &ad = a.data(), &bd = b.data();
  std::vector<T> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i];
  auto ai = a.impl(), bi = b.impl();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImplT<T>& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
    }
  });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "sub");
  const auto &ad = a.data(), &bd = b.data();
  std::vector<T> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i];
  auto ai = a.impl(), bi = b.impl();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImplT<T>& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
    }
  });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "mul");
  const auto &ad = a.data(), &bd = b.data();
  std::vector<T> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
  auto ai = a.impl(), bi = b.impl();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImplT<T>& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ai->data[i];
    }
  });
}

template <class T>
TensorT<T> divt(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "div");
  const auto &ad = a.data(), &bd = b.data();
  std::vector<T> out(ad.size());
  for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] / bd[i];
  auto ai = a.impl(), bi = b.impl();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImplT<T>& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] / bi->data[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        bi->grad[i] -= self.grad[i] * self.data[i] / bi->data[i];
    }
  });
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  return unary_op(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
TensorT<T> add_const(const TensorT<T>& x, T c) {
  return unary_op(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  return unary_op(x, [](T v) { return v > T(0) ? v : T(0); },
                  [](T xv, T) { return xv > T(0) ? T(1) : T(0); });
}

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(
      x,
      [](T v) {
        return static_cast<T>(0.5 * static_cast<double>(v) *
                              (1.0 + std::erf(static_cast<double>(v) * kInvSqrt2)));
      },
      [](T xv, T) {
        const double v = static_cast<double>(xv);
        return static_cast<T>(0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
                              v * std::exp(-0.5 * v * v) * kInvSqrt2Pi);
      });
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return unary_op(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
TensorT<T> softplus(const TensorT<T>& x) {
  return unary_op(
      x,
      [](T v) {
        if (v > T(0)) return v + std::log1p(std::exp(-v));
        return static_cast<T>(std::log1p(std::exp(v)));
      },
      [](T xv, T) {
        if (xv >= T(0)) return T(1) / (T(1) + std::exp(-xv));
        const T e = std::exp(xv);
        return e / (T(1) + e);
      });
}

template <class T>
TensorT<T> logt(const TensorT<T>& x) {
  for (T v : x.data())
    if (!(v > T(0))) raise<DomainError>("log of non-positive value ", v);
  return unary_op(x, [](T v) { return std::log(v); }, [](T xv, T) { return T(1) / xv; });
}

template <class T>
TensorT<T> expt(const TensorT<T>& x) {
  return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
TensorT<T> abst(const TensorT<T>& x) {
  return unary_op(x, [](T v) { return std::abs(v); },
                  [](T xv, T) { return xv > T(0) ? T(1) : (xv < T(0) ? T(-1) : T(0)); });
}

template <class T>
TensorT<T> sqrtt(const TensorT<T>& x) {
  for (T v : x.data())
    if (v < T(0)) raise<DomainError>("sqrt of negative value ", v);
  return unary_op(x, [](T v) { return std::sqrt(v); },
                  [](T, T y) { return T(0.5) / y; });
}

template <class T>
TensorT<T> rsqrtt(const TensorT<T>& x) {
  for (T v : x.data())
    if (!(v > T(0))) raise<DomainError>("rsqrt of non-positive value ", v);
  return unary_op(x, [](T v) { return T(1) / std::sqrt(v); },
                  [](T xv, T y) { return T(-0.5) * y / xv; });
}

template <class T>
TensorT<T> minimum_const(const TensorT<T>& x, T c) {
  return unary_op(x, [c](T v) { return v < c ? v : c; },
                  [c](T xv, T) { return xv < c ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto xi = x.impl();
  return make_op<T>({1}, {s}, {x}, [xi](TensorImplT<T>& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const T g = self.grad[0];
    for (auto& gv : xi->grad) gv += g;
  });
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  const T inv = T(1) / static_cast<T>(x.numel());
  T s = 0;
  for (T v : x.data()) s += v;
  auto xi = x.impl();
  return make_op<T>({1}, {s * inv}, {x}, [xi, inv](TensorImplT<T>& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const T g = self.grad[0] * inv;
    for (auto& gv : xi->grad) gv += g;
  });
}

template <class T>
TensorT<T> sum_axes(const TensorT<T>& x, const std::vector<int>& axes, bool keepdim) {
  const int nd = x.ndim();
  std::vector<bool> reduce(nd, false);
  for (int a : axes) {
    int ax = a < 0 ? nd + a : a;
    M2H_CHECK_DIM(ax >= 0 && ax < nd, "sum_axes: axis ", a, " out of range for ",
                  shape_str(x.shape()));
    reduce[ax] = true;
  }
  Shape out_shape;
  for (int d = 0; d < nd; ++d) {
    if (!reduce[d]) out_shape.push_back(x.dim(d));
    else if (keepdim) out_shape.push_back(1);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Per input dim, the stride of the output it maps onto (0 when reduced).
  Shape full_out(nd);
  for (int d = 0; d < nd; ++d) full_out[d] = reduce[d] ? 1 : x.dim(d);
  auto out_strides_full = row_major_strides(full_out);
  std::vector<int64_t> map_strides(nd);
  for (int d = 0; d < nd; ++d) map_strides[d] = reduce[d] ? 0 : out_strides_full[d];

  std::vector<T> out(shape_numel(out_shape), T(0));
  const auto& xd = x.data();
  for_each_index(x.shape(), map_strides,
                 [&](int64_t lin, int64_t off) { out[off] += xd[lin]; });
  auto xi = x.impl();
  Shape in_shape = x.shape();
  return make_op<T>(out_shape, std::move(out), {x},
                    [xi, in_shape, map_strides](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      for_each_index(in_shape, map_strides, [&](int64_t lin, int64_t off) {
                        xi->grad[lin] += self.grad[off];
                      });
                    });
}

// ---------------------------------------------------------------------------
// shape / movement
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> reshape(const TensorT<T>& x, const Shape& shape) {
  M2H_CHECK_DIM(shape_numel(shape) == x.numel(), "reshape: cannot view ", shape_str(x.shape()),
                " as ", shape_str(shape));
  auto xi = x.impl();
  return make_op<T>(shape, x.data(), {x}, [xi](TensorImplT<T>& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
  });
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  M2H_CHECK_DIM(static_cast<int>(perm.size()) == nd, "permute: rank mismatch");
  std::vector<bool> seen(nd, false);
  Shape out_shape(nd);
  for (int d = 0; d < nd; ++d) {
    M2H_CHECK_DIM(perm[d] >= 0 && perm[d] < nd && !seen[perm[d]], "permute: bad permutation");
    seen[perm[d]] = true;
    out_shape[d] = x.dim(perm[d]);
  }
  auto in_strides = row_major_strides(x.shape());
  std::vector<int64_t> gather_strides(nd);
  for (int d = 0; d < nd; ++d) gather_strides[d] = in_strides[perm[d]];

  std::vector<T> out(x.numel());
  const auto& xd = x.data();
  for_each_index(out_shape, gather_strides,
                 [&](int64_t lin, int64_t off) { out[lin] = xd[off]; });
  auto xi = x.impl();
  return make_op<T>(out_shape, std::move(out), {x},
                    [xi, out_shape, gather_strides](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      for_each_index(out_shape, gather_strides, [&](int64_t lin, int64_t off) {
                        xi->grad[off] += self.grad[lin];
                      });
                    });
}

template <class T>
TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len) {
  const int nd = x.ndim();
  int ax = axis < 0 ? nd + axis : axis;
  M2H_CHECK_DIM(ax >= 0 && ax < nd, "slice: axis out of range");
  M2H_CHECK_DIM(start >= 0 && len >= 0 && start + len <= x.dim(ax), "slice: range [", start,
                ", ", start + len, ") exceeds dim ", x.dim(ax));
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  auto in_strides = row_major_strides(x.shape());
  const int64_t base = in_strides[ax] * start;

  std::vector<T> out(shape_numel(out_shape));
  const auto& xd = x.data();
  for_each_index(out_shape, in_strides,
                 [&](int64_t lin, int64_t off) { out[lin] = xd[base + off]; });
  auto xi = x.impl();
  return make_op<T>(out_shape, std::move(out), {x},
                    [xi, out_shape, in_strides, base](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      for_each_index(out_shape, in_strides, [&](int64_t lin, int64_t off) {
                        xi->grad[base + off] += self.grad[lin];
                      });
                    });
}

template <class T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis) {
  M2H_CHECK_DIM(!xs.empty(), "concat: no inputs");
  const int nd = xs[0].ndim();
  int ax = axis < 0 ? nd + axis : axis;
  M2H_CHECK_DIM(ax >= 0 && ax < nd, "concat: axis out of range");
  Shape out_shape = xs[0].shape();
  int total = 0;
  for (const auto& x : xs) {
    M2H_CHECK_DIM(x.ndim() == nd, "concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != ax)
        M2H_CHECK_DIM(x.dim(d) == out_shape[d], "concat: shape mismatch at input");
    total += x.dim(ax);
  }
  out_shape[ax] = total;
  auto out_strides = row_major_strides(out_shape);

  std::vector<T> out(shape_numel(out_shape));
  std::vector<int64_t> bases(xs.size());
  int run = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    bases[i] = out_strides[ax] * run;
    run += xs[i].dim(ax);
    const auto& xd = xs[i].data();
    for_each_index(xs[i].shape(), out_strides,
                   [&](int64_t lin, int64_t off) { out[bases[i] + off] = xd[lin]; });
  }
  std::vector<std::shared_ptr<TensorImplT<T>>> impls;
  std::vector<Shape> shapes;
  for (const auto& x : xs) {
    impls.push_back(x.impl());
    shapes.push_back(x.shape());
  }
  return make_op<T>(out_shape, std::move(out), xs,
                    [impls, shapes, bases, out_strides](TensorImplT<T>& self) {
                      for (size_t i = 0; i < impls.size(); ++i) {
                        if (!impls[i]->requires_grad) continue;
                        impls[i]->ensure_grad();
                        auto& g = impls[i]->grad;
                        for_each_index(shapes[i], out_strides, [&](int64_t lin, int64_t off) {
                          g[lin] += self.grad[bases[i] + off];
                        });
                      }
                    });
}

template <class T>
TensorT<T> pad2d(const TensorT<T>& x, int top, int bottom, int left, int right) {
  M2H_CHECK_DIM(x.ndim() == 4, "pad2d: expected BxCxHxW, got ", shape_str(x.shape()));
  M2H_CHECK_DIM(top >= 0 && bottom >= 0 && left >= 0 && right >= 0, "pad2d: negative padding");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int H2 = H + top + bottom, W2 = W + left + right;
  std::vector<T> out(static_cast<size_t>(B) * C * H2 * W2, T(0));
  const auto& xd = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h) {
        const int64_t src = ((static_cast<int64_t>(b) * C + c) * H + h) * W;
        const int64_t dst = ((static_cast<int64_t>(b) * C + c) * H2 + (h + top)) * W2 + left;
        std::copy(xd.begin() + src, xd.begin() + src + W, out.begin() + dst);
      }
  auto xi = x.impl();
  return make_op<T>({B, C, H2, W2}, std::move(out), {x},
                    [xi, B, C, H, W, H2, W2, top, left](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      for (int b = 0; b < B; ++b)
                        for (int c = 0; c < C; ++c)
                          for (int h = 0; h < H; ++h) {
                            const int64_t src =
                                ((static_cast<int64_t>(b) * C + c) * H + h) * W;
                            const int64_t dst =
                                ((static_cast<int64_t>(b) * C + c) * H2 + (h + top)) * W2 + left;
                            for (int w = 0; w < W; ++w) xi->grad[src + w] += self.grad[dst + w];
                          }
                    });
}

template <class T>
TensorT<T> crop2d(const TensorT<T>& x, int top, int left, int h, int w) {
  M2H_CHECK_DIM(x.ndim() == 4, "crop2d: expected BxCxHxW");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  M2H_CHECK_DIM(top >= 0 && left >= 0 && top + h <= H && left + w <= W,
                "crop2d: window out of bounds");
  std::vector<T> out(static_cast<size_t>(B) * C * h * w);
  const auto& xd = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < h; ++r) {
        const int64_t src = ((static_cast<int64_t>(b) * C + c) * H + (r + top)) * W + left;
        const int64_t dst = ((static_cast<int64_t>(b) * C + c) * h + r) * w;
        std::copy(xd.begin() + src, xd.begin() + src + w, out.begin() + dst);
      }
  auto xi = x.impl();
  return make_op<T>({B, C, h, w}, std::move(out), {x},
                    [xi, B, C, H, W, h, w, top, left](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      for (int b = 0; b < B; ++b)
                        for (int c = 0; c < C; ++c)
                          for (int r = 0; r < h; ++r) {
                            const int64_t src =
                                ((static_cast<int64_t>(b) * C + c) * H + (r + top)) * W + left;
                            const int64_t dst = ((static_cast<int64_t>(b) * C + c) * h + r) * w;
                            for (int cw = 0; cw < w; ++cw)
                              xi->grad[src + cw] += self.grad[dst + cw];
                          }
                    });
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add_bias_lastdim(const TensorT<T>& x, const TensorT<T>& b) {
  const int nd = x.ndim();
  const int D = x.dim(nd - 1);
  M2H_CHECK_DIM(b.ndim() == 1 && b.dim(0) == D, "add_bias_lastdim: bias shape ",
                shape_str(b.shape()), " vs feature dim ", D);
  const auto &xd = x.data(), &bd = b.data();
  std::vector<T> out(xd.size());
  const int64_t rows = x.numel() / D;
  for (int64_t r = 0; r < rows; ++r)
    for (int d = 0; d < D; ++d) out[r * D + d] = xd[r * D + d] + bd[d];
  auto xi = x.impl(), bi = b.impl();
  return make_op<T>(x.shape(), std::move(out), {x, b}, [xi, bi, rows, D](TensorImplT<T>& self) {
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int d = 0; d < D; ++d) bi->grad[d] += self.grad[r * D + d];
    }
  });
}

template <class T>
TensorT<T> add_bias_channel(const TensorT<T>& x, const TensorT<T>& b) {
  M2H_CHECK_DIM(x.ndim() == 4, "add_bias_channel: expected BxCxHxW");
  const int B = x.dim(0), C = x.dim(1);
  const int64_t HW = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  M2H_CHECK_DIM(b.ndim() == 1 && b.dim(0) == C, "add_bias_channel: bias shape mismatch");
  const auto &xd = x.data(), &bd = b.data();
  std::vector<T> out(xd.size());
  for (int bi_ = 0; bi_ < B; ++bi_)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (static_cast<int64_t>(bi_) * C + c) * HW;
      const T bv = bd[c];
      for (int64_t i = 0; i < HW; ++i) out[base + i] = xd[base + i] + bv;
    }
  auto xi = x.impl(), bimpl = b.impl();
  return make_op<T>(x.shape(), std::move(out), {x, b},
                    [xi, bimpl, B, C, HW](TensorImplT<T>& self) {
                      if (xi->requires_grad) {
                        xi->ensure_grad();
                        for (size_t i = 0; i < self.grad.size(); ++i)
                          xi->grad[i] += self.grad[i];
                      }
                      if (bimpl->requires_grad) {
                        bimpl->ensure_grad();
                        for (int b_ = 0; b_ < B; ++b_)
                          for (int c = 0; c < C; ++c) {
                            const int64_t base = (static_cast<int64_t>(b_) * C + c) * HW;
                            T s = 0;
                            for (int64_t i = 0; i < HW; ++i) s += self.grad[base + i];
                            bimpl->grad[c] += s;
                          }
                      }
                    });
}

template <class T>
TensorT<T> mul_channel_gate(const TensorT<T>& x, const TensorT<T>& g) {
  M2H_CHECK_DIM(x.ndim() == 4, "mul_channel_gate: expected BxCxHxW");
  const int B = x.dim(0), C = x.dim(1);
  const int64_t HW = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  M2H_CHECK_DIM(g.ndim() == 2 && g.dim(0) == B && g.dim(1) == C,
                "mul_channel_gate: gate shape ", shape_str(g.shape()), " vs BxC");
  const auto &xd = x.data(), &gd = g.data();
  std::vector<T> out(xd.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (static_cast<int64_t>(b) * C + c) * HW;
      const T gv = gd[b * C + c];
      for (int64_t i = 0; i < HW; ++i) out[base + i] = xd[base + i] * gv;
    }
  auto xi = x.impl(), gi = g.impl();
  return make_op<T>(x.shape(), std::move(out), {x, g}, [xi, gi, B, C, HW](TensorImplT<T>& self) {
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const int64_t base = (static_cast<int64_t>(b) * C + c) * HW;
        const T gv = gi->data[b * C + c];
        if (xi->requires_grad) {
          xi->ensure_grad();
          for (int64_t i = 0; i < HW; ++i) xi->grad[base + i] += self.grad[base + i] * gv;
        }
        if (gi->requires_grad) {
          gi->ensure_grad();
          T s = 0;
          for (int64_t i = 0; i < HW; ++i) s += self.grad[base + i] * xi->data[base + i];
          gi->grad[b * C + c] += s;
        }
      }
  });
}

template <class T>
TensorT<T> mul_bcast_channel(const TensorT<T>& x, const TensorT<T>& m) {
  M2H_CHECK_DIM(x.ndim() == 4 && m.ndim() == 4, "mul_bcast_channel: expected 4-d tensors");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  M2H_CHECK_DIM(m.dim(0) == B && m.dim(1) == 1 && m.dim(2) == H && m.dim(3) == W,
                "mul_bcast_channel: map shape ", shape_str(m.shape()));
  const int64_t HW = static_cast<int64_t>(H) * W;
  const auto &xd = x.data(), &md = m.data();
  std::vector<T> out(xd.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const int64_t xbase = (static_cast<int64_t>(b) * C + c) * HW;
      const int64_t mbase = static_cast<int64_t>(b) * HW;
      for (int64_t i = 0; i < HW; ++i) out[xbase + i] = xd[xbase + i] * md[mbase + i];
    }
  auto xi = x.impl(), mi = m.impl();
  return make_op<T>(x.shape(), std::move(out), {x, m},
                    [xi, mi, B, C, HW](TensorImplT<T>& self) {
                      for (int b = 0; b < B; ++b) {
                        const int64_t mbase = static_cast<int64_t>(b) * HW;
                        for (int c = 0; c < C; ++c) {
                          const int64_t xbase = (static_cast<int64_t>(b) * C + c) * HW;
                          if (xi->requires_grad) {
                            xi->ensure_grad();
                            for (int64_t i = 0; i < HW; ++i)
                              xi->grad[xbase + i] += self.grad[xbase + i] * mi->data[mbase + i];
                          }
                          if (mi->requires_grad) {
                            mi->ensure_grad();
                            for (int64_t i = 0; i < HW; ++i)
                              mi->grad[mbase + i] += self.grad[xbase + i] * xi->data[xbase + i];
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// matmul / bmm
// ---------------------------------------------------------------------------

namespace {

// C[M,N] += op(A) * op(B) on one contiguous slice.
// A is [K,M] when ta else [M,K]; B is [N,K] when tb else [K,N].
template <class T>
void gemm_acc(bool ta, bool tb, int M, int N, int K, const T* A, const T* B, T* C) {
  if (!ta && !tb) {
    for (int m = 0; m < M; ++m) {
      T* crow = C + static_cast<int64_t>(m) * N;
      const T* arow = A + static_cast<int64_t>(m) * K;
      for (int k = 0; k < K; ++k) {
        const T a = arow[k];
        const T* brow = B + static_cast<int64_t>(k) * N;
        for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
      }
    }
  } else if (!ta && tb) {
    for (int m = 0; m < M; ++m) {
      const T* arow = A + static_cast<int64_t>(m) * K;
      T* crow = C + static_cast<int64_t>(m) * N;
      for (int n = 0; n < N; ++n) {
        const T* brow = B + static_cast<int64_t>(n) * K;
        T acc = 0;
        for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
        crow[n] += acc;
      }
    }
  } else if (ta && !tb) {
    for (int k = 0; k < K; ++k) {
      const T* arow = A + static_cast<int64_t>(k) * M;
      const T* brow = B + static_cast<int64_t>(k) * N;
      for (int m = 0; m < M; ++m) {
        const T a = arow[m];
        T* crow = C + static_cast<int64_t>(m) * N;
        for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
      }
    }
  } else {
    for (int m = 0; m < M; ++m) {
      T* crow = C + static_cast<int64_t>(m) * N;
      for (int n = 0; n < N; ++n) {
        const T* brow = B + static_cast<int64_t>(n) * K;
        T acc = 0;
        for (int k = 0; k < K; ++k) acc += A[static_cast<int64_t>(k) * M + m] * brow[k];
        crow[n] += acc;
      }
    }
  }
}

template <class T>
TensorT<T> bmm_impl(const TensorT<T>& a, const TensorT<T>& b, bool ta, bool tb, MacKind kind,
                    bool batched) {
  int batch = 1;
  int ar, ac, br, bc;
  if (batched) {
    M2H_CHECK_DIM(a.ndim() == 3 && b.ndim() == 3, "bmm: expected 3-d tensors, got ",
                  shape_str(a.shape()), " and ", shape_str(b.shape()));
    M2H_CHECK_DIM(a.dim(0) == b.dim(0), "bmm: batch mismatch ", a.dim(0), " vs ", b.dim(0));
    batch = a.dim(0);
    ar = a.dim(1); ac = a.dim(2); br = b.dim(1); bc = b.dim(2);
  } else {
    M2H_CHECK_DIM(a.ndim() == 2 && b.ndim() == 2, "matmul: expected 2-d tensors, got ",
                  shape_str(a.shape()), " and ", shape_str(b.shape()));
    ar = a.dim(0); ac = a.dim(1); br = b.dim(0); bc = b.dim(1);
  }
  const int M = ta ? ac : ar;
  const int Ka = ta ? ar : ac;
  const int Kb = tb ? bc : br;
  const int N = tb ? br : bc;
  M2H_CHECK_DIM(Ka == Kb, "matmul: inner dimensions disagree (", Ka, " vs ", Kb, ") for ",
                shape_str(a.shape()), " x ", shape_str(b.shape()));
  const int K = Ka;

  auto& mc = MacCounter::instance();
  if (mc.enabled)
    mc.add(kind, static_cast<uint64_t>(batch) * M * N * K);

  const int64_t a_slice = static_cast<int64_t>(ar) * ac;
  const int64_t b_slice = static_cast<int64_t>(br) * bc;
  const int64_t c_slice = static_cast<int64_t>(M) * N;
  std::vector<T> out(static_cast<size_t>(batch) * c_slice, T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (int s = 0; s < batch; ++s)
    gemm_acc(ta, tb, M, N, K, ad + s * a_slice, bd + s * b_slice, out.data() + s * c_slice);

  Shape out_shape = batched ? Shape{batch, M, N} : Shape{M, N};
  auto ai = a.impl(), bi = b.impl();
  return make_op<T>(out_shape, std::move(out), {a, b},
                    [ai, bi, ta, tb, M, N, K, batch, a_slice, b_slice, c_slice,
                     kind](TensorImplT<T>& self) {
                      auto& mc2 = MacCounter::instance();
                      for (int s = 0; s < batch; ++s) {
                        const T* dC = self.grad.data() + s * c_slice;
                        const T* A = ai->data.data() + s * a_slice;
                        const T* B = bi->data.data() + s * b_slice;
                        if (ai->requires_grad) {
                          ai->ensure_grad();
                          T* dA = ai->grad.data() + s * a_slice;
                          if (mc2.enabled)
                            mc2.add(kind, static_cast<uint64_t>(M) * N * K);
                          if (!ta) {
                            // dA[M,K]
                            if (!tb) gemm_acc<T>(false, true, M, K, N, dC, B, dA);
                            else gemm_acc<T>(false, false, M, K, N, dC, B, dA);
                          } else {
                            // dA[K,M]
                            if (!tb) gemm_acc<T>(false, true, K, M, N, B, dC, dA);
                            else gemm_acc<T>(true, true, K, M, N, B, dC, dA);
                          }
                        }
                        if (bi->requires_grad) {
                          bi->ensure_grad();
                          T* dB = bi->grad.data() + s * b_slice;
                          if (mc2.enabled)
                            mc2.add(kind, static_cast<uint64_t>(M) * N * K);
                          if (!tb) {
                            // dB[K,N]
                            if (!ta) gemm_acc<T>(true, false, K, N, M, A, dC, dB);
                            else gemm_acc<T>(false, false, K, N, M, A, dC, dB);
                          } else {
                            // dB[N,K]
                            if (!ta) gemm_acc<T>(true, false, N, K, M, dC, A, dB);
                            else gemm_acc<T>(true, true, N, K, M, dC, A, dB);
                          }
                        }
                      }
                    });
}

}  // namespace

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  return bmm_impl(a, b, false, false, MacKind::kOther, false);
}

template <class T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool trans_a, bool trans_b,
               MacKind mac_kind) {
  return bmm_impl(a, b, trans_a, trans_b, mac_kind, true);
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  const int nd = x.ndim();
  int ax = axis < 0 ? nd + axis : axis;
  M2H_CHECK_DIM(ax >= 0 && ax < nd, "softmax: axis out of range");
  const int n = x.dim(ax);
  int64_t inner = 1, outer = 1;
  for (int d = ax + 1; d < nd; ++d) inner *= x.dim(d);
  for (int d = 0; d < ax; ++d) outer *= x.dim(d);

  const auto& xd = x.data();
  std::vector<T> out(xd.size());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * n * inner + i;
      T mx = xd[base];
      for (int k = 1; k < n; ++k) mx = std::max(mx, xd[base + k * inner]);
      T sum = 0;
      for (int k = 0; k < n; ++k) {
        const T e = std::exp(xd[base + k * inner] - mx);
        out[base + k * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int k = 0; k < n; ++k) out[base + k * inner] *= inv;
    }
  auto xi = x.impl();
  return make_op<T>(x.shape(), std::move(out), {x},
                    [xi, n, inner, outer](TensorImplT<T>& self) {
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      for (int64_t o = 0; o < outer; ++o)
                        for (int64_t i = 0; i < inner; ++i) {
                          const int64_t base = o * n * inner + i;
                          T dot = 0;
                          for (int k = 0; k < n; ++k)
                            dot += self.grad[base + k * inner] * self.data[base + k * inner];
                          for (int k = 0; k < n; ++k) {
                            const int64_t ix = base + k * inner;
                            xi->grad[ix] += self.data[ix] * (self.grad[ix] - dot);
                          }
                        }
                    });
}

namespace {

template <class T>
TensorT<T> layer_norm_lastdim(const TensorT<T>& x, const TensorT<T>& gamma,
                              const TensorT<T>& beta, T eps) {
  const int nd = x.ndim();
  const int D = x.dim(nd - 1);
  M2H_CHECK_DIM(gamma.ndim() == 1 && gamma.dim(0) == D && beta.ndim() == 1 && beta.dim(0) == D,
                "layer_norm: affine parameter shape mismatch for feature dim ", D);
  const int64_t rows = x.numel() / D;
  const auto &xd = x.data(), &gd = gamma.data(), &bd = beta.data();
  std::vector<T> out(xd.size());
  std::vector<T> mu(rows), inv_std(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * D;
    T m = 0;
    for (int d = 0; d < D; ++d) m += row[d];
    m /= static_cast<T>(D);
    T var = 0;
    for (int d = 0; d < D; ++d) {
      const T c = row[d] - m;
      var += c * c;
    }
    var /= static_cast<T>(D);
    const T inv = T(1) / std::sqrt(var + eps);
    mu[r] = m;
    inv_std[r] = inv;
    T* orow = out.data() + r * D;
    for (int d = 0; d < D; ++d) orow[d] = (row[d] - m) * inv * gd[d] + bd[d];
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xi, gi, bi, rows, D, mu = std::move(mu), inv_std = std::move(inv_std)](
          TensorImplT<T>& self) {
        for (int64_t r = 0; r < rows; ++r) {
          const T* xrow = xi->data.data() + r * D;
          const T* grow = self.grad.data() + r * D;
          const T m = mu[r], inv = inv_std[r];
          if (gi->requires_grad || bi->requires_grad) {
            if (gi->requires_grad) gi->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            for (int d = 0; d < D; ++d) {
              const T xhat = (xrow[d] - m) * inv;
              if (gi->requires_grad) gi->grad[d] += grow[d] * xhat;
              if (bi->requires_grad) bi->grad[d] += grow[d];
            }
          }
          if (xi->requires_grad) {
            xi->ensure_grad();
            T m1 = 0, m2 = 0;
            for (int d = 0; d < D; ++d) {
              const T dxhat = grow[d] * gi->data[d];
              const T xhat = (xrow[d] - m) * inv;
              m1 += dxhat;
              m2 += dxhat * xhat;
            }
            m1 /= static_cast<T>(D);
            m2 /= static_cast<T>(D);
            T* xg = xi->grad.data() + r * D;
            for (int d = 0; d < D; ++d) {
              const T dxhat = grow[d] * gi->data[d];
              const T xhat = (xrow[d] - m) * inv;
              xg[d] += inv * (dxhat - m1 - xhat * m2);
            }
          }
        }
      });
}

}  // namespace

template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps, int axis) {
  const int nd = x.ndim();
  int ax = axis < 0 ? nd + axis : axis;
  M2H_CHECK_DIM(ax >= 0 && ax < nd, "layer_norm: axis out of range");
  if (ax == nd - 1) return layer_norm_lastdim(x, gamma, beta, eps);
  std::vector<int> perm, inv(nd);
  for (int d = 0; d < nd; ++d)
    if (d != ax) perm.push_back(d);
  perm.push_back(ax);
  for (int d = 0; d < nd; ++d) inv[perm[d]] = d;
  auto y = layer_norm_lastdim(permute(x, perm), gamma, beta, eps);
  return permute(y, inv);
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define M2H_INSTANTIATE_CORE(T)                                                               \
  template class TensorT<T>;                                                                  \
  template TensorT<T> randn_tensor<T>(Rng&, const Shape&, double, double);                    \
  template TensorT<T> uniform_tensor<T>(Rng&, const Shape&, double, double);                  \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                           \
  template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                           \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                           \
  template TensorT<T> divt<T>(const TensorT<T>&, const TensorT<T>&);                          \
  template TensorT<T> scale<T>(const TensorT<T>&, T);                                         \
  template TensorT<T> add_const<T>(const TensorT<T>&, T);                                     \
  template TensorT<T> relu<T>(const TensorT<T>&);                                             \
  template TensorT<T> gelu<T>(const TensorT<T>&);                                             \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                                          \
  template TensorT<T> softplus<T>(const TensorT<T>&);                                         \
  template TensorT<T> logt<T>(const TensorT<T>&);                                             \
  template TensorT<T> expt<T>(const TensorT<T>&);                                             \
  template TensorT<T> abst<T>(const TensorT<T>&);                                             \
  template TensorT<T> sqrtt<T>(const TensorT<T>&);                                            \
  template TensorT<T> rsqrtt<T>(const TensorT<T>&);                                           \
  template TensorT<T> minimum_const<T>(const TensorT<T>&, T);                                 \
  template TensorT<T> sum_all<T>(const TensorT<T>&);                                          \
  template TensorT<T> mean_all<T>(const TensorT<T>&);                                         \
  template TensorT<T> sum_axes<T>(const TensorT<T>&, const std::vector<int>&, bool);          \
  template TensorT<T> reshape<T>(const TensorT<T>&, const Shape&);                            \
  template TensorT<T> permute<T>(const TensorT<T>&, const std::vector<int>&);                 \
  template TensorT<T> slice<T>(const TensorT<T>&, int, int, int);                             \
  template TensorT<T> concat<T>(const std::vector<TensorT<T>>&, int);                         \
  template TensorT<T> pad2d<T>(const TensorT<T>&, int, int, int, int);                        \
  template TensorT<T> crop2d<T>(const TensorT<T>&, int, int, int, int);                       \
  template TensorT<T> add_bias_lastdim<T>(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> add_bias_channel<T>(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> mul_channel_gate<T>(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> mul_bcast_channel<T>(const TensorT<T>&, const TensorT<T>&);             \
  template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                        \
  template TensorT<T> bmm<T>(const TensorT<T>&, const TensorT<T>&, bool, bool, MacKind);      \
  template TensorT<T> softmax<T>(const TensorT<T>&, int);                                     \
  template TensorT<T> layer_norm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, \
                                    T, int);

M2H_INSTANTIATE_CORE(float)
M2H_INSTANTIATE_CORE(double)

}  // namespace m2h
