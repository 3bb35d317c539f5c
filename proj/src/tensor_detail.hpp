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

// Internal helpers shared by the tensor translation units. Not installed.

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "m2h/tensor.hpp"

namespace m2h::detail {

uint64_t& seq_counter();

template <class T>
std::shared_ptr<TensorImplT<T>> make_impl(Shape shape, std::vector<T> data) {
  auto impl = std::make_shared<TensorImplT<T>>();
  M2H_CHECK_DIM(shape_numel(shape) == static_cast<int64_t>(data.size()),
                "tensor data size ", data.size(), " does not match shape ", shape_str(shape));
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

// Builds an op result node. When grad mode is on and any parent requires
// grad, the node is recorded on the tape with its backward closure.
template <class T>
TensorT<T> make_op(Shape shape, std::vector<T> data, const std::vector<TensorT<T>>& parents,
                   std::function<void(TensorImplT<T>&)> backward_fn) {
  auto impl = make_impl(std::move(shape), std::move(data));
  bool needs_grad = false;
  if (grad_mode()) {
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  if (needs_grad) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    impl->seq = ++seq_counter();
    impl->parents.reserve(parents.size());
    for (const auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(backward_fn);
  }
  return TensorT<T>(std::move(impl));
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Odometer over a shape; calls fn(linear_index, offset) where offset is
// accumulated with caller-provided per-dim strides.
template <class Fn>
void for_each_index(const Shape& shape, const std::vector<int64_t>& strides, Fn&& fn) {
  const int nd = static_cast<int>(shape.size());
  if (nd == 0) {
    fn(int64_t(0), int64_t(0));
    return;
  }
  std::vector<int> idx(nd, 0);
  int64_t offset = 0;
  const int64_t total = shape_numel(shape);
  for (int64_t lin = 0; lin < total; ++lin) {
    fn(lin, offset);
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      offset += strides[d];
      if (idx[d] < shape[d]) break;
      offset -= strides[d] * shape[d];
      idx[d] = 0;
    }
  }
}

template <class T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  M2H_CHECK_DIM(shape_eq(a.shape(), b.shape()), op, ": shape mismatch ", shape_str(a.shape()),
                " vs ", shape_str(b.shape()));
}

// Generic elementwise unary op; df(x, y) is the local derivative.
template <class T, class F, class DF>
TensorT<T> unary_op(const TensorT<T>& x, F f, DF df) {
  const auto& xd = x.data();
  std::vector<T> out(xd.size());
  for (size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  auto xi = x.impl();
  return make_op<T>(x.shape(), std::move(out), {x}, [xi, df](TensorImplT<T>& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < self.data.size(); ++i)
      xi->grad[i] += self.grad[i] * df(xi->data[i], self.data[i]);
  });
}

}  // namespace m2h::detail
