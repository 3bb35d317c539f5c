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

#include <cmath>
#include <vector>

#include "doctest.h"
#include "m2h/gradcheck.hpp"
#include "m2h/tensor.hpp"

using namespace m2h;

namespace {

TensorD rand_t(Rng& rng, const Shape& shape, double stddev = 1.0) {
  return randn_tensor<double>(rng, shape, stddev);
}

using Fn = std::function<TensorD(std::vector<TensorD>&)>;

void expect_gradcheck(const Fn& f, std::vector<TensorD> inputs, double tol = 1e-4) {
  GradCheckOptions opts;
  opts.tol = tol;
  auto rep = grad_check<double>(f, std::move(inputs), opts);
  INFO("max_rel_err=", rep.max_rel_err, " at ", rep.worst_location);
  CHECK(rep.pass);
}

// Independent reference: naive triple loop product.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int l = 0; l < k; ++l) c[i * n + j] += a[i * k + l] * b[l * n + j];
  return c;
}

}  // namespace

TEST_CASE("matmul identity and oracle cases") {
  auto a = TensorD::from({2, 2}, {1, 2, 3, 4});
  auto eye = TensorD::from({2, 2}, {1, 0, 0, 1});
  auto y = matmul(a, eye);
  CHECK(y.data() == std::vector<double>{1, 2, 3, 4});

  auto b = TensorD::from({2, 1}, {5, 6});
  auto y2 = matmul(a, b);
  auto expect = matmul_oracle(a.data(), b.data(), 2, 2, 1);
  CHECK(y2.data()[0] == doctest::Approx(17.0));
  CHECK(y2.data()[1] == doctest::Approx(39.0));
  CHECK(y2.data()[0] == doctest::Approx(expect[0]));
  CHECK(y2.data()[1] == doctest::Approx(expect[1]));

  auto z = TensorD::zeros({2, 2});
  auto y3 = matmul(z, a);
  for (double v : y3.data()) CHECK(v == 0.0);

  auto bad = TensorD::zeros({3, 2});
  CHECK_THROWS_AS((void)matmul(a, bad), DimensionError);
}

TEST_CASE("matmul matches oracle on random shapes") {
  Rng rng(11);
  auto a = rand_t(rng, {4, 6});
  auto b = rand_t(rng, {6, 3});
  auto y = matmul(a, b);
  auto e = matmul_oracle(a.data(), b.data(), 4, 6, 3);
  for (size_t i = 0; i < e.size(); ++i) CHECK(y.data()[i] == doctest::Approx(e[i]));
}

TEST_CASE("matmul gradients") {
  Rng rng(1);
  expect_gradcheck(
      [](std::vector<TensorD>& in) { return sum_all(matmul(in[0], in[1])); },
      {rand_t(rng, {3, 4}), rand_t(rng, {4, 2})});
}

TEST_CASE("bmm transpose flags forward and backward") {
  Rng rng(2);
  // forward vs oracle for each flag combination
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      auto a = ta ? rand_t(rng, {2, 4, 3}) : rand_t(rng, {2, 3, 4});
      auto b = tb ? rand_t(rng, {2, 5, 4}) : rand_t(rng, {2, 4, 5});
      auto y = bmm(a, b, ta, tb);
      REQUIRE(y.shape() == Shape{2, 3, 5});
      for (int s = 0; s < 2; ++s)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 5; ++j) {
            double acc = 0;
            for (int l = 0; l < 4; ++l) {
              const double av = ta ? a.data()[(s * 4 + l) * 3 + i] : a.data()[(s * 3 + i) * 4 + l];
              const double bv = tb ? b.data()[(s * 5 + j) * 4 + l] : b.data()[(s * 4 + l) * 5 + j];
              acc += av * bv;
            }
            CHECK(y.data()[(s * 3 + i) * 5 + j] == doctest::Approx(acc));
          }
      expect_gradcheck(
          [ta, tb](std::vector<TensorD>& in) {
            return sum_all(mul(bmm(in[0], in[1], ta, tb), bmm(in[0], in[1], ta, tb)));
          },
          {a, b});
    }
}

TEST_CASE("conv2d identity, summation oracle, zero weights") {
  // 1x1 kernel of value 1 reproduces the input
  auto x = TensorD::from({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto w1 = TensorD::from({1, 1, 1, 1}, {1});
  auto y1 = conv2d(x, w1, TensorD(), 1, 0, 1);
  CHECK(y1.data() == x.data());

  // 3x3 all-ones kernel on all-ones 1x1x3x3 input, pad 0 -> scalar 9
  auto ones = TensorD::full({1, 1, 3, 3}, 1.0);
  auto w9 = TensorD::full({1, 1, 3, 3}, 1.0);
  auto y9 = conv2d(ones, w9, TensorD(), 1, 0, 1);
  REQUIRE(y9.shape() == Shape{1, 1, 1, 1});
  double direct = 0;  // direct summation oracle
  for (double v : ones.data()) direct += v;
  CHECK(y9.item() == doctest::Approx(direct));
  CHECK(y9.item() == doctest::Approx(9.0));

  auto wz = TensorD::zeros({2, 1, 3, 3});
  auto yz = conv2d(ones, wz, TensorD(), 1, 1, 1);
  for (double v : yz.data()) CHECK(v == 0.0);

  // non-integral output size
  auto w2 = TensorD::zeros({1, 1, 2, 2});
  CHECK_THROWS_AS((void)conv2d(ones, w2, TensorD(), 2, 0, 1), DimensionError);
}

TEST_CASE("conv2d gradients incl. stride, pad, groups") {
  Rng rng(3);
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(mul(conv2d(in[0], in[1], in[2], 1, 1, 1),
                           conv2d(in[0], in[1], in[2], 1, 1, 1)));
      },
      {rand_t(rng, {2, 3, 5, 4}), rand_t(rng, {2, 3, 3, 3}), rand_t(rng, {2})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(conv2d(in[0], in[1], in[2], 2, 1, 1));
      },
      {rand_t(rng, {1, 2, 5, 5}), rand_t(rng, {3, 2, 3, 3}), rand_t(rng, {3})});
  // depthwise: groups == Cin
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(mul(conv2d(in[0], in[1], in[2], 1, 1, 4),
                           conv2d(in[0], in[1], in[2], 1, 1, 4)));
      },
      {rand_t(rng, {1, 4, 4, 4}), rand_t(rng, {4, 1, 3, 3}), rand_t(rng, {4})});
}

TEST_CASE("depthwise conv matches per-channel oracle") {
  Rng rng(4);
  auto x = rand_t(rng, {1, 3, 4, 4});
  auto w = rand_t(rng, {3, 1, 3, 3});
  auto y = conv2d(x, w, TensorD(), 1, 1, 3);
  for (int c = 0; c < 3; ++c)
    for (int oh = 0; oh < 4; ++oh)
      for (int ow = 0; ow < 4; ++ow) {
        double acc = 0;
        for (int r = 0; r < 3; ++r)
          for (int s = 0; s < 3; ++s) {
            const int ih = oh - 1 + r, iw = ow - 1 + s;
            if (ih < 0 || ih >= 4 || iw < 0 || iw >= 4) continue;
            acc += x.data()[(c * 4 + ih) * 4 + iw] * w.data()[(c * 3 + r) * 3 + s];
          }
        CHECK(y.data()[(c * 4 + oh) * 4 + ow] == doctest::Approx(acc));
      }
}

TEST_CASE("conv_transpose2d shape law and gradients") {
  Rng rng(5);
  auto x = rand_t(rng, {1, 2, 3, 3});
  auto w = rand_t(rng, {2, 4, 2, 2});
  auto y = conv_transpose2d(x, w, TensorD(), 2);
  CHECK(y.shape() == Shape{1, 4, 6, 6});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y2 = conv_transpose2d(in[0], in[1], in[2], 2);
        return sum_all(mul(y2, y2));
      },
      {x, w, rand_t(rng, {4})});
}

TEST_CASE("softmax closed forms and gradients") {
  auto c = TensorD::full({4}, 3.25);
  auto y = softmax(reshape(c, {1, 4}), 1);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.25));

  auto x = TensorD::from({1, 2}, {0.0, std::log(2.0)});
  auto y2 = softmax(x, 1);
  CHECK(y2.data()[0] == doctest::Approx(1.0 / 3.0));
  CHECK(y2.data()[1] == doctest::Approx(2.0 / 3.0));

  Rng rng(6);
  auto r = rand_t(rng, {2, 5, 3});
  auto yr = softmax(r, 1);
  // argmax of input == argmax of output, and slices sum to 1
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 3; ++i) {
      int am_in = 0, am_out = 0;
      double sum = 0;
      for (int k = 0; k < 5; ++k) {
        const auto idx = (b * 5 + k) * 3 + i;
        if (r.data()[idx] > r.data()[(b * 5 + am_in) * 3 + i]) am_in = k;
        if (yr.data()[idx] > yr.data()[(b * 5 + am_out) * 3 + i]) am_out = k;
        sum += yr.data()[idx];
      }
      CHECK(am_in == am_out);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(mul(softmax(in[0], 1), in[1]));
      },
      {rand_t(rng, {2, 4, 3}), rand_t(rng, {2, 4, 3})});
}

TEST_CASE("layer_norm closed forms") {
  auto gamma1 = TensorD::full({3}, 1.0);
  auto beta0 = TensorD::zeros({3});
  auto cst = TensorD::full({2, 3}, 5.0);
  auto y = layer_norm(cst, gamma1, beta0, 1e-5, -1);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.0));

  auto g2 = TensorD::full({2}, 1.0);
  auto b2 = TensorD::zeros({2});
  auto x = TensorD::from({1, 2}, {1.0, 3.0});
  auto y2 = layer_norm(x, g2, b2, 1e-12, -1);
  CHECK(y2.data()[0] == doctest::Approx(-1.0));
  CHECK(y2.data()[1] == doctest::Approx(1.0));

  // gamma = 0 -> output equals beta broadcast
  auto g0 = TensorD::zeros({2});
  auto bb = TensorD::from({2}, {0.5, -0.25});
  auto y3 = layer_norm(x, g0, bb, 1e-5, -1);
  CHECK(y3.data()[0] == doctest::Approx(0.5));
  CHECK(y3.data()[1] == doctest::Approx(-0.25));
}

TEST_CASE("layer_norm pre-affine statistics and gradients") {
  Rng rng(7);
  auto x = rand_t(rng, {3, 8});
  auto g = TensorD::full({8}, 1.0);
  auto b = TensorD::zeros({8});
  auto y = layer_norm(x, g, b, 1e-10, -1);
  for (int r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (int d = 0; d < 8; ++d) mean += y.data()[r * 8 + d];
    mean /= 8;
    for (int d = 0; d < 8; ++d) {
      const double c = y.data()[r * 8 + d] - mean;
      var += c * c;
    }
    var /= 8;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
  }
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(mul(layer_norm(in[0], in[1], in[2], 1e-5, -1), in[0]));
      },
      {rand_t(rng, {4, 6}), rand_t(rng, {6}), rand_t(rng, {6})});
  // non-trailing axis goes through the permute wrapper
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(mul(layer_norm(in[0], in[1], in[2], 1e-5, 1), in[0]));
      },
      {rand_t(rng, {2, 5, 3}), rand_t(rng, {5}), rand_t(rng, {5})});
}

TEST_CASE("elementwise suite closed forms") {
  auto zero = TensorD::zeros({1});
  CHECK(sigmoid(zero).item() == doctest::Approx(0.5));
  CHECK(gelu(zero).item() == doctest::Approx(0.0));
  auto cmap = TensorD::full({2, 3, 4, 4}, 2.5);
  auto pooled = global_avg_pool(cmap);
  REQUIRE(pooled.shape() == Shape{2, 3});
  for (double v : pooled.data()) CHECK(v == doctest::Approx(2.5));
  CHECK_THROWS_AS((void)logt(TensorD::from({2}, {1.0, -1.0})), DomainError);
  CHECK_THROWS_AS((void)logt(TensorD::from({1}, {0.0})), DomainError);
}

TEST_CASE("elementwise gradients") {
  Rng rng(8);
  auto pos = [&](const Shape& s) {
    auto t = rand_t(rng, s);
    for (auto& v : t.data()) v = std::abs(v) + 0.5;
    return t;
  };
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = gelu(in[0]);
        y = add(y, sigmoid(in[0]));
        y = add(y, relu(in[0]));
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {3, 5})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(add(logt(in[0]), mul(sqrtt(in[0]), rsqrtt(in[0]))));
      },
      {pos({2, 4})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(add(softplus(in[0]), expt(scale(in[0], 0.1))));
      },
      {rand_t(rng, {6})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) { return sum_all(divt(in[0], in[1])); },
      {rand_t(rng, {5}), pos({5})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) { return sum_all(global_avg_pool(in[0])); },
      {rand_t(rng, {2, 3, 3, 2})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) { return sum_all(mul(abst(in[0]), in[0])); },
      {pos({4})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) { return sum_all(minimum_const(in[0], 0.3)); },
      {rand_t(rng, {8})});
}

TEST_CASE("movement ops round-trip and gradients") {
  Rng rng(9);
  auto x = rand_t(rng, {2, 3, 4});
  auto rt = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  CHECK(rt.data() == x.data());

  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = permute(in[0], {1, 0, 2});
        y = reshape(y, {12, 2});
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {2, 3, 4})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(mul(slice(in[0], 1, 1, 2), slice(in[0], 1, 0, 2)));
      },
      {rand_t(rng, {2, 4, 3})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = concat(std::vector<TensorD>{in[0], in[1]}, 1);
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {2, 2, 3}), rand_t(rng, {2, 4, 3})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = pad2d(in[0], 1, 2, 0, 1);
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {1, 2, 3, 3})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = crop2d(in[0], 1, 1, 2, 2);
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {1, 2, 4, 4})});

  // pad then crop restores the original
  auto m = rand_t(rng, {1, 1, 3, 4});
  auto back = crop2d(pad2d(m, 2, 1, 3, 0), 2, 3, 3, 4);
  CHECK(back.data() == m.data());
}

TEST_CASE("reductions") {
  auto x = TensorD::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(sum_all(x).item() == doctest::Approx(21.0));
  CHECK(mean_all(x).item() == doctest::Approx(3.5));
  auto s0 = sum_axes(x, {0});
  REQUIRE(s0.shape() == Shape{3});
  CHECK(s0.data()[0] == doctest::Approx(5.0));
  CHECK(s0.data()[2] == doctest::Approx(9.0));
  auto s1 = sum_axes(x, {1}, true);
  REQUIRE(s1.shape() == Shape{2, 1});
  CHECK(s1.data()[1] == doctest::Approx(15.0));

  Rng rng(10);
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = sum_axes(in[0], {0, 2});
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {2, 3, 4})});
}

TEST_CASE("broadcast helpers") {
  Rng rng(12);
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = add_bias_lastdim(in[0], in[1]);
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {3, 4}), rand_t(rng, {4})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = add_bias_channel(in[0], in[1]);
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {2, 3, 2, 2}), rand_t(rng, {3})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = mul_channel_gate(in[0], in[1]);
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {2, 3, 2, 2}), rand_t(rng, {2, 3})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = mul_bcast_channel(in[0], in[1]);
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {2, 3, 2, 2}), rand_t(rng, {2, 1, 2, 2})});
}

TEST_CASE("bilinear upsample constants and gradients") {
  auto c = TensorD::full({1, 2, 3, 3}, 4.0);
  auto up = bilinear_upsample(c, 2);
  REQUIRE(up.shape() == Shape{1, 2, 6, 6});
  for (double v : up.data()) CHECK(v == doctest::Approx(4.0));
  Rng rng(13);
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        auto y = bilinear_upsample(in[0], 2);
        return sum_all(mul(y, y));
      },
      {rand_t(rng, {1, 2, 3, 4})});
  expect_gradcheck(
      [](std::vector<TensorD>& in) {
        return sum_all(bilinear_upsample(in[0], 4));
      },
      {rand_t(rng, {1, 1, 2, 2})});
}

TEST_CASE("spatial differences") {
  // d(x, y+1) - d(x, y) steps the trailing (W) axis
  auto x = TensorD::from({1, 1, 2, 3}, {1, 2, 4, 0, 0, 9});
  auto dw = diff_forward(x, 3);
  CHECK(dw.data() == std::vector<double>{1, 2, 0, 0, 9, 0});
  auto dh = diff_forward(x, 2);
  CHECK(dh.data() == std::vector<double>{-1, -2, 5, 0, 0, 0});
  auto db = diff_backward(x, 3);
  CHECK(db.data() == std::vector<double>{0, 1, 2, 0, 0, 9});

  Rng rng(14);
  for (int axis : {2, 3}) {
    expect_gradcheck(
        [axis](std::vector<TensorD>& in) {
          auto y = diff_forward(in[0], axis);
          return sum_all(mul(y, y));
        },
        {rand_t(rng, {2, 2, 3, 4})});
    expect_gradcheck(
        [axis](std::vector<TensorD>& in) {
          auto y = diff_backward(in[0], axis);
          return sum_all(mul(y, y));
        },
        {rand_t(rng, {1, 1, 4, 3})});
  }
}

TEST_CASE("fused cross entropy") {
  // uniform logits over 4 classes -> ln 4 per pixel
  auto logits = TensorD::zeros({1, 4, 2, 2});
  std::vector<int> labels = {0, 1, 2, 3};
  auto loss = cross_entropy(logits, labels, 255);
  CHECK(loss.item() == doctest::Approx(std::log(4.0)));

  // ignore index excluded from the mean
  std::vector<int> labels2 = {0, 255, 255, 255};
  CHECK(cross_entropy(logits, labels2, 255).item() == doctest::Approx(std::log(4.0)));

  std::vector<int> bad = {0, 1, 2, 7};
  CHECK_THROWS_AS((void)cross_entropy(logits, bad, 255), DataError);
  std::vector<int> all_ignored = {255, 255, 255, 255};
  CHECK_THROWS_AS((void)cross_entropy(logits, all_ignored, 255), DataError);

  Rng rng(15);
  std::vector<int> rl(8);
  for (auto& l : rl) l = static_cast<int>(rng.uniform_int(3));
  rl[3] = 255;
  expect_gradcheck(
      [rl](std::vector<TensorD>& in) { return cross_entropy(in[0], rl, 255); },
      {rand_t(rng, {2, 3, 2, 2})});
}

TEST_CASE("fused huber") {
  // constant offset 0.5 with delta 1 stays on the quadratic branch: 0.5 * 0.25
  auto y = TensorD::full({2, 2}, 2.0);
  auto p = TensorD::full({2, 2}, 2.5);
  CHECK(huber_loss(p, y, {}, 1.0).item() == doctest::Approx(0.125));

  // linear branch: |r| = 3, delta = 1 -> 1 * (3 - 0.5)
  auto p2 = TensorD::full({1}, 5.0);
  auto y2 = TensorD::full({1}, 2.0);
  CHECK(huber_loss(p2, y2, {}, 1.0).item() == doctest::Approx(2.5));

  std::vector<uint8_t> empty_mask(4, 0);
  CHECK_THROWS_AS((void)huber_loss(p, y, empty_mask, 1.0), DataError);

  Rng rng(16);
  auto pr = rand_t(rng, {3, 3}, 0.3);
  auto tr = rand_t(rng, {3, 3}, 0.3);
  std::vector<uint8_t> mask(9, 1);
  mask[4] = 0;
  expect_gradcheck(
      [mask](std::vector<TensorD>& in) { return huber_loss(in[0], in[1], mask, 1.0); },
      {pr, tr});
}

TEST_CASE("fused bce with logits") {
  auto logits = TensorD::zeros({2, 2});
  auto targets = TensorD::from({2, 2}, {0, 1, 0, 1});
  CHECK(bce_with_logits(logits, targets, 1.0).item() == doctest::Approx(std::log(2.0)));

  // all-zero targets at logit 0: ln 2 per pixel regardless of pos weight
  auto z = TensorD::zeros({3});
  CHECK(bce_with_logits(TensorD::zeros({3}), z, 5.0).item() == doctest::Approx(std::log(2.0)));

  // saturated correct predictions go to zero
  auto big = TensorD::from({2}, {40.0, -40.0});
  auto tgt = TensorD::from({2}, {1.0, 0.0});
  CHECK(bce_with_logits(big, tgt, 1.0).item() == doctest::Approx(0.0));

  Rng rng(17);
  auto lg = rand_t(rng, {2, 3});
  auto tg = TensorD::from({2, 3}, {1, 0, 1, 1, 0, 0});
  expect_gradcheck(
      [tg](std::vector<TensorD>& in) { return bce_with_logits(in[0], tg, 3.0); }, {lg});
}

TEST_CASE("backward basics") {
  Rng rng(18);
  auto x = rand_t(rng, {3, 2});
  x.set_requires_grad(true);
  auto loss = sum_all(x);
  backward(loss);
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));

  auto x2 = rand_t(rng, {4});
  x2.set_requires_grad(true);
  auto loss2 = scale(sum_all(mul(x2, x2)), 0.5);
  backward(loss2);
  for (int i = 0; i < 4; ++i) CHECK(x2.grad()[i] == doctest::Approx(x2.data()[i]));

  // fan-out accumulates additively
  auto x3 = rand_t(rng, {2});
  x3.set_requires_grad(true);
  auto loss3 = sum_all(add(x3, x3));
  backward(loss3);
  for (double g : x3.grad()) CHECK(g == doctest::Approx(2.0));

  auto nx = rand_t(rng, {2, 2});
  nx.set_requires_grad(true);
  auto ny = mul(nx, nx);
  CHECK_THROWS_AS(backward(ny), UsageError);
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Rng rng(77);
    auto x = rand_t(rng, {4, 4});
    x.set_requires_grad(true);
    auto w = rand_t(rng, {4, 4});
    w.set_requires_grad(true);
    auto y = sum_all(gelu(matmul(x, softmax(w, 1))));
    backward(y);
    auto g = x.grad();
    g.insert(g.end(), w.grad().begin(), w.grad().end());
    return g;
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check harness sanity") {
  Rng rng(19);
  auto rep = grad_check<double>(
      [](std::vector<TensorD>& in) { return sum_all(in[0]); }, {rand_t(rng, {5})});
  CHECK(rep.pass);
  CHECK(rep.max_rel_err <= 1e-10);

  // deliberately corrupted analytic gradient must be detected
  GradCheckOptions opts;
  opts.corrupt_scale = 1.01;
  auto rep2 = grad_check<double>(
      [](std::vector<TensorD>& in) { return sum_all(mul(in[0], in[0])); },
      {rand_t(rng, {5})}, opts);
  CHECK_FALSE(rep2.pass);

  // coordinate sampling still runs and passes
  GradCheckOptions opts3;
  opts3.max_coords_per_tensor = 4;
  auto rep3 = grad_check<double>(
      [](std::vector<TensorD>& in) { return sum_all(gelu(in[0])); },
      {rand_t(rng, {4, 4})}, opts3);
  CHECK(rep3.pass);
  CHECK(rep3.coords_checked == 4);
}
