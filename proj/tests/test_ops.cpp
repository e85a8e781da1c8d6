#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "dsnet/kernels.hpp"
#include "dsnet/ops.hpp"
#include "fd_check.hpp"

using namespace dsnet;
using fdcheck::random_tensor;
using fdcheck::rel_grad_err;

namespace {

// Contracts an op output against a fixed random tensor so the FD check sees
// a generic linear functional of the full output.
Tensor contract(const Tensor& y, Rng& rng) {
  std::vector<double> w(y.size());
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return ops::sum_all(ops::mul(y, Tensor::from(y.shape(), std::move(w))));
}

constexpr double kFdTol = 1e-6;

}  // namespace

TEST_CASE("elementwise values") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {10, 20, 30, 40});
  CHECK(ops::add(a, b).vec() == std::vector<double>{11, 22, 33, 44});
  CHECK(ops::mul(a, b).vec() == std::vector<double>{10, 40, 90, 160});
  CHECK(ops::scale(a, -2.0).vec() == std::vector<double>{-2, -4, -6, -8});
  CHECK_THROWS_AS(ops::add(a, Tensor::zeros({3})), ConfigError);
}

TEST_CASE("elementwise gradients") {
  Rng rng(5);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  CHECK(rel_grad_err(a, [&] { Rng r(7); return contract(ops::add(a, b), r); }) < kFdTol);
  CHECK(rel_grad_err(b, [&] { Rng r(7); return contract(ops::mul(a, b), r); }) < kFdTol);
  CHECK(rel_grad_err(a, [&] { Rng r(7); return contract(ops::scale(a, 1.7), r); }) < kFdTol);
}

TEST_CASE("gelu values") {
  Tensor x = Tensor::from({3}, {0.0, 1.0, -1.0});
  Tensor y = ops::gelu(x);
  CHECK(y.vec()[0] == 0.0);
  CHECK(y.vec()[1] == doctest::Approx(0.841345).epsilon(1e-5));
  CHECK(y.vec()[2] == doctest::Approx(-0.158655).epsilon(1e-4));
}

TEST_CASE("gelu gradient, and the fault hook breaks it") {
  Rng rng(9);
  Tensor x = random_tensor({2, 5}, rng, -2.0, 2.0);
  auto f = [&] { Rng r(10); return contract(ops::gelu(x), r); };
  CHECK(rel_grad_err(x, f) < kFdTol);

  ops::set_gelu_grad_scale(1.05);
  const double err = rel_grad_err(x, f);
  ops::set_gelu_grad_scale(1.0);
  CHECK(err > 1e-3);
}

TEST_CASE("reshape and transpose") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = ops::reshape(a, {3, 2});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.vec() == a.vec());
  CHECK_THROWS_AS(ops::reshape(a, {4, 2}), ConfigError);

  Tensor t = ops::transpose(a, {1, 0});
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.vec() == std::vector<double>{1, 4, 2, 5, 3, 6});

  // 3-axis permutation: out[i,j,k] = in[k,i,j] for perm {2,0,1}
  Tensor b = Tensor::from({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor p = ops::transpose(b, {2, 0, 1});
  CHECK(p.shape() == Shape{2, 2, 2});
  CHECK(p.vec() == std::vector<double>{0, 2, 4, 6, 1, 3, 5, 7});

  Rng rng(12);
  Tensor x = random_tensor({2, 3, 4}, rng);
  CHECK(rel_grad_err(x, [&] {
          Rng r(13);
          return contract(ops::transpose(x, {2, 0, 1}), r);
        }) < kFdTol);
  CHECK(rel_grad_err(x, [&] {
          Rng r(13);
          return contract(ops::reshape(x, {6, 4}), r);
        }) < kFdTol);
}

TEST_CASE("concat and slice_batch") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({1, 2}, {5, 6});
  Tensor c = ops::concat(a, b, 0);
  CHECK(c.shape() == Shape{3, 2});
  CHECK(c.vec() == std::vector<double>{1, 2, 3, 4, 5, 6});

  Tensor d = Tensor::from({2, 1}, {9, 8});
  Tensor e = ops::concat(a, d, 1);
  CHECK(e.shape() == Shape{2, 3});
  CHECK(e.vec() == std::vector<double>{1, 2, 9, 3, 4, 8});

  Tensor s = ops::slice_batch(c, 1, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.vec() == std::vector<double>{3, 4, 5, 6});
  CHECK_THROWS_AS(ops::slice_batch(c, 2, 2), ConfigError);

  Rng rng(14);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor y = random_tensor({2, 4}, rng);
  CHECK(rel_grad_err(x, [&] {
          Rng r(15);
          return contract(ops::concat(x, y, 0), r);
        }) < kFdTol);
  CHECK(rel_grad_err(y, [&] {
          Rng r(15);
          return contract(ops::concat(x, y, 0), r);
        }) < kFdTol);
  CHECK(rel_grad_err(x, [&] {
          Rng r(15);
          return contract(ops::slice_batch(x, 1, 2), r);
        }) < kFdTol);
}

TEST_CASE("reductions") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(ops::sum_all(a).item() == 21.0);
  CHECK(ops::mean_all(a).item() == 3.5);
  Tensor m = ops::mean_axis(a, 1);
  CHECK(m.shape() == Shape{2});
  CHECK(m.vec() == std::vector<double>{2.0, 5.0});
  Tensor m0 = ops::mean_axis(a, 0);
  CHECK(m0.vec() == std::vector<double>{2.5, 3.5, 4.5});

  Rng rng(16);
  Tensor x = random_tensor({3, 4, 2}, rng);
  CHECK(rel_grad_err(x, [&] {
          Rng r(17);
          return contract(ops::mean_axis(x, 1), r);
        }) < kFdTol);
  CHECK(rel_grad_err(x, [&] { return ops::mean_all(x); }) < kFdTol);
}

TEST_CASE("matmul against the raw kernel and by hand") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  CHECK(ops::matmul(a, b).vec() == std::vector<double>{19, 22, 43, 50});

  // batched: every leading slice multiplies independently
  Rng rng(18);
  Tensor ba = random_tensor({3, 2, 4}, rng);
  Tensor bb = random_tensor({3, 4, 5}, rng);
  Tensor out = ops::matmul(ba, bb);
  CHECK(out.shape() == Shape{3, 2, 5});
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> want(2 * 5);
    kernels::gemm(ba.data() + i * 8, bb.data() + i * 20, want.data(), 2, 5, 4);
    for (std::size_t j = 0; j < want.size(); ++j)
      CHECK(out.vec()[i * 10 + j] == want[j]);
  }

  CHECK_THROWS_AS(ops::matmul(a, Tensor::zeros({3, 2})), ConfigError);
}

TEST_CASE("matmul_nt equals matmul with a transposed operand") {
  Rng rng(19);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 5, 4}, rng);
  Tensor nt = ops::matmul_nt(a, b);
  Tensor ref = ops::matmul(a, ops::transpose(b, {0, 2, 1}));
  CHECK(nt.shape() == ref.shape());
  for (std::size_t i = 0; i < nt.size(); ++i)
    CHECK(nt.vec()[i] == doctest::Approx(ref.vec()[i]).epsilon(1e-12));
}

TEST_CASE("matmul gradients") {
  Rng rng(20);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 4, 5}, rng);
  CHECK(rel_grad_err(a, [&] {
          Rng r(21);
          return contract(ops::matmul(a, b), r);
        }) < kFdTol);
  CHECK(rel_grad_err(b, [&] {
          Rng r(21);
          return contract(ops::matmul(a, b), r);
        }) < kFdTol);

  Tensor c = random_tensor({2, 5, 4}, rng);
  CHECK(rel_grad_err(a, [&] {
          Rng r(22);
          return contract(ops::matmul_nt(a, c), r);
        }) < kFdTol);
  CHECK(rel_grad_err(c, [&] {
          Rng r(22);
          return contract(ops::matmul_nt(a, c), r);
        }) < kFdTol);
}

TEST_CASE("linear layer") {
  Tensor x = Tensor::from({1, 2}, {1, 2});
  Tensor w = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor b = Tensor::from({3}, {0.5, -0.5, 0.0});
  Tensor y = ops::linear(x, w, b);
  CHECK(y.shape() == Shape{1, 3});
  CHECK(y.vec() == std::vector<double>{1.5, 1.5, 3.0});

  Tensor nob = ops::linear(x, w, Tensor());
  CHECK(nob.vec() == std::vector<double>{1.0, 2.0, 3.0});

  Rng rng(24);
  Tensor xx = random_tensor({4, 3}, rng);
  Tensor ww = random_tensor({5, 3}, rng);
  Tensor bb = random_tensor({5}, rng);
  auto f = [&] {
    Rng r(25);
    return contract(ops::linear(xx, ww, bb), r);
  };
  CHECK(rel_grad_err(xx, f) < kFdTol);
  CHECK(rel_grad_err(ww, f) < kFdTol);
  CHECK(rel_grad_err(bb, f) < kFdTol);
}

TEST_CASE("softmax rows normalize and shift invariance holds") {
  Rng rng(26);
  Tensor x = random_tensor({4, 7}, rng, -3.0, 3.0);
  Tensor y = ops::softmax_lastdim(x);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      const double p = y.vec()[i * 7 + j];
      CHECK(p >= 0.0);
      s += p;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }

  std::vector<double> shifted = x.vec();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 7; ++j) shifted[i * 7 + j] += 123.0;
  Tensor y2 = ops::softmax_lastdim(Tensor::from({4, 7}, std::move(shifted)));
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y.vec()[i] == doctest::Approx(y2.vec()[i]).epsilon(1e-12));

  CHECK(rel_grad_err(x, [&] {
          Rng r(27);
          return contract(ops::softmax_lastdim(x), r);
        }) < kFdTol);
}

TEST_CASE("layer_norm normalizes the last axis") {
  Rng rng(28);
  Tensor x = random_tensor({3, 8}, rng, -2.0, 5.0);
  Tensor gamma = Tensor::full({8}, 1.0);
  Tensor beta = Tensor::zeros({8});
  Tensor y = ops::layer_norm(x, gamma, beta);
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += y.vec()[i * 8 + j];
    mean /= 8;
    for (std::size_t j = 0; j < 8; ++j) {
      const double d = y.vec()[i * 8 + j] - mean;
      var += d * d;
    }
    var /= 8;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps shifts it slightly
  }

  Tensor g2 = random_tensor({8}, rng);
  Tensor b2 = random_tensor({8}, rng);
  auto f = [&] {
    Rng r(29);
    return contract(ops::layer_norm(x, g2, b2), r);
  };
  CHECK(rel_grad_err(x, f) < kFdTol);
  CHECK(rel_grad_err(g2, f) < kFdTol);
  CHECK(rel_grad_err(b2, f) < kFdTol);
}

TEST_CASE("batch_norm training statistics and running update") {
  Rng rng(30);
  const std::size_t n = 2, c = 3, h = 4, w = 4;
  Tensor x = random_tensor({n, c, h, w}, rng, -1.0, 3.0);
  Tensor gamma = Tensor::full({c}, 1.0);
  Tensor beta = Tensor::zeros({c});
  Tensor rm = Tensor::zeros({c});
  Tensor rv = Tensor::full({c}, 1.0);

  Tensor y = ops::batch_norm(x, gamma, beta, rm, rv, true);

  const std::size_t count = n * h * w;
  for (std::size_t ch = 0; ch < c; ++ch) {
    // per-channel batch stats straight from the input
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < h * w; ++p)
        mean += x.vec()[(i * c + ch) * h * w + p];
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < h * w; ++p) {
        const double d = x.vec()[(i * c + ch) * h * w + p] - mean;
        var += d * d;
      }
    const double biased = var / static_cast<double>(count);
    const double unbiased = var / static_cast<double>(count - 1);

    // running = 0.9 * old + 0.1 * batch, unbiased variance
    CHECK(rm.vec()[ch] == doctest::Approx(0.1 * mean).epsilon(1e-12));
    CHECK(rv.vec()[ch] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-12));

    // normalized output has zero mean / unit (biased) variance per channel
    double ymean = 0.0, yvar = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < h * w; ++p)
        ymean += y.vec()[(i * c + ch) * h * w + p];
    ymean /= static_cast<double>(count);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < h * w; ++p) {
        const double d = y.vec()[(i * c + ch) * h * w + p] - ymean;
        yvar += d * d;
      }
    yvar /= static_cast<double>(count);
    CHECK(ymean == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(yvar == doctest::Approx(biased / (biased + 1e-5)).epsilon(1e-8));
  }
}

TEST_CASE("batch_norm eval mode uses the running buffers") {
  Tensor x = Tensor::from({1, 1, 1, 2}, {3.0, 5.0});
  Tensor gamma = Tensor::full({1}, 2.0);
  Tensor beta = Tensor::full({1}, 1.0);
  Tensor rm = Tensor::full({1}, 1.0);
  Tensor rv = Tensor::full({1}, 4.0);
  Tensor y = ops::batch_norm(x, gamma, beta, rm, rv, false);
  // (x - 1) / sqrt(4 + 1e-5) * 2 + 1
  CHECK(y.vec()[0] == doctest::Approx(1.0 + 2.0 * 2.0 / std::sqrt(4.00001)).epsilon(1e-12));
  CHECK(y.vec()[1] == doctest::Approx(1.0 + 2.0 * 4.0 / std::sqrt(4.00001)).epsilon(1e-12));
  // eval must not touch the running buffers
  CHECK(rm.vec()[0] == 1.0);
  CHECK(rv.vec()[0] == 4.0);
}

TEST_CASE("batch_norm gradients in both modes") {
  Rng rng(31);
  Tensor x = random_tensor({2, 2, 3, 3}, rng);
  Tensor gamma = random_tensor({2}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({2}, rng);
  Tensor rm = random_tensor({2}, rng);
  Tensor rv = random_tensor({2}, rng, 0.5, 2.0);

  auto train_f = [&] {
    Rng r(32);
    return contract(ops::batch_norm(x, gamma, beta, rm, rv, true), r);
  };
  CHECK(rel_grad_err(x, train_f) < kFdTol);
  CHECK(rel_grad_err(gamma, train_f) < kFdTol);
  CHECK(rel_grad_err(beta, train_f) < kFdTol);

  auto eval_f = [&] {
    Rng r(33);
    return contract(ops::batch_norm(x, gamma, beta, rm, rv, false), r);
  };
  CHECK(rel_grad_err(x, eval_f) < kFdTol);
  CHECK(rel_grad_err(gamma, eval_f) < kFdTol);
}

TEST_CASE("batch_norm rejects single-element statistics in training") {
  Tensor x = Tensor::zeros({1, 2, 1, 1});
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  Tensor rm = Tensor::zeros({2});
  Tensor rv = Tensor::full({2}, 1.0);
  CHECK_THROWS_AS(ops::batch_norm(x, gamma, beta, rm, rv, true), ConfigError);
  CHECK_NOTHROW(ops::batch_norm(x, gamma, beta, rm, rv, false));
}

TEST_CASE("conv2d op values and gradients") {
  Rng rng(34);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);

  Tensor y = ops::conv2d(x, w, b, 1, 1);
  CHECK(y.shape() == Shape{2, 4, 6, 6});
  {
    const auto d = kernels::conv_dims(2, 3, 6, 6, 4, 3, 3, 1, 1);
    std::vector<double> want(y.size());
    kernels::conv2d_forward(x.data(), w.data(), b.data(), want.data(), d);
    CHECK(y.vec() == want);
  }

  auto f = [&] {
    Rng r(35);
    return contract(ops::conv2d(x, w, b, 2, 1), r);
  };
  CHECK(rel_grad_err(x, f) < kFdTol);
  CHECK(rel_grad_err(w, f) < kFdTol);
  CHECK(rel_grad_err(b, f) < kFdTol);

  // even patch kernel, no bias
  Tensor pw = random_tensor({5, 3, 2, 2}, rng);
  auto fp = [&] {
    Rng r(36);
    return contract(ops::conv2d(x, pw, Tensor(), 2, 0), r);
  };
  CHECK(rel_grad_err(pw, fp) < kFdTol);

  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({4, 2, 3, 3}), Tensor(), 1, 1),
                  ConfigError);
}

TEST_CASE("depthwise op gradients") {
  Rng rng(37);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor w = random_tensor({3, 1, 3, 3}, rng);
  auto f = [&] {
    Rng r(38);
    return contract(ops::depthwise_conv2d(x, w, 1, 1), r);
  };
  CHECK(rel_grad_err(x, f) < kFdTol);
  CHECK(rel_grad_err(w, f) < kFdTol);

  Tensor rw = random_tensor({3, 1, 2, 2}, rng);
  auto fr = [&] {
    Rng r(39);
    return contract(ops::depthwise_conv2d(x, rw, 2, 0), r);
  };
  CHECK(rel_grad_err(x, fr) < kFdTol);
  CHECK(rel_grad_err(rw, fr) < kFdTol);
}

TEST_CASE("cross_entropy value and gradient") {
  // uniform logits over 5 classes: loss is ln 5 for any labels
  Tensor logits = Tensor::zeros({2, 5});
  CHECK(ops::cross_entropy(logits, {0, 3}).item() ==
        doctest::Approx(1.609438).epsilon(1e-6));

  // perfect confidence costs nearly nothing
  Tensor sharp = Tensor::from({1, 2}, {50.0, -50.0});
  CHECK(ops::cross_entropy(sharp, {0}).item() ==
        doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(40);
  Tensor x = random_tensor({4, 5}, rng, -2.0, 2.0);
  const std::vector<std::size_t> labels{0, 3, 2, 4};
  CHECK(rel_grad_err(x, [&] { return ops::cross_entropy(x, labels); }) < kFdTol);

  CHECK_THROWS_AS(ops::cross_entropy(x, {0, 1, 2, 5}), DataError);
  CHECK_THROWS_AS(ops::cross_entropy(x, {0}), ConfigError);

  Tensor bad = Tensor::from({1, 2}, {std::numeric_limits<double>::quiet_NaN(), 0.0});
  CHECK_THROWS_AS(ops::cross_entropy(bad, {0}), NumericError);
}

TEST_CASE("gather_cols values and duplicate-index accumulation") {
  Tensor table = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor out = ops::gather_cols(table, {2, 0, 2});
  CHECK(out.shape() == Shape{2, 3});
  CHECK(out.vec() == std::vector<double>{3, 1, 3, 6, 4, 6});
  CHECK_THROWS_AS(ops::gather_cols(table, {3}), ConfigError);

  Rng rng(42);
  Tensor t = random_tensor({3, 4}, rng);
  const std::vector<std::size_t> idx{1, 1, 0, 3, 1};
  CHECK(rel_grad_err(t, [&] {
          Rng r(43);
          return contract(ops::gather_cols(t, idx), r);
        }) < kFdTol);
}

TEST_CASE("add_broadcast_batch") {
  Tensor x = Tensor::from({2, 2, 2}, {0, 0, 0, 0, 10, 10, 10, 10});
  Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor y = ops::add_broadcast_batch(x, b);
  CHECK(y.vec() == std::vector<double>{1, 2, 3, 4, 11, 12, 13, 14});

  Rng rng(44);
  Tensor xx = random_tensor({3, 2, 4}, rng);
  Tensor bb = random_tensor({2, 4}, rng);
  auto f = [&] {
    Rng r(45);
    return contract(ops::add_broadcast_batch(xx, bb), r);
  };
  CHECK(rel_grad_err(xx, f) < kFdTol);
  CHECK(rel_grad_err(bb, f) < kFdTol);
}

TEST_CASE("MAC counter covers the gemm-backed ops") {
  Rng rng(46);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 4, 5}, rng);
  unsigned long long macs = 0;

  ops::set_mac_counter(&macs);
  ops::matmul(a, b);
  ops::set_mac_counter(nullptr);
  CHECK(macs == 2 * 3 * 5 * 4);

  macs = 0;
  Tensor c = random_tensor({2, 5, 4}, rng);
  ops::set_mac_counter(&macs);
  ops::matmul_nt(a, c);
  ops::set_mac_counter(nullptr);
  CHECK(macs == 2 * 3 * 5 * 4);

  macs = 0;
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({6, 4}, rng);
  ops::set_mac_counter(&macs);
  ops::linear(x, w, Tensor());
  ops::set_mac_counter(nullptr);
  CHECK(macs == 3 * 6 * 4);

  macs = 0;
  Tensor img = random_tensor({1, 2, 4, 4}, rng);
  Tensor cw = random_tensor({3, 2, 3, 3}, rng);
  ops::set_mac_counter(&macs);
  ops::conv2d(img, cw, Tensor(), 1, 1);
  ops::set_mac_counter(nullptr);
  CHECK(macs == 1ull * 3 * 4 * 4 * 2 * 3 * 3);

  // counter off: nothing accumulates
  macs = 0;
  ops::matmul(a, b);
  CHECK(macs == 0);
}
