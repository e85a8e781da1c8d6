#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <vector>

#include "dsnet/common.hpp"
#include "dsnet/kernels.hpp"

using namespace dsnet;
namespace k = dsnet::kernels;

namespace {

std::vector<double> rand_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("conv_dims validates and computes output extents") {
  const auto d = k::conv_dims(2, 3, 8, 8, 4, 3, 3, 1, 1);
  CHECK(d.h_out == 8);
  CHECK(d.w_out == 8);

  const auto s2 = k::conv_dims(1, 3, 192, 192, 32, 3, 3, 2, 1);
  CHECK(s2.h_out == 96);
  CHECK(s2.w_out == 96);

  const auto patch = k::conv_dims(1, 32, 96, 96, 64, 2, 2, 2, 0);
  CHECK(patch.h_out == 48);
  CHECK(patch.w_out == 48);

  CHECK_THROWS_AS(k::conv_dims(1, 3, 8, 8, 4, 3, 3, 0, 1), ConfigError);
  CHECK_THROWS_AS(k::conv_dims(1, 3, 8, 8, 4, 0, 3, 1, 1), ConfigError);
  CHECK_THROWS_AS(k::conv_dims(1, 3, 2, 2, 4, 5, 5, 1, 0), ConfigError);
}

TEST_CASE("gemm family matches the serial reference bitwise") {
  Rng rng(11);
  // sizes chosen to exercise remainder rows/columns, not just round ones
  for (const auto [m, n, kk] : {std::array<std::size_t, 3>{1, 1, 1},
                                std::array<std::size_t, 3>{7, 5, 3},
                                std::array<std::size_t, 3>{33, 17, 29},
                                std::array<std::size_t, 3>{64, 64, 64}}) {
    const auto a = rand_vec(m * kk, rng);
    const auto b = rand_vec(kk * n, rng);
    const auto bt = rand_vec(n * kk, rng);
    const auto base = rand_vec(m * n, rng);

    std::vector<double> c0 = base, c1 = base;
    k::serial::gemm(a.data(), b.data(), c0.data(), m, n, kk, true);
    k::gemm(a.data(), b.data(), c1.data(), m, n, kk, true);
    CHECK(bitwise_equal(c0, c1));

    c0 = base, c1 = base;
    k::serial::gemm_nt(a.data(), bt.data(), c0.data(), m, n, kk, true);
    k::gemm_nt(a.data(), bt.data(), c1.data(), m, n, kk, true);
    CHECK(bitwise_equal(c0, c1));

    const auto at = rand_vec(kk * m, rng);
    c0 = base, c1 = base;
    k::serial::gemm_tn(at.data(), b.data(), c0.data(), m, n, kk, true);
    k::gemm_tn(at.data(), b.data(), c1.data(), m, n, kk, true);
    CHECK(bitwise_equal(c0, c1));
  }
}

TEST_CASE("gemm against a tiny hand computation") {
  // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
  const std::vector<double> a{1, 2, 3, 4}, b{5, 6, 7, 8};
  std::vector<double> c(4);
  k::gemm(a.data(), b.data(), c.data(), 2, 2, 2);
  CHECK(c == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("gemm MAC counting") {
  const std::size_t m = 13, n = 7, kk = 5;
  Rng rng(3);
  const auto a = rand_vec(m * kk, rng);
  const auto b = rand_vec(kk * n, rng);
  std::vector<double> counted(m * n), plain(m * n);
  unsigned long long macs = 0;
  k::gemm(a.data(), b.data(), counted.data(), m, n, kk, false, &macs);
  CHECK(macs == m * n * kk);
  k::gemm(a.data(), b.data(), plain.data(), m, n, kk);
  CHECK(bitwise_equal(counted, plain));  // counting must not change rounding

  macs = 0;
  const auto bt = rand_vec(n * kk, rng);
  k::gemm_nt(a.data(), bt.data(), counted.data(), m, n, kk, false, &macs);
  CHECK(macs == m * n * kk);
}

TEST_CASE("conv2d forward/backward match the serial reference bitwise") {
  Rng rng(23);
  const struct {
    std::size_t n, c_in, h, w, c_out, kh, kw, stride, pad;
  } cases[] = {
      {2, 3, 9, 7, 4, 3, 3, 1, 1},
      {1, 4, 8, 8, 6, 3, 3, 2, 1},
      {3, 2, 10, 10, 5, 2, 2, 2, 0},  // patch-style even kernel
      {1, 1, 5, 5, 1, 5, 5, 1, 2},
  };
  for (const auto& c : cases) {
    const auto d =
        k::conv_dims(c.n, c.c_in, c.h, c.w, c.c_out, c.kh, c.kw, c.stride, c.pad);
    const auto in = rand_vec(d.n * d.c_in * d.h * d.w, rng);
    const auto wgt = rand_vec(d.c_out * d.c_in * d.kh * d.kw, rng);
    const auto bias = rand_vec(d.c_out, rng);
    const std::size_t out_n = d.n * d.c_out * d.h_out * d.w_out;

    std::vector<double> o0(out_n), o1(out_n);
    k::serial::conv2d_forward(in.data(), wgt.data(), bias.data(), o0.data(), d);
    k::conv2d_forward(in.data(), wgt.data(), bias.data(), o1.data(), d);
    CHECK(bitwise_equal(o0, o1));

    const auto dout = rand_vec(out_n, rng);
    std::vector<double> di0(in.size()), di1(in.size());
    k::serial::conv2d_backward_input(dout.data(), wgt.data(), di0.data(), d);
    k::conv2d_backward_input(dout.data(), wgt.data(), di1.data(), d);
    CHECK(bitwise_equal(di0, di1));

    std::vector<double> dw0(wgt.size()), dw1(wgt.size());
    std::vector<double> db0(d.c_out), db1(d.c_out);
    k::serial::conv2d_backward_params(dout.data(), in.data(), dw0.data(),
                                      db0.data(), d);
    k::conv2d_backward_params(dout.data(), in.data(), dw1.data(), db1.data(), d);
    CHECK(bitwise_equal(dw0, dw1));
    CHECK(bitwise_equal(db0, db1));
  }
}

TEST_CASE("conv2d forward against a hand-computed 1x1x3x3 case") {
  // 3x3 input, 3x3 kernel of ones, pad 1, stride 1: each output is the sum
  // of the in-bounds 3x3 neighborhood.
  const auto d = k::conv_dims(1, 1, 3, 3, 1, 3, 3, 1, 1);
  const std::vector<double> in{1, 2, 3, 4, 5, 6, 7, 8, 9};
  const std::vector<double> wgt(9, 1.0);
  const std::vector<double> bias{0.0};
  std::vector<double> out(9);
  k::conv2d_forward(in.data(), wgt.data(), bias.data(), out.data(), d);
  CHECK(out == std::vector<double>{12, 21, 16, 27, 45, 33, 24, 39, 28});
}

TEST_CASE("depthwise kernels match the serial reference bitwise") {
  Rng rng(31);
  const struct {
    std::size_t n, c, h, w, kh, kw, stride, pad;
  } cases[] = {
      {2, 4, 8, 8, 3, 3, 1, 1},
      {1, 3, 8, 8, 2, 2, 2, 0},  // k/v reduction shape
      {2, 2, 7, 9, 3, 3, 2, 1},
  };
  for (const auto& c : cases) {
    const auto d = k::conv_dims(c.n, c.c, c.h, c.w, c.c, c.kh, c.kw, c.stride, c.pad);
    const auto in = rand_vec(d.n * d.c_in * d.h * d.w, rng);
    const auto wgt = rand_vec(d.c_in * d.kh * d.kw, rng);
    const std::size_t out_n = d.n * d.c_in * d.h_out * d.w_out;

    std::vector<double> o0(out_n), o1(out_n);
    k::serial::depthwise_forward(in.data(), wgt.data(), o0.data(), d);
    k::depthwise_forward(in.data(), wgt.data(), o1.data(), d);
    CHECK(bitwise_equal(o0, o1));

    const auto dout = rand_vec(out_n, rng);
    std::vector<double> di0(in.size()), di1(in.size());
    k::serial::depthwise_backward_input(dout.data(), wgt.data(), di0.data(), d);
    k::depthwise_backward_input(dout.data(), wgt.data(), di1.data(), d);
    CHECK(bitwise_equal(di0, di1));

    std::vector<double> dw0(wgt.size()), dw1(wgt.size());
    k::serial::depthwise_backward_weight(dout.data(), in.data(), dw0.data(), d);
    k::depthwise_backward_weight(dout.data(), in.data(), dw1.data(), d);
    CHECK(bitwise_equal(dw0, dw1));
  }
}

TEST_CASE("im2col and col2im_add are adjoint") {
  // <im2col(x), y> == <x, col2im_add(y)> pins the index maps against each
  // other without enumerating them.
  Rng rng(41);
  const auto d = k::conv_dims(1, 3, 6, 5, 2, 3, 3, 2, 1);
  const std::size_t cols = d.c_in * d.kh * d.kw * d.h_out * d.w_out;
  const auto x = rand_vec(d.c_in * d.h * d.w, rng);
  const auto y = rand_vec(cols, rng);

  std::vector<double> col(cols);
  k::im2col(x.data(), d, col.data());
  double lhs = 0.0;
  for (std::size_t i = 0; i < cols; ++i) lhs += col[i] * y[i];

  std::vector<double> back(x.size(), 0.0);
  k::col2im_add(y.data(), d, back.data());
  double rhs = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * back[i];

  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("stride-2 depthwise hand case") {
  // 4x4 single-channel input, 2x2 kernel of ones, stride 2: output sums each
  // disjoint 2x2 tile.
  const auto d = k::conv_dims(1, 1, 4, 4, 1, 2, 2, 2, 0);
  const std::vector<double> in{1, 2, 3, 4, 5, 6, 7, 8,
                               9, 10, 11, 12, 13, 14, 15, 16};
  const std::vector<double> wgt{1, 1, 1, 1};
  std::vector<double> out(4);
  k::depthwise_forward(in.data(), wgt.data(), out.data(), d);
  CHECK(out == std::vector<double>{14, 22, 46, 54});
}
