// Times the OpenMP kernels against the serial references and verifies that
// both produce bitwise-identical output while at it.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dsnet/common.hpp"
#include "dsnet/kernels.hpp"

namespace {

using dsnet::Rng;
namespace k = dsnet::kernels;

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

double time_best_of(const std::function<void()>& fn, int reps = 3) {
  double best = 1e300;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (s < best) best = s;
  }
  return best;
}

void report(const std::string& name, double serial_s, double parallel_s,
            bool identical) {
  std::printf("%-28s %10.2f ms %10.2f ms   x%-6.2f %s\n", name.c_str(),
              serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s,
              identical ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP\n");
#endif
  std::printf("%-28s %13s %13s   %-7s\n", "kernel", "serial", "parallel",
              "speedup");

  Rng rng(7);

  {
    const std::size_t m = 384, n = 384, kk = 384;
    const auto a = random_vec(m * kk, rng);
    const auto b = random_vec(kk * n, rng);
    std::vector<double> c0(m * n), c1(m * n);
    const double ts = time_best_of([&] { k::serial::gemm(a.data(), b.data(), c0.data(), m, n, kk); });
    const double tp = time_best_of([&] { k::gemm(a.data(), b.data(), c1.data(), m, n, kk); });
    report("gemm 384^3", ts, tp, std::memcmp(c0.data(), c1.data(), c0.size() * 8) == 0);
  }

  {
    const std::size_t m = 384, n = 384, kk = 384;
    const auto a = random_vec(m * kk, rng);
    const auto b = random_vec(n * kk, rng);
    std::vector<double> c0(m * n), c1(m * n);
    const double ts = time_best_of([&] { k::serial::gemm_nt(a.data(), b.data(), c0.data(), m, n, kk); });
    const double tp = time_best_of([&] { k::gemm_nt(a.data(), b.data(), c1.data(), m, n, kk); });
    report("gemm_nt 384^3", ts, tp, std::memcmp(c0.data(), c1.data(), c0.size() * 8) == 0);
  }

  {
    const auto d = k::conv_dims(4, 32, 64, 64, 64, 3, 3, 1, 1);
    const auto in = random_vec(d.n * d.c_in * d.h * d.w, rng);
    const auto wgt = random_vec(d.c_out * d.c_in * d.kh * d.kw, rng);
    const auto bias = random_vec(d.c_out, rng);
    std::vector<double> o0(d.n * d.c_out * d.h_out * d.w_out), o1(o0.size());
    const double ts = time_best_of([&] { k::serial::conv2d_forward(in.data(), wgt.data(), bias.data(), o0.data(), d); });
    const double tp = time_best_of([&] { k::conv2d_forward(in.data(), wgt.data(), bias.data(), o1.data(), d); });
    report("conv2d 4x32x64x64 -> 64", ts, tp, std::memcmp(o0.data(), o1.data(), o0.size() * 8) == 0);
  }

  {
    const auto d = k::conv_dims(4, 32, 64, 64, 64, 3, 3, 1, 1);
    const auto dout = random_vec(d.n * d.c_out * d.h_out * d.w_out, rng);
    const auto wgt = random_vec(d.c_out * d.c_in * d.kh * d.kw, rng);
    std::vector<double> g0(d.n * d.c_in * d.h * d.w), g1(g0.size());
    const double ts = time_best_of([&] { k::serial::conv2d_backward_input(dout.data(), wgt.data(), g0.data(), d); });
    const double tp = time_best_of([&] { k::conv2d_backward_input(dout.data(), wgt.data(), g1.data(), d); });
    report("conv2d bwd input", ts, tp, std::memcmp(g0.data(), g1.data(), g0.size() * 8) == 0);
  }

  {
    const auto d = k::conv_dims(4, 32, 64, 64, 64, 3, 3, 1, 1);
    const auto dout = random_vec(d.n * d.c_out * d.h_out * d.w_out, rng);
    const auto in = random_vec(d.n * d.c_in * d.h * d.w, rng);
    std::vector<double> w0(d.c_out * d.c_in * d.kh * d.kw), w1(w0.size());
    std::vector<double> b0(d.c_out), b1(d.c_out);
    const double ts = time_best_of([&] { k::serial::conv2d_backward_params(dout.data(), in.data(), w0.data(), b0.data(), d); });
    const double tp = time_best_of([&] { k::conv2d_backward_params(dout.data(), in.data(), w1.data(), b1.data(), d); });
    report("conv2d bwd params", ts, tp,
           std::memcmp(w0.data(), w1.data(), w0.size() * 8) == 0 &&
               std::memcmp(b0.data(), b1.data(), b0.size() * 8) == 0);
  }

  {
    const auto d = k::conv_dims(8, 64, 96, 96, 64, 3, 3, 1, 1);
    const auto in = random_vec(d.n * d.c_in * d.h * d.w, rng);
    const auto wgt = random_vec(d.c_in * d.kh * d.kw, rng);
    std::vector<double> o0(d.n * d.c_in * d.h_out * d.w_out), o1(o0.size());
    const double ts = time_best_of([&] { k::serial::depthwise_forward(in.data(), wgt.data(), o0.data(), d); });
    const double tp = time_best_of([&] { k::depthwise_forward(in.data(), wgt.data(), o1.data(), d); });
    report("depthwise 8x64x96x96", ts, tp, std::memcmp(o0.data(), o1.data(), o0.size() * 8) == 0);
  }

  return 0;
}
