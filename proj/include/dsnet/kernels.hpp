#pragma once

#include <cstddef>
#include <cstdint>

#include "dsnet/common.hpp"

// Low-level numeric kernels over raw double arrays. The default entry points
// parallelize over independent output elements with OpenMP; each output is
// accumulated serially in a fixed k-order, so results are bitwise identical
// to the serial reference implementations in kernels::serial (the project is
// built with -ffp-contract=off).
namespace dsnet::kernels {

struct ConvDims {
  std::size_t n, c_in, h, w;   // input  [n, c_in, h, w]
  std::size_t c_out, kh, kw;   // weight [c_out, c_in, kh, kw] (depthwise: [c, 1, kh, kw])
  std::size_t stride, pad;
  std::size_t h_out, w_out;
};

ConvDims conv_dims(std::size_t n, std::size_t c_in, std::size_t h, std::size_t w,
                   std::size_t c_out, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad);

// C[M,N] = (acc ? C : 0) + A[M,K] * B[K,N]
void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t n, std::size_t k, bool acc = false,
          unsigned long long* macs = nullptr);
// C[M,N] = (acc ? C : 0) + A[M,K] * B[N,K]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k, bool acc = false,
             unsigned long long* macs = nullptr);
// C[M,N] = (acc ? C : 0) + A[K,M]^T * B[K,N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k, bool acc = false);

// col has layout [(c_in*kh*kw), (h_out*w_out)], out-of-bounds taps are zero.
void im2col(const double* img, const ConvDims& d, double* col);
void col2im_add(const double* col, const ConvDims& d, double* img);

void conv2d_forward(const double* in, const double* wgt, const double* bias,
                    double* out, const ConvDims& d,
                    unsigned long long* macs = nullptr);
void conv2d_backward_input(const double* dout, const double* wgt, double* din,
                           const ConvDims& d);
void conv2d_backward_params(const double* dout, const double* in, double* dwgt,
                            double* dbias, const ConvDims& d);

void depthwise_forward(const double* in, const double* wgt, double* out,
                       const ConvDims& d, unsigned long long* macs = nullptr);
void depthwise_backward_input(const double* dout, const double* wgt,
                              double* din, const ConvDims& d);
void depthwise_backward_weight(const double* dout, const double* in,
                               double* dwgt, const ConvDims& d);

// Naive reference implementations, kept for parity tests and benchmarks.
namespace serial {
void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t n, std::size_t k, bool acc = false);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k, bool acc = false);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k, bool acc = false);
void conv2d_forward(const double* in, const double* wgt, const double* bias,
                    double* out, const ConvDims& d);
void conv2d_backward_input(const double* dout, const double* wgt, double* din,
                           const ConvDims& d);
void conv2d_backward_params(const double* dout, const double* in, double* dwgt,
                            double* dbias, const ConvDims& d);
void depthwise_forward(const double* in, const double* wgt, double* out,
                       const ConvDims& d);
void depthwise_backward_input(const double* dout, const double* wgt,
                              double* din, const ConvDims& d);
void depthwise_backward_weight(const double* dout, const double* in,
                               double* dwgt, const ConvDims& d);
}  // namespace serial

}  // namespace dsnet::kernels
