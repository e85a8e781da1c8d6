#include "dsnet/kernels.hpp"

#include <cstring>
#include <string>
#include <vector>

namespace dsnet::kernels {

ConvDims conv_dims(std::size_t n, std::size_t c_in, std::size_t h, std::size_t w,
                   std::size_t c_out, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ConfigError("conv: stride must be positive");
  if (kh == 0 || kw == 0) throw ConfigError("conv: kernel extents must be positive");
  const std::ptrdiff_t ho = (static_cast<std::ptrdiff_t>(h) + 2 * static_cast<std::ptrdiff_t>(pad) -
                             static_cast<std::ptrdiff_t>(kh)) / static_cast<std::ptrdiff_t>(stride) + 1;
  const std::ptrdiff_t wo = (static_cast<std::ptrdiff_t>(w) + 2 * static_cast<std::ptrdiff_t>(pad) -
                             static_cast<std::ptrdiff_t>(kw)) / static_cast<std::ptrdiff_t>(stride) + 1;
  if (ho < 1 || wo < 1 ||
      static_cast<std::ptrdiff_t>(h) + 2 * static_cast<std::ptrdiff_t>(pad) < static_cast<std::ptrdiff_t>(kh) ||
      static_cast<std::ptrdiff_t>(w) + 2 * static_cast<std::ptrdiff_t>(pad) < static_cast<std::ptrdiff_t>(kw))
    throw ConfigError("conv: non-positive output extent for input " + std::to_string(h) + "x" +
                      std::to_string(w) + ", kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                      ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  return ConvDims{n, c_in, h, w, c_out, kh, kw, stride, pad,
                  static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)};
}

void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t n, std::size_t k, bool acc, unsigned long long* macs) {
  if (macs) {  // instrumented path: counts every multiply-accumulate executed
    unsigned long long cnt = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = acc ? c[i * n + j] : 0.0;
        for (std::size_t kk = 0; kk < k; ++kk) {
          s += a[i * k + kk] * b[kk * n + j];
          ++cnt;
        }
        c[i * n + j] = s;
      }
    *macs += cnt;
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!acc)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k, bool acc, unsigned long long* macs) {
  if (macs) {
    unsigned long long cnt = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = acc ? c[i * n + j] : 0.0;
        for (std::size_t kk = 0; kk < k; ++kk) {
          s += a[i * k + kk] * b[j * k + kk];
          ++cnt;
        }
        c[i * n + j] = s;
      }
    *macs += cnt;
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = acc ? crow[j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      crow[j] = s;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k, bool acc) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!acc)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aki = a[kk * m + i];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
}

void im2col(const double* img, const ConvDims& d, double* col) {
  const std::size_t l = d.h_out * d.w_out;
#pragma omp parallel for schedule(static)
  for (std::size_t ci = 0; ci < d.c_in; ++ci) {
    const double* plane = img + ci * d.h * d.w;
    for (std::size_t ky = 0; ky < d.kh; ++ky)
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        double* row = col + ((ci * d.kh + ky) * d.kw + kx) * l;
        for (std::size_t oy = 0; oy < d.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          for (std::size_t ox = 0; ox < d.w_out; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            const bool in = iy >= 0 && iy < static_cast<std::ptrdiff_t>(d.h) &&
                            ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w);
            row[oy * d.w_out + ox] = in ? plane[iy * d.w + ix] : 0.0;
          }
        }
      }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* img) {
  const std::size_t l = d.h_out * d.w_out;
#pragma omp parallel for schedule(static)
  for (std::size_t ci = 0; ci < d.c_in; ++ci) {
    double* plane = img + ci * d.h * d.w;
    for (std::size_t ky = 0; ky < d.kh; ++ky)
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        const double* row = col + ((ci * d.kh + ky) * d.kw + kx) * l;
        for (std::size_t oy = 0; oy < d.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          for (std::size_t ox = 0; ox < d.w_out; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
            plane[iy * d.w + ix] += row[oy * d.w_out + ox];
          }
        }
      }
  }
}

void conv2d_forward(const double* in, const double* wgt, const double* bias,
                    double* out, const ConvDims& d, unsigned long long* macs) {
  const std::size_t l = d.h_out * d.w_out;
  const std::size_t kdim = d.c_in * d.kh * d.kw;
  std::vector<double> col(kdim * l);
  for (std::size_t img = 0; img < d.n; ++img) {
    im2col(in + img * d.c_in * d.h * d.w, d, col.data());
    double* out_img = out + img * d.c_out * l;
    gemm(wgt, col.data(), out_img, d.c_out, l, kdim, false, macs);
    if (bias) {
#pragma omp parallel for schedule(static)
      for (std::size_t co = 0; co < d.c_out; ++co) {
        const double bc = bias[co];
        double* orow = out_img + co * l;
        for (std::size_t j = 0; j < l; ++j) orow[j] += bc;
      }
    }
  }
}

void conv2d_backward_input(const double* dout, const double* wgt, double* din,
                           const ConvDims& d) {
  const std::size_t l = d.h_out * d.w_out;
  const std::size_t kdim = d.c_in * d.kh * d.kw;
  const std::size_t in_sz = d.c_in * d.h * d.w;
  std::vector<double> dcol(kdim * l);
  std::memset(din, 0, d.n * in_sz * sizeof(double));
  for (std::size_t img = 0; img < d.n; ++img) {
    gemm_tn(wgt, dout + img * d.c_out * l, dcol.data(), kdim, l, d.c_out);
    col2im_add(dcol.data(), d, din + img * in_sz);
  }
}

void conv2d_backward_params(const double* dout, const double* in, double* dwgt,
                            double* dbias, const ConvDims& d) {
  const std::size_t l = d.h_out * d.w_out;
  const std::size_t kdim = d.c_in * d.kh * d.kw;
  std::vector<double> col(kdim * l);
  std::memset(dwgt, 0, d.c_out * kdim * sizeof(double));
  for (std::size_t img = 0; img < d.n; ++img) {
    im2col(in + img * d.c_in * d.h * d.w, d, col.data());
    gemm_nt(dout + img * d.c_out * l, col.data(), dwgt, d.c_out, kdim, l, true);
  }
  if (dbias) {
#pragma omp parallel for schedule(static)
    for (std::size_t co = 0; co < d.c_out; ++co) {
      double s = 0.0;
      for (std::size_t img = 0; img < d.n; ++img) {
        const double* row = dout + (img * d.c_out + co) * l;
        for (std::size_t j = 0; j < l; ++j) s += row[j];
      }
      dbias[co] = s;
    }
  }
}

void depthwise_forward(const double* in, const double* wgt, double* out,
                       const ConvDims& d, unsigned long long* macs) {
  const std::size_t planes = d.n * d.c_in;
  if (macs) {  // one MAC per in-bounds tap; the reductions here run unpadded
    unsigned long long cnt = 0;
    for (std::size_t oy = 0; oy < d.h_out; ++oy)
      for (std::size_t ox = 0; ox < d.w_out; ++ox)
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
            ++cnt;
          }
        }
    *macs += cnt * planes;
  }
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t c = p % d.c_in;
    const double* plane = in + p * d.h * d.w;
    const double* w = wgt + c * d.kh * d.kw;
    double* oplane = out + p * d.h_out * d.w_out;
    for (std::size_t oy = 0; oy < d.h_out; ++oy)
      for (std::size_t ox = 0; ox < d.w_out; ++ox) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
            s += plane[iy * d.w + ix] * w[ky * d.kw + kx];
          }
        }
        oplane[oy * d.w_out + ox] = s;
      }
  }
}

void depthwise_backward_input(const double* dout, const double* wgt,
                              double* din, const ConvDims& d) {
  const std::size_t planes = d.n * d.c_in;
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t c = p % d.c_in;
    const double* doplane = dout + p * d.h_out * d.w_out;
    const double* w = wgt + c * d.kh * d.kw;
    double* dplane = din + p * d.h * d.w;
    for (std::size_t iy = 0; iy < d.h; ++iy)
      for (std::size_t ix = 0; ix < d.w; ++ix) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          const std::ptrdiff_t num_y = static_cast<std::ptrdiff_t>(iy + d.pad) -
                                       static_cast<std::ptrdiff_t>(ky);
          if (num_y < 0 || num_y % static_cast<std::ptrdiff_t>(d.stride)) continue;
          const std::size_t oy = static_cast<std::size_t>(num_y) / d.stride;
          if (oy >= d.h_out) continue;
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const std::ptrdiff_t num_x = static_cast<std::ptrdiff_t>(ix + d.pad) -
                                         static_cast<std::ptrdiff_t>(kx);
            if (num_x < 0 || num_x % static_cast<std::ptrdiff_t>(d.stride)) continue;
            const std::size_t ox = static_cast<std::size_t>(num_x) / d.stride;
            if (ox >= d.w_out) continue;
            s += doplane[oy * d.w_out + ox] * w[ky * d.kw + kx];
          }
        }
        dplane[iy * d.w + ix] = s;
      }
  }
}

void depthwise_backward_weight(const double* dout, const double* in,
                               double* dwgt, const ConvDims& d) {
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < d.c_in; ++c) {
    double* w = dwgt + c * d.kh * d.kw;
    for (std::size_t ky = 0; ky < d.kh; ++ky)
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        double s = 0.0;
        for (std::size_t img = 0; img < d.n; ++img) {
          const double* plane = in + (img * d.c_in + c) * d.h * d.w;
          const double* doplane = dout + (img * d.c_in + c) * d.h_out * d.w_out;
          for (std::size_t oy = 0; oy < d.h_out; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t ox = 0; ox < d.w_out; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                        static_cast<std::ptrdiff_t>(d.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              s += doplane[oy * d.w_out + ox] * plane[iy * d.w + ix];
            }
          }
        }
        w[ky * d.kw + kx] = s;
      }
  }
}

namespace serial {

void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t n, std::size_t k, bool acc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = acc ? c[i * n + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = s;
    }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k, bool acc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = acc ? c[i * n + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[j * k + kk];
      c[i * n + j] = s;
    }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k, bool acc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = acc ? c[i * n + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += a[kk * m + i] * b[kk * n + j];
      c[i * n + j] = s;
    }
}

void conv2d_forward(const double* in, const double* wgt, const double* bias,
                    double* out, const ConvDims& d) {
  const std::size_t l = d.h_out * d.w_out;
  for (std::size_t img = 0; img < d.n; ++img)
    for (std::size_t co = 0; co < d.c_out; ++co)
      for (std::size_t oy = 0; oy < d.h_out; ++oy)
        for (std::size_t ox = 0; ox < d.w_out; ++ox) {
          double s = 0.0;
          for (std::size_t ci = 0; ci < d.c_in; ++ci)
            for (std::size_t ky = 0; ky < d.kh; ++ky)
              for (std::size_t kx = 0; kx < d.kw; ++kx) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                          static_cast<std::ptrdiff_t>(d.pad);
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                          static_cast<std::ptrdiff_t>(d.pad);
                const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(d.h) &&
                                    ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w);
                const double v = inside ? in[((img * d.c_in + ci) * d.h + iy) * d.w + ix] : 0.0;
                s += v * wgt[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
              }
          if (bias) s += bias[co];
          out[(img * d.c_out + co) * l + oy * d.w_out + ox] = s;
        }
}

void conv2d_backward_input(const double* dout, const double* wgt, double* din,
                           const ConvDims& d) {
  const std::size_t l = d.h_out * d.w_out;
  for (std::size_t img = 0; img < d.n; ++img)
    for (std::size_t ci = 0; ci < d.c_in; ++ci)
      for (std::size_t iy = 0; iy < d.h; ++iy)
        for (std::size_t ix = 0; ix < d.w; ++ix) {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < d.kh; ++ky)
            for (std::size_t kx = 0; kx < d.kw; ++kx) {
              const std::ptrdiff_t num_y = static_cast<std::ptrdiff_t>(iy + d.pad) -
                                           static_cast<std::ptrdiff_t>(ky);
              const std::ptrdiff_t num_x = static_cast<std::ptrdiff_t>(ix + d.pad) -
                                           static_cast<std::ptrdiff_t>(kx);
              if (num_y < 0 || num_x < 0) continue;
              if (num_y % static_cast<std::ptrdiff_t>(d.stride) ||
                  num_x % static_cast<std::ptrdiff_t>(d.stride))
                continue;
              const std::size_t oy = static_cast<std::size_t>(num_y) / d.stride;
              const std::size_t ox = static_cast<std::size_t>(num_x) / d.stride;
              if (oy >= d.h_out || ox >= d.w_out) continue;
              double contrib = 0.0;
              for (std::size_t co = 0; co < d.c_out; ++co)
                contrib += wgt[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx] *
                           dout[(img * d.c_out + co) * l + oy * d.w_out + ox];
              acc += contrib;
            }
          din[((img * d.c_in + ci) * d.h + iy) * d.w + ix] = acc;
        }
}

void conv2d_backward_params(const double* dout, const double* in, double* dwgt,
                            double* dbias, const ConvDims& d) {
  const std::size_t l = d.h_out * d.w_out;
  for (std::size_t co = 0; co < d.c_out; ++co)
    for (std::size_t ci = 0; ci < d.c_in; ++ci)
      for (std::size_t ky = 0; ky < d.kh; ++ky)
        for (std::size_t kx = 0; kx < d.kw; ++kx) {
          double s = 0.0;
          for (std::size_t img = 0; img < d.n; ++img)
            for (std::size_t oy = 0; oy < d.h_out; ++oy)
              for (std::size_t ox = 0; ox < d.w_out; ++ox) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                          static_cast<std::ptrdiff_t>(d.pad);
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                          static_cast<std::ptrdiff_t>(d.pad);
                const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(d.h) &&
                                    ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w);
                const double v = inside ? in[((img * d.c_in + ci) * d.h + iy) * d.w + ix] : 0.0;
                s += dout[(img * d.c_out + co) * l + oy * d.w_out + ox] * v;
              }
          dwgt[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx] = s;
        }
  if (dbias)
    for (std::size_t co = 0; co < d.c_out; ++co) {
      double s = 0.0;
      for (std::size_t img = 0; img < d.n; ++img)
        for (std::size_t j = 0; j < l; ++j)
          s += dout[(img * d.c_out + co) * l + j];
      dbias[co] = s;
    }
}

void depthwise_forward(const double* in, const double* wgt, double* out,
                       const ConvDims& d) {
  for (std::size_t p = 0; p < d.n * d.c_in; ++p) {
    const std::size_t c = p % d.c_in;
    const double* plane = in + p * d.h * d.w;
    const double* w = wgt + c * d.kh * d.kw;
    double* oplane = out + p * d.h_out * d.w_out;
    for (std::size_t oy = 0; oy < d.h_out; ++oy)
      for (std::size_t ox = 0; ox < d.w_out; ++ox) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
            s += plane[iy * d.w + ix] * w[ky * d.kw + kx];
          }
        }
        oplane[oy * d.w_out + ox] = s;
      }
  }
}

void depthwise_backward_input(const double* dout, const double* wgt,
                              double* din, const ConvDims& d) {
  for (std::size_t p = 0; p < d.n * d.c_in; ++p) {
    const std::size_t c = p % d.c_in;
    const double* doplane = dout + p * d.h_out * d.w_out;
    const double* w = wgt + c * d.kh * d.kw;
    double* dplane = din + p * d.h * d.w;
    for (std::size_t iy = 0; iy < d.h; ++iy)
      for (std::size_t ix = 0; ix < d.w; ++ix) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          const std::ptrdiff_t num_y = static_cast<std::ptrdiff_t>(iy + d.pad) -
                                       static_cast<std::ptrdiff_t>(ky);
          if (num_y < 0 || num_y % static_cast<std::ptrdiff_t>(d.stride)) continue;
          const std::size_t oy = static_cast<std::size_t>(num_y) / d.stride;
          if (oy >= d.h_out) continue;
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const std::ptrdiff_t num_x = static_cast<std::ptrdiff_t>(ix + d.pad) -
                                         static_cast<std::ptrdiff_t>(kx);
            if (num_x < 0 || num_x % static_cast<std::ptrdiff_t>(d.stride)) continue;
            const std::size_t ox = static_cast<std::size_t>(num_x) / d.stride;
            if (ox >= d.w_out) continue;
            s += doplane[oy * d.w_out + ox] * w[ky * d.kw + kx];
          }
        }
        dplane[iy * d.w + ix] = s;
      }
  }
}

void depthwise_backward_weight(const double* dout, const double* in,
                               double* dwgt, const ConvDims& d) {
  for (std::size_t c = 0; c < d.c_in; ++c) {
    double* w = dwgt + c * d.kh * d.kw;
    for (std::size_t ky = 0; ky < d.kh; ++ky)
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        double s = 0.0;
        for (std::size_t img = 0; img < d.n; ++img) {
          const double* plane = in + (img * d.c_in + c) * d.h * d.w;
          const double* doplane = dout + (img * d.c_in + c) * d.h_out * d.w_out;
          for (std::size_t oy = 0; oy < d.h_out; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t ox = 0; ox < d.w_out; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                        static_cast<std::ptrdiff_t>(d.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              s += doplane[oy * d.w_out + ox] * plane[iy * d.w + ix];
            }
          }
        }
        w[ky * d.kw + kx] = s;
      }
  }
}

}  // namespace serial

}  // namespace dsnet::kernels
