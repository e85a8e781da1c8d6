#include "dsnet/ops.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <string>

#include "dsnet/kernels.hpp"

namespace dsnet::ops {

namespace {

thread_local unsigned long long* g_macs = nullptr;
thread_local double g_gelu_grad_scale = 1.0;

bool wants(const std::shared_ptr<TensorData>& s) {
  return s->requires_grad || s->tracked;
}

bool live(const Tensor& t) {
  return graph().recording() && t.defined() &&
         (t.requires_grad() || t.tracked());
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

std::size_t prod(const Shape& s, std::size_t lo, std::size_t hi) {
  std::size_t p = 1;
  for (std::size_t i = lo; i < hi; ++i) p *= s[i];
  return p;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_value(double x) { return x * 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

}  // namespace

void set_mac_counter(unsigned long long* counter) { g_macs = counter; }
unsigned long long* mac_counter() { return g_macs; }
void set_gelu_grad_scale(double s) { g_gelu_grad_scale = s; }

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = out.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (live(a) || live(b)) {
    out.mark_tracked();
    auto sa = a.storage(), sb = b.storage();
    graph().record({"add", out.storage(), {sa, sb},
                    [sa, sb](BackwardCtx& ctx, const std::vector<double>& g) {
                      if (wants(sa)) {
                        auto& da = ctx.accum(sa);
                        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                      }
                      if (wants(sb)) {
                        auto& db = ctx.accum(sb);
                        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                      }
                    }});
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = out.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (live(a) || live(b)) {
    out.mark_tracked();
    auto sa = a.storage(), sb = b.storage();
    graph().record({"mul", out.storage(), {sa, sb},
                    [sa, sb](BackwardCtx& ctx, const std::vector<double>& g) {
                      if (wants(sa)) {
                        auto& da = ctx.accum(sa);
                        for (std::size_t i = 0; i < g.size(); ++i)
                          da[i] += g[i] * sb->value[i];
                      }
                      if (wants(sb)) {
                        auto& db = ctx.accum(sb);
                        for (std::size_t i = 0; i < g.size(); ++i)
                          db[i] += g[i] * sa->value[i];
                      }
                    }});
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = out.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    graph().record({"scale", out.storage(), {sa},
                    [sa, s](BackwardCtx& ctx, const std::vector<double>& g) {
                      auto& da = ctx.accum(sa);
                      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s;
                    }});
  }
  return out;
}

Tensor gelu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = out.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) po[i] = gelu_value(pa[i]);
  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    graph().record({"gelu", out.storage(), {sa},
                    [sa](BackwardCtx& ctx, const std::vector<double>& g) {
                      const double sc = g_gelu_grad_scale;
                      auto& da = ctx.accum(sa);
                      const std::size_t n = g.size();
#pragma omp parallel for schedule(static)
                      for (std::size_t i = 0; i < n; ++i)
                        da[i] += sc * g[i] * gelu_slope(sa->value[i]);
                    }});
  }
  return out;
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                      shape_str(shape));
  Tensor out = Tensor::from(std::move(shape), a.vec());
  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    graph().record({"reshape", out.storage(), {sa},
                    [sa](BackwardCtx& ctx, const std::vector<double>& g) {
                      auto& da = ctx.accum(sa);
                      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                    }});
  }
  return out;
}

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r)
    throw ConfigError("transpose: perm rank " + std::to_string(perm.size()) +
                      " vs tensor rank " + std::to_string(r));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ConfigError("transpose: invalid permutation");
    seen[p] = true;
  }
  const Shape& ish = a.shape();
  Shape osh(r);
  for (std::size_t i = 0; i < r; ++i) osh[i] = ish[perm[i]];
  std::vector<std::size_t> istr(r, 1);
  for (std::size_t i = r; i-- > 1;) istr[i - 1] = istr[i] * ish[i];
  std::vector<std::size_t> strides(r);  // input stride per output axis
  for (std::size_t i = 0; i < r; ++i) strides[i] = istr[perm[i]];

  auto src_offset = [r](std::size_t o, const Shape& odims,
                        const std::vector<std::size_t>& str) {
    std::size_t off = 0;
    for (std::size_t j = r; j-- > 0;) {
      off += (o % odims[j]) * str[j];
      o /= odims[j];
    }
    return off;
  };

  Tensor out = Tensor::zeros(osh);
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t n = out.size();
#pragma omp parallel for schedule(static)
  for (std::size_t o = 0; o < n; ++o) po[o] = pa[src_offset(o, osh, strides)];

  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    graph().record(
        {"transpose", out.storage(), {sa},
         [sa, osh, strides, src_offset](BackwardCtx& ctx,
                                        const std::vector<double>& g) {
           auto& da = ctx.accum(sa);
           const std::size_t n = g.size();
#pragma omp parallel for schedule(static)
           for (std::size_t o = 0; o < n; ++o)
             da[src_offset(o, osh, strides)] += g[o];
         }});
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank())
    throw ConfigError("concat: incompatible ranks or axis");
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw ConfigError("concat: shape mismatch " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()) + " on axis " +
                        std::to_string(axis));
  Shape osh = a.shape();
  osh[axis] += b.dim(axis);
  const std::size_t outer = prod(a.shape(), 0, axis);
  const std::size_t inner = prod(a.shape(), axis + 1, a.rank());
  const std::size_t abl = a.dim(axis) * inner;  // a's block per outer slice
  const std::size_t bbl = b.dim(axis) * inner;

  Tensor out = Tensor::zeros(osh);
  double* po = out.data();
  for (std::size_t ou = 0; ou < outer; ++ou) {
    std::memcpy(po + ou * (abl + bbl), a.data() + ou * abl, abl * sizeof(double));
    std::memcpy(po + ou * (abl + bbl) + abl, b.data() + ou * bbl,
                bbl * sizeof(double));
  }
  if (live(a) || live(b)) {
    out.mark_tracked();
    auto sa = a.storage(), sb = b.storage();
    graph().record({"concat", out.storage(), {sa, sb},
                    [sa, sb, outer, abl, bbl](BackwardCtx& ctx,
                                              const std::vector<double>& g) {
                      if (wants(sa)) {
                        auto& da = ctx.accum(sa);
                        for (std::size_t ou = 0; ou < outer; ++ou)
                          for (std::size_t i = 0; i < abl; ++i)
                            da[ou * abl + i] += g[ou * (abl + bbl) + i];
                      }
                      if (wants(sb)) {
                        auto& db = ctx.accum(sb);
                        for (std::size_t ou = 0; ou < outer; ++ou)
                          for (std::size_t i = 0; i < bbl; ++i)
                            db[ou * bbl + i] += g[ou * (abl + bbl) + abl + i];
                      }
                    }});
  }
  return out;
}

Tensor slice_batch(const Tensor& a, std::size_t start, std::size_t count) {
  if (a.rank() < 1 || start + count > a.dim(0) || count == 0)
    throw ConfigError("slice_batch: rows [" + std::to_string(start) + "," +
                      std::to_string(start + count) + ") of " +
                      shape_str(a.shape()));
  const std::size_t block = a.size() / a.dim(0);
  Shape osh = a.shape();
  osh[0] = count;
  Tensor out = Tensor::zeros(osh);
  std::memcpy(out.data(), a.data() + start * block,
              count * block * sizeof(double));
  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    graph().record({"slice_batch", out.storage(), {sa},
                    [sa, start, block](BackwardCtx& ctx,
                                       const std::vector<double>& g) {
                      auto& da = ctx.accum(sa);
                      for (std::size_t i = 0; i < g.size(); ++i)
                        da[start * block + i] += g[i];
                    }});
  }
  return out;
}

// ---- reductions -----------------------------------------------------------

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ConfigError("mean_axis: axis out of range");
  const std::size_t outer = prod(a.shape(), 0, axis);
  const std::size_t nax = a.dim(axis);
  const std::size_t inner = prod(a.shape(), axis + 1, a.rank());
  Shape osh;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) osh.push_back(a.dim(i));
  if (osh.empty()) osh.push_back(1);

  Tensor out = Tensor::zeros(osh);
  const double* pa = a.data();
  double* po = out.data();
#pragma omp parallel for schedule(static)
  for (std::size_t ou = 0; ou < outer; ++ou)
    for (std::size_t in = 0; in < inner; ++in) {
      double s = 0.0;
      for (std::size_t t = 0; t < nax; ++t)
        s += pa[(ou * nax + t) * inner + in];
      po[ou * inner + in] = s / static_cast<double>(nax);
    }
  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    graph().record({"mean_axis", out.storage(), {sa},
                    [sa, outer, nax, inner](BackwardCtx& ctx,
                                            const std::vector<double>& g) {
                      auto& da = ctx.accum(sa);
                      const double inv = 1.0 / static_cast<double>(nax);
#pragma omp parallel for schedule(static)
                      for (std::size_t ou = 0; ou < outer; ++ou)
                        for (std::size_t t = 0; t < nax; ++t)
                          for (std::size_t in = 0; in < inner; ++in)
                            da[(ou * nax + t) * inner + in] +=
                                g[ou * inner + in] * inv;
                    }});
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.vec()) s += v;
  Tensor out = Tensor::scalar(s);
  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    graph().record({"sum_all", out.storage(), {sa},
                    [sa](BackwardCtx& ctx, const std::vector<double>& g) {
                      auto& da = ctx.accum(sa);
                      for (double& v : da) v += g[0];
                    }});
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.vec()) s += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor out = Tensor::scalar(s * inv);
  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    graph().record({"mean_all", out.storage(), {sa},
                    [sa, inv](BackwardCtx& ctx, const std::vector<double>& g) {
                      auto& da = ctx.accum(sa);
                      for (double& v : da) v += g[0] * inv;
                    }});
  }
  return out;
}

// ---- linear algebra -------------------------------------------------------

namespace {

struct BmmDims {
  std::size_t batch, m, k, n;
  Shape out_shape;
};

BmmDims bmm_dims(const char* op, const Tensor& a, const Tensor& b, bool nt) {
  if (a.rank() < 2 || a.rank() != b.rank())
    throw ConfigError(std::string(op) + ": want equal ranks >= 2, got " +
                      shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i))
      throw ConfigError(std::string(op) + ": batch dims differ, " +
                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  BmmDims d;
  d.m = a.dim(r - 2);
  d.k = a.dim(r - 1);
  if (!nt) {
    if (b.dim(r - 2) != d.k)
      throw ConfigError(std::string(op) + ": inner dims differ, " +
                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    d.n = b.dim(r - 1);
  } else {
    if (b.dim(r - 1) != d.k)
      throw ConfigError(std::string(op) + ": inner dims differ, " +
                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    d.n = b.dim(r - 2);
  }
  d.batch = prod(a.shape(), 0, r - 2);
  d.out_shape = Shape(a.shape().begin(), a.shape().end() - 2);
  d.out_shape.push_back(d.m);
  d.out_shape.push_back(d.n);
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const BmmDims d = bmm_dims("matmul", a, b, false);
  Tensor out = Tensor::zeros(d.out_shape);
  for (std::size_t bi = 0; bi < d.batch; ++bi)
    kernels::gemm(a.data() + bi * d.m * d.k, b.data() + bi * d.k * d.n,
                  out.data() + bi * d.m * d.n, d.m, d.n, d.k, false, g_macs);
  if (live(a) || live(b)) {
    out.mark_tracked();
    auto sa = a.storage(), sb = b.storage();
    graph().record(
        {"matmul", out.storage(), {sa, sb},
         [sa, sb, d](BackwardCtx& ctx, const std::vector<double>& g) {
           if (wants(sa)) {
             auto& da = ctx.accum(sa);
             for (std::size_t bi = 0; bi < d.batch; ++bi)
               kernels::gemm_nt(g.data() + bi * d.m * d.n,
                                sb->value.data() + bi * d.k * d.n,
                                da.data() + bi * d.m * d.k, d.m, d.k, d.n, true);
           }
           if (wants(sb)) {
             auto& db = ctx.accum(sb);
             for (std::size_t bi = 0; bi < d.batch; ++bi)
               kernels::gemm_tn(sa->value.data() + bi * d.m * d.k,
                                g.data() + bi * d.m * d.n,
                                db.data() + bi * d.k * d.n, d.k, d.n, d.m, true);
           }
         }});
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const BmmDims d = bmm_dims("matmul_nt", a, b, true);
  Tensor out = Tensor::zeros(d.out_shape);
  for (std::size_t bi = 0; bi < d.batch; ++bi)
    kernels::gemm_nt(a.data() + bi * d.m * d.k, b.data() + bi * d.n * d.k,
                     out.data() + bi * d.m * d.n, d.m, d.n, d.k, false, g_macs);
  if (live(a) || live(b)) {
    out.mark_tracked();
    auto sa = a.storage(), sb = b.storage();
    graph().record(
        {"matmul_nt", out.storage(), {sa, sb},
         [sa, sb, d](BackwardCtx& ctx, const std::vector<double>& g) {
           if (wants(sa)) {
             auto& da = ctx.accum(sa);
             for (std::size_t bi = 0; bi < d.batch; ++bi)
               kernels::gemm(g.data() + bi * d.m * d.n,
                             sb->value.data() + bi * d.n * d.k,
                             da.data() + bi * d.m * d.k, d.m, d.k, d.n, true);
           }
           if (wants(sb)) {
             auto& db = ctx.accum(sb);
             for (std::size_t bi = 0; bi < d.batch; ++bi)
               kernels::gemm_tn(g.data() + bi * d.m * d.n,
                                sa->value.data() + bi * d.m * d.k,
                                db.data() + bi * d.n * d.k, d.n, d.k, d.m, true);
           }
         }});
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw ConfigError("linear: want x [rows,in] and w [out,in], got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::size_t rows = x.dim(0), in = x.dim(1), outn = w.dim(0);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outn))
    throw ConfigError("linear: bias shape " + shape_str(b.shape()) +
                      " for out width " + std::to_string(outn));
  Tensor out = Tensor::zeros({rows, outn});
  kernels::gemm_nt(x.data(), w.data(), out.data(), rows, outn, in, false, g_macs);
  if (b.defined()) {
    double* po = out.data();
    const double* pb = b.data();
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < outn; ++j) po[r * outn + j] += pb[j];
  }
  if (live(x) || live(w) || live(b)) {
    out.mark_tracked();
    auto sx = x.storage(), sw = w.storage();
    auto sb = b.defined() ? b.storage() : nullptr;
    std::vector<std::shared_ptr<TensorData>> ins{sx, sw};
    if (sb) ins.push_back(sb);
    graph().record(
        {"linear", out.storage(), std::move(ins),
         [sx, sw, sb, rows, in, outn](BackwardCtx& ctx,
                                      const std::vector<double>& g) {
           if (wants(sx)) {
             auto& dx = ctx.accum(sx);
             kernels::gemm(g.data(), sw->value.data(), dx.data(), rows, in,
                           outn, true);
           }
           if (wants(sw)) {
             auto& dw = ctx.accum(sw);
             kernels::gemm_tn(g.data(), sx->value.data(), dw.data(), outn, in,
                              rows, true);
           }
           if (sb && wants(sb)) {
             auto& db = ctx.accum(sb);
#pragma omp parallel for schedule(static)
             for (std::size_t j = 0; j < outn; ++j) {
               double s = 0.0;
               for (std::size_t r = 0; r < rows; ++r) s += g[r * outn + j];
               db[j] += s;
             }
           }
         }});
  }
  return out;
}

// ---- neural-net pieces ----------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() < 1) throw ConfigError("softmax: rank-0 input");
  const std::size_t d = a.dim(a.rank() - 1);
  const std::size_t rows = a.size() / d;
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = pa + r * d;
    double* y = po + r * d;
    double m = x[0];
    for (std::size_t i = 1; i < d; ++i) m = x[i] > m ? x[i] : m;
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - m);
      s += y[i];
    }
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < d; ++i) y[i] *= inv;
  }
  if (live(a)) {
    out.mark_tracked();
    auto sa = a.storage();
    auto so = out.storage();
    graph().record({"softmax", so, {sa},
                    [sa, so, rows, d](BackwardCtx& ctx,
                                      const std::vector<double>& g) {
                      auto& da = ctx.accum(sa);
                      const double* y = so->value.data();
#pragma omp parallel for schedule(static)
                      for (std::size_t r = 0; r < rows; ++r) {
                        double dot = 0.0;
                        for (std::size_t i = 0; i < d; ++i)
                          dot += g[r * d + i] * y[r * d + i];
                        for (std::size_t i = 0; i < d; ++i)
                          da[r * d + i] +=
                              y[r * d + i] * (g[r * d + i] - dot);
                      }
                    }});
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 1) throw ConfigError("layer_norm: rank-0 input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.size() != d || beta.size() != d)
    throw ConfigError("layer_norm: scale/shift extent " +
                      std::to_string(gamma.size()) + "/" +
                      std::to_string(beta.size()) + " for last axis " +
                      std::to_string(d));
  const std::size_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out.data();
  double* ph = xhat->data();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = xr[i] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = inv;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - mu) * inv;
      ph[r * d + i] = h;
      po[r * d + i] = pg[i] * h + pb[i];
    }
  }
  if (live(x) || live(gamma) || live(beta)) {
    out.mark_tracked();
    auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage();
    graph().record(
        {"layer_norm", out.storage(), {sx, sg, sb},
         [sx, sg, sb, xhat, inv_sigma, rows, d](BackwardCtx& ctx,
                                                const std::vector<double>& g) {
           const double* h = xhat->data();
           if (wants(sx)) {
             auto& dx = ctx.accum(sx);
             const double* gam = sg->value.data();
#pragma omp parallel for schedule(static)
             for (std::size_t r = 0; r < rows; ++r) {
               double s1 = 0.0, s2 = 0.0;
               for (std::size_t i = 0; i < d; ++i) {
                 const double gg = g[r * d + i] * gam[i];
                 s1 += gg;
                 s2 += gg * h[r * d + i];
               }
               s1 /= static_cast<double>(d);
               s2 /= static_cast<double>(d);
               const double inv = (*inv_sigma)[r];
               for (std::size_t i = 0; i < d; ++i) {
                 const double gg = g[r * d + i] * gam[i];
                 dx[r * d + i] += inv * (gg - s1 - h[r * d + i] * s2);
               }
             }
           }
           if (wants(sg)) {
             auto& dg = ctx.accum(sg);
#pragma omp parallel for schedule(static)
             for (std::size_t i = 0; i < d; ++i) {
               double s = 0.0;
               for (std::size_t r = 0; r < rows; ++r)
                 s += g[r * d + i] * h[r * d + i];
               dg[i] += s;
             }
           }
           if (wants(sb)) {
             auto& db = ctx.accum(sb);
#pragma omp parallel for schedule(static)
             for (std::size_t i = 0; i < d; ++i) {
               double s = 0.0;
               for (std::size_t r = 0; r < rows; ++r) s += g[r * d + i];
               db[i] += s;
             }
           }
         }});
  }
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  double momentum, double eps) {
  if (x.rank() != 4)
    throw ConfigError("batch_norm: want [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c)
    throw ConfigError("batch_norm: per-channel buffers must have extent " +
                      std::to_string(c));
  const std::size_t count = n * hw;
  if (training && count < 2)
    throw ConfigError("batch_norm: cannot normalize a population of one");

  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(c);
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out.data();
  double* ph = xhat->data();

#pragma omp parallel for schedule(static)
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::size_t img = 0; img < n; ++img) {
        const double* p = px + (img * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t img = 0; img < n; ++img) {
        const double* p = px + (img * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          v += d * d;
        }
      }
      var = v / static_cast<double>(count);
      const double unbiased = v / static_cast<double>(count - 1);
      double& rm = running_mean.vec()[ch];
      double& rv = running_var.vec()[ch];
      rm = (1.0 - momentum) * rm + momentum * mu;
      rv = (1.0 - momentum) * rv + momentum * unbiased;
    } else {
      mu = running_mean.vec()[ch];
      var = running_var.vec()[ch];
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[ch] = inv;
    for (std::size_t img = 0; img < n; ++img) {
      const double* p = px + (img * c + ch) * hw;
      double* h = ph + (img * c + ch) * hw;
      double* y = po + (img * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        h[i] = (p[i] - mu) * inv;
        y[i] = pg[ch] * h[i] + pb[ch];
      }
    }
  }

  if (live(x) || live(gamma) || live(beta)) {
    out.mark_tracked();
    auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage();
    graph().record(
        {"batch_norm", out.storage(), {sx, sg, sb},
         [sx, sg, sb, xhat, inv_sigma, n, c, hw, count, training](
             BackwardCtx& ctx, const std::vector<double>& g) {
           const double* h = xhat->data();
           if (wants(sx)) {
             auto& dx = ctx.accum(sx);
             const double* gam = sg->value.data();
#pragma omp parallel for schedule(static)
             for (std::size_t ch = 0; ch < c; ++ch) {
               const double inv = (*inv_sigma)[ch];
               if (training) {
                 double s1 = 0.0, s2 = 0.0;
                 for (std::size_t img = 0; img < n; ++img) {
                   const std::size_t base = (img * c + ch) * hw;
                   for (std::size_t i = 0; i < hw; ++i) {
                     s1 += g[base + i];
                     s2 += g[base + i] * h[base + i];
                   }
                 }
                 s1 /= static_cast<double>(count);
                 s2 /= static_cast<double>(count);
                 for (std::size_t img = 0; img < n; ++img) {
                   const std::size_t base = (img * c + ch) * hw;
                   for (std::size_t i = 0; i < hw; ++i)
                     dx[base + i] += gam[ch] * inv *
                                     (g[base + i] - s1 - h[base + i] * s2);
                 }
               } else {
                 for (std::size_t img = 0; img < n; ++img) {
                   const std::size_t base = (img * c + ch) * hw;
                   for (std::size_t i = 0; i < hw; ++i)
                     dx[base + i] += gam[ch] * inv * g[base + i];
                 }
               }
             }
           }
           if (wants(sg) || wants(sb)) {
             std::vector<double>* dg = wants(sg) ? &ctx.accum(sg) : nullptr;
             std::vector<double>* db = wants(sb) ? &ctx.accum(sb) : nullptr;
#pragma omp parallel for schedule(static)
             for (std::size_t ch = 0; ch < c; ++ch) {
               double sg_acc = 0.0, sb_acc = 0.0;
               for (std::size_t img = 0; img < n; ++img) {
                 const std::size_t base = (img * c + ch) * hw;
                 for (std::size_t i = 0; i < hw; ++i) {
                   sg_acc += g[base + i] * h[base + i];
                   sb_acc += g[base + i];
                 }
               }
               if (dg) (*dg)[ch] += sg_acc;
               if (db) (*db)[ch] += sb_acc;
             }
           }
         }});
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ConfigError("conv2d: want x [N,C,H,W] and w [Co,Ci,kh,kw], got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (w.dim(1) != x.dim(1))
    throw ConfigError("conv2d: input channels " + std::to_string(x.dim(1)) +
                      " vs weight channels " + std::to_string(w.dim(1)));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0)))
    throw ConfigError("conv2d: bias shape " + shape_str(b.shape()));
  const kernels::ConvDims d =
      kernels::conv_dims(x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0),
                         w.dim(2), w.dim(3), stride, pad);
  Tensor out = Tensor::zeros({d.n, d.c_out, d.h_out, d.w_out});
  kernels::conv2d_forward(x.data(), w.data(), b.defined() ? b.data() : nullptr,
                          out.data(), d, g_macs);
  if (live(x) || live(w) || live(b)) {
    out.mark_tracked();
    auto sx = x.storage(), sw = w.storage();
    auto sb = b.defined() ? b.storage() : nullptr;
    std::vector<std::shared_ptr<TensorData>> ins{sx, sw};
    if (sb) ins.push_back(sb);
    graph().record(
        {"conv2d", out.storage(), std::move(ins),
         [sx, sw, sb, d](BackwardCtx& ctx, const std::vector<double>& g) {
           if (wants(sx)) {
             std::vector<double> din(sx->value.size());
             kernels::conv2d_backward_input(g.data(), sw->value.data(),
                                            din.data(), d);
             auto& dx = ctx.accum(sx);
             const std::size_t n = din.size();
#pragma omp parallel for schedule(static)
             for (std::size_t i = 0; i < n; ++i) dx[i] += din[i];
           }
           if (wants(sw) || (sb && wants(sb))) {
             std::vector<double> dwgt(sw->value.size());
             std::vector<double> dbias(sb ? sb->value.size() : 0);
             kernels::conv2d_backward_params(g.data(), sx->value.data(),
                                             dwgt.data(),
                                             sb ? dbias.data() : nullptr, d);
             if (wants(sw)) {
               auto& dw = ctx.accum(sw);
               for (std::size_t i = 0; i < dwgt.size(); ++i) dw[i] += dwgt[i];
             }
             if (sb && wants(sb)) {
               auto& db = ctx.accum(sb);
               for (std::size_t i = 0; i < dbias.size(); ++i) db[i] += dbias[i];
             }
           }
         }});
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
                        std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != 1 || w.dim(0) != x.dim(1))
    throw ConfigError("depthwise_conv2d: want x [N,C,H,W] and w [C,1,kh,kw], got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const kernels::ConvDims d =
      kernels::conv_dims(x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(1),
                         w.dim(2), w.dim(3), stride, pad);
  Tensor out = Tensor::zeros({d.n, d.c_in, d.h_out, d.w_out});
  kernels::depthwise_forward(x.data(), w.data(), out.data(), d, g_macs);
  if (live(x) || live(w)) {
    out.mark_tracked();
    auto sx = x.storage(), sw = w.storage();
    graph().record(
        {"depthwise_conv2d", out.storage(), {sx, sw},
         [sx, sw, d](BackwardCtx& ctx, const std::vector<double>& g) {
           if (wants(sx)) {
             std::vector<double> din(sx->value.size());
             kernels::depthwise_backward_input(g.data(), sw->value.data(),
                                               din.data(), d);
             auto& dx = ctx.accum(sx);
             const std::size_t n = din.size();
#pragma omp parallel for schedule(static)
             for (std::size_t i = 0; i < n; ++i) dx[i] += din[i];
           }
           if (wants(sw)) {
             std::vector<double> dwgt(sw->value.size());
             kernels::depthwise_backward_weight(g.data(), sx->value.data(),
                                                dwgt.data(), d);
             auto& dw = ctx.accum(sw);
             for (std::size_t i = 0; i < dwgt.size(); ++i) dw[i] += dwgt[i];
           }
         }});
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits,
                     const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2)
    throw ConfigError("cross_entropy: want [N,K] logits, got " +
                      shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n)
    throw ConfigError("cross_entropy: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(n) + " rows");
  for (std::size_t lbl : labels)
    if (lbl >= k)
      throw DataError("cross_entropy: label " + std::to_string(lbl) +
                      " out of range for " + std::to_string(k) + " classes");
  auto probs = std::make_shared<std::vector<double>>(n * k);
  const double* pl = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = pl + r * k;
    double m = x[0];
    for (std::size_t i = 1; i < k; ++i) m = x[i] > m ? x[i] : m;
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double e = std::exp(x[i] - m);
      (*probs)[r * k + i] = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < k; ++i) (*probs)[r * k + i] *= inv;
    total += m + std::log(s) - x[labels[r]];
  }
  const double loss = total / static_cast<double>(n);
  if (!std::isfinite(loss))
    throw NumericError("cross_entropy: non-finite loss");
  Tensor out = Tensor::scalar(loss);
  if (live(logits)) {
    out.mark_tracked();
    auto sl = logits.storage();
    graph().record({"cross_entropy", out.storage(), {sl},
                    [sl, probs, labels, n, k](BackwardCtx& ctx,
                                              const std::vector<double>& g) {
                      auto& dl = ctx.accum(sl);
                      const double inv = g[0] / static_cast<double>(n);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t i = 0; i < k; ++i)
                          dl[r * k + i] += inv * ((*probs)[r * k + i] -
                                                  (i == labels[r] ? 1.0 : 0.0));
                    }});
  }
  return out;
}

Tensor gather_cols(const Tensor& table, const std::vector<std::size_t>& idx) {
  if (table.rank() != 2)
    throw ConfigError("gather_cols: want [R,S] table, got " +
                      shape_str(table.shape()));
  const std::size_t r = table.dim(0), s = table.dim(1), len = idx.size();
  for (std::size_t i : idx)
    if (i >= s)
      throw ConfigError("gather_cols: index " + std::to_string(i) +
                        " out of range for table width " + std::to_string(s));
  Tensor out = Tensor::zeros({r, len});
  const double* pt = table.data();
  double* po = out.data();
#pragma omp parallel for schedule(static)
  for (std::size_t row = 0; row < r; ++row)
    for (std::size_t i = 0; i < len; ++i)
      po[row * len + i] = pt[row * s + idx[i]];
  if (live(table)) {
    out.mark_tracked();
    auto st = table.storage();
    graph().record({"gather_cols", out.storage(), {st},
                    [st, idx, r, s, len](BackwardCtx& ctx,
                                         const std::vector<double>& g) {
                      auto& dt = ctx.accum(st);
#pragma omp parallel for schedule(static)
                      for (std::size_t row = 0; row < r; ++row)
                        for (std::size_t i = 0; i < len; ++i)
                          dt[row * s + idx[i]] += g[row * len + i];
                    }});
  }
  return out;
}

Tensor add_broadcast_batch(const Tensor& x, const Tensor& b) {
  if (x.rank() < 2 || b.rank() != x.rank() - 1)
    throw ConfigError("add_broadcast_batch: want x [B,rest] and b [rest], got " +
                      shape_str(x.shape()) + " and " + shape_str(b.shape()));
  for (std::size_t i = 0; i < b.rank(); ++i)
    if (b.dim(i) != x.dim(i + 1))
      throw ConfigError("add_broadcast_batch: trailing dims differ, " +
                        shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t batch = x.dim(0), block = b.size();
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* pb = b.data();
  double* po = out.data();
#pragma omp parallel for schedule(static)
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t i = 0; i < block; ++i)
      po[bi * block + i] = px[bi * block + i] + pb[i];
  if (live(x) || live(b)) {
    out.mark_tracked();
    auto sx = x.storage(), sb = b.storage();
    graph().record({"add_broadcast_batch", out.storage(), {sx, sb},
                    [sx, sb, batch, block](BackwardCtx& ctx,
                                           const std::vector<double>& g) {
                      if (wants(sx)) {
                        auto& dx = ctx.accum(sx);
                        for (std::size_t i = 0; i < g.size(); ++i)
                          dx[i] += g[i];
                      }
                      if (wants(sb)) {
                        auto& db = ctx.accum(sb);
#pragma omp parallel for schedule(static)
                        for (std::size_t i = 0; i < block; ++i) {
                          double s = 0.0;
                          for (std::size_t bi = 0; bi < batch; ++bi)
                            s += g[bi * block + i];
                          db[i] += s;
                        }
                      }
                    }});
  }
  return out;
}

}  // namespace dsnet::ops
