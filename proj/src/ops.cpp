#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

#include "cmt/autodiff.hpp"
#include "cmt/errors.hpp"

namespace cmt {
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, padding, h_out, w_out;
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t plane = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * plane;
        for (std::size_t oi = 0; oi < g.h_out; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          for (std::size_t oj = 0; oj < g.w_out; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.padding);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(g.h) && jj < static_cast<long>(g.w);
            row[oi * g.w_out + oj] = inside ? x[(c * g.h + ii) * g.w + jj] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t plane = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * plane;
        for (std::size_t oi = 0; oi < g.h_out; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.w_out; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.padding);
            if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + ii) * g.w + jj] += row[oi * g.w_out + oj];
          }
        }
      }
    }
  }
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b}, [](const Tensor& g, BackwardContext& ctx) {
    if (ctx.needs_grad(0)) ctx.accumulate(0, g);
    if (ctx.needs_grad(1)) ctx.accumulate(1, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.tape().record("sub", std::move(out), {a, b}, [](const Tensor& g, BackwardContext& ctx) {
    if (ctx.needs_grad(0)) ctx.accumulate(0, g);
    if (ctx.needs_grad(1)) {
      auto d = ctx.grad(1).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a, b}, [](const Tensor& g, BackwardContext& ctx) {
    if (ctx.needs_grad(0)) {
      const Tensor& bv = ctx.input(1);
      auto d = ctx.grad(0).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (ctx.needs_grad(1)) {
      const Tensor& av = ctx.input(0);
      auto d = ctx.grad(1).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.tape().record("scale", std::move(out), {a}, [factor](const Tensor& g, BackwardContext& ctx) {
    auto d = ctx.grad(0).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * factor;
  });
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
  return x.tape().record("sigmoid", std::move(out), {x}, [](const Tensor& g, BackwardContext& ctx) {
    const Tensor& y = ctx.output();
    auto d = ctx.grad(0).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return x.tape().record("relu", std::move(out), {x}, [](const Tensor& g, BackwardContext& ctx) {
    const Tensor& in = ctx.input(0);
    auto d = ctx.grad(0).data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (in[i] > 0.0) d[i] += g[i];
    }
  });
}

Var add_bias(Var x, Var b, std::size_t axis) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw DimensionError("add_bias: axis out of range for " + shape_string(xs));
  if (b.shape() != Shape{xs[axis]}) {
    throw DimensionError("add_bias: bias shape " + shape_string(b.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_string(xs));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t n = xs[axis];
  Tensor out = x.value();
  const Tensor& bv = b.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[(o * n + j) * inner + i] += bv[j];
  return x.tape().record("add_bias", std::move(out), {x, b},
                         [outer, n, inner](const Tensor& g, BackwardContext& ctx) {
                           if (ctx.needs_grad(0)) ctx.accumulate(0, g);
                           if (ctx.needs_grad(1)) {
                             auto d = ctx.grad(1).data();
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < n; ++j)
                                 for (std::size_t i = 0; i < inner; ++i) d[j] += g[(o * n + j) * inner + i];
                           }
                         });
}

Var scale_axis(Var x, Var s, std::size_t axis) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw DimensionError("scale_axis: axis out of range for " + shape_string(xs));
  if (s.shape() != Shape{xs[axis]}) {
    throw DimensionError("scale_axis: scale shape " + shape_string(s.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_string(xs));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t n = xs[axis];
  Tensor out = x.value();
  const Tensor& sv = s.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[(o * n + j) * inner + i] *= sv[j];
  return x.tape().record("scale_axis", std::move(out), {x, s},
                         [outer, n, inner](const Tensor& g, BackwardContext& ctx) {
                           const Tensor& xv = ctx.input(0);
                           const Tensor& sv = ctx.input(1);
                           if (ctx.needs_grad(0)) {
                             auto d = ctx.grad(0).data();
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < n; ++j)
                                 for (std::size_t i = 0; i < inner; ++i) {
                                   const std::size_t k = (o * n + j) * inner + i;
                                   d[k] += g[k] * sv[j];
                                 }
                           }
                           if (ctx.needs_grad(1)) {
                             auto d = ctx.grad(1).data();
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < n; ++j)
                                 for (std::size_t i = 0; i < inner; ++i) {
                                   const std::size_t k = (o * n + j) * inner + i;
                                   d[j] += g[k] * xv[k];
                                 }
                           }
                         });
}

// ---- reductions -------------------------------------------------------------

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record("sum", Tensor::scalar(s), {x}, [](const Tensor& g, BackwardContext& ctx) {
    const double gv = g[0];
    for (double& d : ctx.grad(0).data()) d += gv;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var pick(Var x, std::size_t index) {
  if (index >= x.value().size()) {
    throw DimensionError("pick: index " + std::to_string(index) + " out of range for " + shape_string(x.shape()));
  }
  return x.tape().record("pick", Tensor::scalar(x.value()[index]), {x},
                         [index](const Tensor& g, BackwardContext& ctx) { ctx.grad(0)[index] += g[0]; });
}

Var global_avg_pool(Var x) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw DimensionError("global_avg_pool: expected rank >= 2, got " + shape_string(xs));
  const std::size_t c = xs[0];
  const std::size_t positions = x.value().size() / c;
  Tensor out(Shape{c}, 0.0);
  const Tensor& v = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t p = 0; p < positions; ++p) s += v[ch * positions + p];
    out[ch] = s / static_cast<double>(positions);
  }
  return x.tape().record("global_avg_pool", std::move(out), {x},
                         [c, positions](const Tensor& g, BackwardContext& ctx) {
                           auto d = ctx.grad(0).data();
                           const double inv = 1.0 / static_cast<double>(positions);
                           for (std::size_t ch = 0; ch < c; ++ch)
                             for (std::size_t p = 0; p < positions; ++p) d[ch * positions + p] += g[ch] * inv;
                         });
}

// ---- linear algebra -----------------------------------------------------------

Var matmul(Var a, Var b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
  };
  if (as.size() < 2 || as.size() != bs.size()) fail();
  const std::size_t r = as.size();
  if (!std::equal(as.begin(), as.end() - 2, bs.begin())) fail();
  const std::size_t m = as[r - 2], k = as[r - 1], n = bs[r - 1];
  if (bs[r - 2] != k) fail();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) batch *= as[i];

  Shape os(as.begin(), as.end() - 1);
  os.push_back(n);
  Tensor out(os, 0.0);
  const double* ap = a.value().data().data();
  const double* bp = b.value().data().data();
  double* op = out.data().data();
  for (std::size_t t = 0; t < batch; ++t) gemm_nn(ap + t * m * k, bp + t * k * n, op + t * m * n, m, n, k);
  a.tape().macs().add("matmul", static_cast<std::uint64_t>(batch) * m * n * k);

  return a.tape().record("matmul", std::move(out), {a, b}, [batch, m, n, k](const Tensor& g, BackwardContext& ctx) {
    const double* gp = g.data().data();
    if (ctx.needs_grad(0)) {
      const double* bp = ctx.input(1).data().data();
      double* dp = ctx.grad(0).data().data();
      for (std::size_t t = 0; t < batch; ++t) gemm_nt(gp + t * m * n, bp + t * k * n, dp + t * m * k, m, k, n);
      ctx.macs().add("matmul.backward", static_cast<std::uint64_t>(batch) * m * n * k);
    }
    if (ctx.needs_grad(1)) {
      const double* ap = ctx.input(0).data().data();
      double* dp = ctx.grad(1).data().data();
      for (std::size_t t = 0; t < batch; ++t) gemm_tn(ap + t * m * k, gp + t * m * n, dp + t * k * n, k, n, m);
      ctx.macs().add("matmul.backward", static_cast<std::uint64_t>(batch) * m * n * k);
    }
  });
}

Var softmax(Var x, std::size_t axis) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_string(xs));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t n = xs[axis];
  const Tensor& in = x.value();
  require_finite(in, "softmax input");
  Tensor out(xs, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      const double inv = 1.0 / s;
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  return x.tape().record("softmax", std::move(out), {x}, [outer, n, inner](const Tensor& g, BackwardContext& ctx) {
    const Tensor& y = ctx.output();
    auto d = ctx.grad(0).data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          d[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

// ---- spatial -----------------------------------------------------------------

Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 3 || ks.size() != 4 || ks[1] != xs[0] || ks[2] != ks[3]) {
    throw DimensionError("conv2d: incompatible input " + shape_string(xs) + " and kernel " + shape_string(ks));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  ConvGeometry geo{xs[0], xs[1], xs[2], ks[0], ks[2], stride, padding, 0, 0};
  if (geo.k > geo.h + 2 * padding || geo.k > geo.w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_string(ks) + " larger than padded input " + shape_string(xs));
  }
  geo.h_out = (geo.h + 2 * padding - geo.k) / stride + 1;
  geo.w_out = (geo.w + 2 * padding - geo.k) / stride + 1;
  const std::size_t patch = geo.c_in * geo.k * geo.k;
  const std::size_t plane = geo.h_out * geo.w_out;

  std::vector<double> cols(patch * plane);
  im2col(x.value().data().data(), geo, cols.data());
  Tensor out(Shape{geo.c_out, geo.h_out, geo.w_out}, 0.0);
  gemm_nn(kernel.value().data().data(), cols.data(), out.data().data(), geo.c_out, plane, patch);
  x.tape().macs().add("conv2d", static_cast<std::uint64_t>(geo.c_out) * patch * plane);

  return x.tape().record("conv2d", std::move(out), {x, kernel}, [geo, patch, plane](const Tensor& g,
                                                                                   BackwardContext& ctx) {
    const double* gp = g.data().data();
    if (ctx.needs_grad(1)) {
      std::vector<double> cols(patch * plane);
      im2col(ctx.input(0).data().data(), geo, cols.data());
      gemm_nt(gp, cols.data(), ctx.grad(1).data().data(), geo.c_out, patch, plane);
      ctx.macs().add("conv2d.backward", static_cast<std::uint64_t>(geo.c_out) * patch * plane);
    }
    if (ctx.needs_grad(0)) {
      std::vector<double> dcols(patch * plane, 0.0);
      gemm_tn(ctx.input(1).data().data(), gp, dcols.data(), patch, plane, geo.c_out);
      col2im(dcols.data(), geo, ctx.grad(0).data().data());
      ctx.macs().add("conv2d.backward", static_cast<std::uint64_t>(geo.c_out) * patch * plane);
    }
  });
}

Var pool2d(Var x, std::size_t size, std::size_t stride, PoolMode mode) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw DimensionError("pool2d: expected [c,h,w], got " + shape_string(xs));
  if (size == 0 || stride == 0) throw ConfigError("pool2d: size and stride must be positive");
  const std::size_t c = xs[0], h = xs[1], w = xs[2];
  if (size > h || size > w) {
    throw DimensionError("pool2d: window " + std::to_string(size) + " larger than input " + shape_string(xs));
  }
  const std::size_t ho = (h - size) / stride + 1, wo = (w - size) / stride + 1;
  Tensor out(Shape{c, ho, wo}, 0.0);
  const Tensor& in = x.value();

  if (mode == PoolMode::max) {
    auto argmax = std::make_shared<std::vector<std::size_t>>(c * ho * wo);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oi = 0; oi < ho; ++oi)
        for (std::size_t oj = 0; oj < wo; ++oj) {
          std::size_t best = (ch * h + oi * stride) * w + oj * stride;
          for (std::size_t a = 0; a < size; ++a)
            for (std::size_t b = 0; b < size; ++b) {
              const std::size_t idx = (ch * h + oi * stride + a) * w + oj * stride + b;
              if (in[idx] > in[best]) best = idx;
            }
          const std::size_t o = (ch * ho + oi) * wo + oj;
          out[o] = in[best];
          (*argmax)[o] = best;
        }
    return x.tape().record("max_pool2d", std::move(out), {x}, [argmax](const Tensor& g, BackwardContext& ctx) {
      Tensor& d = ctx.grad(0);
      for (std::size_t o = 0; o < argmax->size(); ++o) d[(*argmax)[o]] += g[o];
    });
  }

  const double inv = 1.0 / static_cast<double>(size * size);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oi = 0; oi < ho; ++oi)
      for (std::size_t oj = 0; oj < wo; ++oj) {
        double s = 0.0;
        for (std::size_t a = 0; a < size; ++a)
          for (std::size_t b = 0; b < size; ++b) s += in[(ch * h + oi * stride + a) * w + oj * stride + b];
        out[(ch * ho + oi) * wo + oj] = s * inv;
      }
  return x.tape().record("avg_pool2d", std::move(out), {x},
                         [c, h, w, ho, wo, size, stride, inv](const Tensor& g, BackwardContext& ctx) {
                           Tensor& d = ctx.grad(0);
                           for (std::size_t ch = 0; ch < c; ++ch)
                             for (std::size_t oi = 0; oi < ho; ++oi)
                               for (std::size_t oj = 0; oj < wo; ++oj) {
                                 const double gv = g[(ch * ho + oi) * wo + oj] * inv;
                                 for (std::size_t a = 0; a < size; ++a)
                                   for (std::size_t b = 0; b < size; ++b)
                                     d[(ch * h + oi * stride + a) * w + oj * stride + b] += gv;
                               }
                         });
}

Var nearest_upsample(Var x, std::size_t factor) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw DimensionError("nearest_upsample: expected rank >= 2, got " + shape_string(xs));
  if (factor == 0) throw ConfigError("nearest_upsample: factor must be >= 1");
  const std::size_t r = xs.size();
  const std::size_t h = xs[r - 2], w = xs[r - 1];
  const std::size_t planes = x.value().size() / (h * w);
  Shape os = xs;
  os[r - 2] = h * factor;
  os[r - 1] = w * factor;
  const std::size_t H = h * factor, W = w * factor;
  Tensor out(os, 0.0);
  const Tensor& in = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out[(p * H + i) * W + j] = in[(p * h + i / factor) * w + j / factor];
  return x.tape().record("nearest_upsample", std::move(out), {x},
                         [planes, h, w, H, W, factor](const Tensor& g, BackwardContext& ctx) {
                           Tensor& d = ctx.grad(0);
                           for (std::size_t p = 0; p < planes; ++p)
                             for (std::size_t i = 0; i < H; ++i)
                               for (std::size_t j = 0; j < W; ++j)
                                 d[(p * h + i / factor) * w + j / factor] += g[(p * H + i) * W + j];
                         });
}

// ---- shape ---------------------------------------------------------------------

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x}, [](const Tensor& g, BackwardContext& ctx) {
    auto d = ctx.grad(0).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

Tensor permute_tensor(const Tensor& x, std::span<const std::size_t> perm) {
  const Shape& xs = x.shape();
  const std::size_t r = xs.size();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw DimensionError("permute: permutation rank does not match " + shape_string(xs));
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation for " + shape_string(xs));
    seen[p] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = xs[perm[i]];
  const auto in_strides = strides_of(xs);
  std::vector<std::size_t> step(r);  // input stride of each output axis
  for (std::size_t i = 0; i < r; ++i) step[i] = in_strides[perm[i]];

  Tensor out(os, 0.0);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  const std::size_t n = out.size();
  const std::size_t last = os[r - 1], last_step = step[r - 1];
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t j = 0; j < last; ++j) out[o + j] = x[src + j * last_step];
    // advance the multi-index over all but the last axis
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      src += step[ax];
      if (idx[ax] < os[ax]) break;
      src -= step[ax] * os[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

Var permute(Var x, std::vector<std::size_t> perm) {
  Tensor out = permute_tensor(x.value(), perm);
  return x.tape().record("permute", std::move(out), {x}, [perm](const Tensor& g, BackwardContext& ctx) {
    const auto inv = inverse_permutation(perm);
    const Tensor back = permute_tensor(g, inv);
    auto d = ctx.grad(0).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += back[i];
  });
}

Var stack(std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("stack: no inputs");
  const Shape& s0 = xs.front().shape();
  for (const Var& v : xs) {
    if (v.shape() != s0) {
      throw DimensionError("stack: shape mismatch " + shape_string(s0) + " vs " + shape_string(v.shape()));
    }
  }
  Shape os{xs.size()};
  os.insert(os.end(), s0.begin(), s0.end());
  const std::size_t each = shape_numel(s0);
  Tensor out(os, 0.0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto src = xs[i].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * each));
  }
  return xs.front().tape().record("stack", std::move(out), xs, [n = xs.size(), each](const Tensor& g,
                                                                                     BackwardContext& ctx) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!ctx.needs_grad(i)) continue;
      auto d = ctx.grad(i).data();
      for (std::size_t j = 0; j < each; ++j) d[j] += g[i * each + j];
    }
  });
}

// ---- normalisation ---------------------------------------------------------------

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw DimensionError("layer_norm: empty shape");
  const std::size_t c = xs[0];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: scale/shift shapes " + shape_string(gamma.shape()) + ", " +
                         shape_string(beta.shape()) + " do not match channels of " + shape_string(xs));
  }
  const std::size_t positions = x.value().size() / c;
  const Tensor& in = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto inv_std = std::make_shared<std::vector<double>>(positions);
  Tensor out(xs, 0.0);
  for (std::size_t p = 0; p < positions; ++p) {
    double mu = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) mu += in[ch * positions + p];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double dv = in[ch * positions + p] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[p] = is;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t idx = ch * positions + p;
      const double xh = (in[idx] - mu) * is;
      (*xhat)[idx] = xh;
      out[idx] = gv[ch] * xh + bv[ch];
    }
  }
  return x.tape().record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [c, positions, xhat, inv_std](const Tensor& g, BackwardContext& ctx) {
        const Tensor& gv = ctx.input(1);
        if (ctx.needs_grad(0)) {
          auto d = ctx.grad(0).data();
          const double cn = static_cast<double>(c);
          for (std::size_t p = 0; p < positions; ++p) {
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t idx = ch * positions + p;
              const double dxh = g[idx] * gv[ch];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * (*xhat)[idx];
            }
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t idx = ch * positions + p;
              const double dxh = g[idx] * gv[ch];
              d[idx] += (*inv_std)[p] / cn * (cn * dxh - sum_dxh - (*xhat)[idx] * sum_dxh_xh);
            }
          }
        }
        if (ctx.needs_grad(1)) {
          auto d = ctx.grad(1).data();
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < positions; ++p) d[ch] += g[ch * positions + p] * (*xhat)[ch * positions + p];
        }
        if (ctx.needs_grad(2)) {
          auto d = ctx.grad(2).data();
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < positions; ++p) d[ch] += g[ch * positions + p];
        }
      });
}

Var dropout(Var x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = uniform01(rng) >= p ? keep_scale : 0.0;
    (*mask)[i] = m;
    out[i] *= m;
  }
  return x.tape().record("dropout", std::move(out), {x}, [mask](const Tensor& g, BackwardContext& ctx) {
    auto d = ctx.grad(0).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * (*mask)[i];
  });
}

}  // namespace cmt
