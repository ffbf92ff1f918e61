#include "eviscrib/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "eviscrib/errors.hpp"

namespace eviscrib::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

// Gradient destination for parent i, or nullptr if that parent is constant.
double* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  Tensor y(x.shape());
  const double* xv = x.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return make_op(std::move(y), {x}, [df](Node& self) {
    const Node& in = *self.parents[0];
    double* gx = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      gx[i] += self.grad[i] * df(in.value[i], self.value[i]);
  });
}

// y[i] = x[index[i]]; the shape change is handled by the caller.
Var gather(const Var& x, Shape out_shape, std::vector<std::uint32_t> index) {
  Tensor y(std::move(out_shape));
  require(y.size() == index.size(), "gather: index size mismatch");
  const double* xv = x.value().data();
  for (std::size_t i = 0; i < index.size(); ++i) y[i] = xv[index[i]];
  return make_op(std::move(y), {x}, [index = std::move(index)](Node& self) {
    double* gx = grad_of(self, 0);
    for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += self.grad[i];
  });
}

void im2col(const double* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* cols) {
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? x[(static_cast<std::size_t>(c) * h + iy) * w + ix]
                                    : 0.0;
          }
        }
      }
}

void col2im_add(const double* cols, int ci, int h, int w, int k, int stride, int pad, int ho, int wo,
                double* x) {
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) x[(static_cast<std::size_t>(c) * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

// Input gain of the zero-order hold for diagonal entry a: (exp(delta a) - 1) / a.
double zoh_gain(double delta, double a) {
  const double z = delta * a;
  if (std::abs(z) < 1e-4) return delta * (1.0 + z / 2.0 + z * z / 6.0);
  return std::expm1(z) / a;
}

// d/da of zoh_gain. The closed form cancels badly for small z, hence the series.
double zoh_gain_da(double delta, double a) {
  const double z = delta * a;
  if (std::abs(z) < 1e-2) return delta * delta * (0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0);
  const double ez = std::exp(z);
  return (z * ez - ez + 1.0) / (a * a);
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  expect_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  y.add_(b.value());
  return make_op(std::move(y), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = grad_of(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  expect_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  expect_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var sum(const Var& a) {
  return make_op(Tensor::scalar(a.value().sum()), {a}, [](Node& self) {
    double* g = grad_of(self, 0);
    const double go = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += go;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_scalars(const std::vector<Var>& terms) {
  double total = 0.0;
  for (const Var& t : terms) {
    require(t.value().size() == 1, "sum_scalars: non-scalar term");
    total += t.value()[0];
  }
  return make_op(Tensor::scalar(total), terms, [](Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p)
      if (double* g = grad_of(self, p)) g[0] += self.grad[0];
  });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var softplus(const Var& x) {
  return unary(
      x, [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return make_op(std::move(y), {x}, [](Node& self) {
    double* gx = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- NCHW

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require(xv.ndim() == 4 && wv.ndim() == 4 && wv.dim(2) == wv.dim(3), "conv2d: bad ranks");
  require(wv.dim(1) == xv.dim(1), "conv2d: channel mismatch " + shape_str(xv.shape()) + " vs " +
                                      shape_str(wv.shape()));
  const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int co = wv.dim(0), k = wv.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d: output would be empty");
  const int kk = ci * k * k, p = ho * wo;
  const bool has_bias = static_cast<bool>(bias);

  Tensor y({n, co, ho, wo});
  RowMat cols(kk, p);
  CMapMat wm(wv.data(), co, kk);
  for (int b = 0; b < n; ++b) {
    im2col(xv.data() + static_cast<std::size_t>(b) * ci * h * w, ci, h, w, k, stride, pad, ho, wo,
           cols.data());
    MapMat out(y.data() + static_cast<std::size_t>(b) * co * p, co, p);
    out.noalias() = wm * cols;
    if (has_bias)
      for (int c = 0; c < co; ++c) out.row(c).array() += bias.value()[static_cast<std::size_t>(c)];
  }

  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_op(std::move(y), std::move(parents),
                 [=](Node& self) {
                   const Tensor& xin = self.parents[0]->value;
                   const Tensor& win = self.parents[1]->value;
                   double* gx = grad_of(self, 0);
                   double* gw = grad_of(self, 1);
                   double* gb = has_bias ? grad_of(self, 2) : nullptr;
                   CMapMat wmat(win.data(), co, kk);
                   RowMat colbuf(kk, p);
                   RowMat gcols;
                   for (int b = 0; b < n; ++b) {
                     CMapMat gout(self.grad.data() + static_cast<std::size_t>(b) * co * p, co, p);
                     if (gb)
                       for (int c = 0; c < co; ++c) gb[c] += gout.row(c).sum();
                     if (gw) {
                       im2col(xin.data() + static_cast<std::size_t>(b) * ci * h * w, ci, h, w, k, stride,
                              pad, ho, wo, colbuf.data());
                       MapMat(gw, co, kk).noalias() += gout * colbuf.transpose();
                     }
                     if (gx) {
                       gcols.noalias() = wmat.transpose() * gout;
                       col2im_add(gcols.data(), ci, h, w, k, stride, pad, ho, wo,
                                  gx + static_cast<std::size_t>(b) * ci * h * w);
                     }
                   }
                 });
}

Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require(xv.ndim() == 4 && wv.ndim() == 4 && wv.dim(2) == 2 && wv.dim(3) == 2 && wv.dim(0) == xv.dim(1),
          "conv_transpose2x2: bad shapes");
  const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w = xv.dim(3), co = wv.dim(1);
  const int hw = h * w, ho = 2 * h, wo = 2 * w;
  const bool has_bias = static_cast<bool>(bias);

  Tensor y({n, co, ho, wo});
  CMapMat wm(wv.data(), ci, co * 4);
  RowMat tmp(co * 4, hw);
  for (int b = 0; b < n; ++b) {
    CMapMat xm(xv.data() + static_cast<std::size_t>(b) * ci * hw, ci, hw);
    tmp.noalias() = wm.transpose() * xm;
    for (int c = 0; c < co; ++c) {
      const double bv = has_bias ? bias.value()[static_cast<std::size_t>(c)] : 0.0;
      for (int q = 0; q < 4; ++q) {
        const int dy = q / 2, dx = q % 2;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) y.at(b, c, 2 * i + dy, 2 * j + dx) = tmp(c * 4 + q, i * w + j) + bv;
      }
    }
  }
  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_op(std::move(y), std::move(parents), [=](Node& self) {
    const Tensor& xin = self.parents[0]->value;
    const Tensor& win = self.parents[1]->value;
    double* gx = grad_of(self, 0);
    double* gw = grad_of(self, 1);
    double* gb = has_bias ? grad_of(self, 2) : nullptr;
    RowMat gtmp(co * 4, hw);
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < co; ++c)
        for (int q = 0; q < 4; ++q) {
          const int dy = q / 2, dx = q % 2;
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) gtmp(c * 4 + q, i * w + j) = self.grad.at(b, c, 2 * i + dy, 2 * j + dx);
        }
      if (gb)
        for (int c = 0; c < co; ++c) gb[c] += gtmp.middleRows(c * 4, 4).sum();
      CMapMat xm(xin.data() + static_cast<std::size_t>(b) * ci * hw, ci, hw);
      if (gw) MapMat(gw, ci, co * 4).noalias() += xm * gtmp.transpose();
      if (gx)
        MapMat(gx + static_cast<std::size_t>(b) * ci * hw, ci, hw).noalias() +=
            CMapMat(win.data(), ci, co * 4) * gtmp;
    }
  });
}

Var max_pool2x2(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 4 && xv.dim(2) % 2 == 0 && xv.dim(3) % 2 == 0, "max_pool2x2: odd size");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2) / 2, w = xv.dim(3) / 2;
  Tensor y({n, c, h, w});
  std::vector<std::uint32_t> arg(y.size());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int q = 0; q < 4; ++q) {
            const std::size_t idx =
                ((static_cast<std::size_t>(b) * c + ch) * xv.dim(2) + 2 * i + q / 2) * xv.dim(3) + 2 * j + q % 2;
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
          y[o] = best;
          arg[o] = static_cast<std::uint32_t>(best_idx);
        }
  return make_op(std::move(y), {x}, [arg = std::move(arg)](Node& self) {
    double* gx = grad_of(self, 0);
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
  });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum, double eps) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 4 && gamma.value().size() == static_cast<std::size_t>(xv.dim(1)),
          "batch_norm2d: bad shapes");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const double count = static_cast<double>(n) * hw;
  std::vector<double> mu(c), inv_std(c);
  for (int ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0.0, s2 = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* p = xv.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
      }
      const double m = s / count;
      for (int b = 0; b < n; ++b) {
        const double* p = xv.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) s2 += (p[i] - m) * (p[i] - m);
      }
      const double var = s2 / count;
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? s2 / (count - 1) : var;
      running_mean[ch] = (1 - momentum) * running_mean[ch] + momentum * m;
      running_var[ch] = (1 - momentum) * running_var[ch] + momentum * unbiased;
    } else {
      mu[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }
  Tensor xhat(xv.shape()), y(xv.shape());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        xhat[off + i] = (xv[off + i] - mu[ch]) * inv_std[ch];
        y[off + i] = xhat[off + i] * gamma.value()[ch] + beta.value()[ch];
      }
    }
  return make_op(std::move(y), {x, gamma, beta},
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const Tensor& g = self.grad;
                   const Tensor& gam = self.parents[1]->value;
                   double* gx = grad_of(self, 0);
                   double* gg = grad_of(self, 1);
                   double* gbeta = grad_of(self, 2);
                   for (int ch = 0; ch < c; ++ch) {
                     double sg = 0.0, sgx = 0.0;
                     for (int b = 0; b < n; ++b) {
                       const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
                       for (int i = 0; i < hw; ++i) {
                         sg += g[off + i];
                         sgx += g[off + i] * xhat[off + i];
                       }
                     }
                     if (gg) gg[ch] += sgx;
                     if (gbeta) gbeta[ch] += sg;
                     if (!gx) continue;
                     const double k = gam[ch] * inv_std[ch];
                     for (int b = 0; b < n; ++b) {
                       const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
                       for (int i = 0; i < hw; ++i) {
                         if (training)
                           gx[off + i] += k * (g[off + i] - sg / count - xhat[off + i] * sgx / count);
                         else
                           gx[off + i] += k * g[off + i];
                       }
                     }
                   }
                 });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.ndim() == 4 && bv.ndim() == 4 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) &&
              av.dim(3) == bv.dim(3),
          "concat_channels: shape mismatch");
  const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
  Tensor y({n, ca + cb, av.dim(2), av.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * ca * hw, ca * hw, y.data() + i * (ca + cb) * hw);
    std::copy_n(bv.data() + i * cb * hw, cb * hw, y.data() + (i * (ca + cb) + ca) * hw);
  }
  return make_op(std::move(y), {a, b}, [=](Node& self) {
    double* ga = grad_of(self, 0);
    double* gb = grad_of(self, 1);
    for (int i = 0; i < n; ++i) {
      const double* g = self.grad.data() + i * (ca + cb) * hw;
      if (ga)
        for (std::size_t k = 0; k < ca * hw; ++k) ga[i * ca * hw + k] += g[k];
      if (gb)
        for (std::size_t k = 0; k < cb * hw; ++k) gb[i * cb * hw + k] += g[ca * hw + k];
    }
  });
}

Var softmax_channels(const Var& logits) {
  const Tensor& xv = logits.value();
  require(xv.ndim() == 4, "softmax_channels: expected NCHW");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor y(xv.shape());
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t base = static_cast<std::size_t>(b) * c * hw + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < c; ++k) mx = std::max(mx, xv[base + k * hw]);
      double z = 0.0;
      for (int k = 0; k < c; ++k) z += (y[base + k * hw] = std::exp(xv[base + k * hw] - mx));
      for (int k = 0; k < c; ++k) y[base + k * hw] /= z;
    }
  return make_op(std::move(y), {logits}, [=](Node& self) {
    double* gx = grad_of(self, 0);
    const Tensor& yv = self.value;
    for (int b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t base = static_cast<std::size_t>(b) * c * hw + i;
        double dot = 0.0;
        for (int k = 0; k < c; ++k) dot += self.grad[base + k * hw] * yv[base + k * hw];
        for (int k = 0; k < c; ++k) gx[base + k * hw] += yv[base + k * hw] * (self.grad[base + k * hw] - dot);
      }
  });
}

Var mask_pixels(const Var& x, const Tensor& mask) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 4 && mask.ndim() == 3 && mask.dim(0) == xv.dim(0) && mask.dim(1) == xv.dim(2) &&
              mask.dim(2) == xv.dim(3),
          "mask_pixels: mask shape " + shape_str(mask.shape()) + " does not fit " + shape_str(xv.shape()));
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor y(xv.shape());
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k)
      for (std::size_t i = 0; i < hw; ++i)
        y[(static_cast<std::size_t>(b) * c + k) * hw + i] = xv[(static_cast<std::size_t>(b) * c + k) * hw + i] * mask[b * hw + i];
  return make_op(std::move(y), {x}, [=](Node& self) {
    double* gx = grad_of(self, 0);
    for (int b = 0; b < n; ++b)
      for (int k = 0; k < c; ++k)
        for (std::size_t i = 0; i < hw; ++i)
          gx[(static_cast<std::size_t>(b) * c + k) * hw + i] += self.grad[(static_cast<std::size_t>(b) * c + k) * hw + i] * mask[b * hw + i];
  });
}

// ---------------------------------------------------------------- NHWC

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require(wv.ndim() == 2 && xv.dim(-1) == wv.dim(1),
          "linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  const int cin = wv.dim(1), cout = wv.dim(0);
  const int rows = static_cast<int>(xv.size() / cin);
  const bool has_bias = static_cast<bool>(bias);
  Shape out_shape = xv.shape();
  out_shape.back() = cout;
  Tensor y(out_shape);
  MapMat ym(y.data(), rows, cout);
  ym.noalias() = CMapMat(xv.data(), rows, cin) * CMapMat(wv.data(), cout, cin).transpose();
  if (has_bias)
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), cout);
  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_op(std::move(y), std::move(parents), [=](Node& self) {
    CMapMat g(self.grad.data(), rows, cout);
    if (double* gx = grad_of(self, 0))
      MapMat(gx, rows, cin).noalias() += g * CMapMat(self.parents[1]->value.data(), cout, cin);
    if (double* gw = grad_of(self, 1))
      MapMat(gw, cout, cin).noalias() += g.transpose() * CMapMat(self.parents[0]->value.data(), rows, cin);
    if (has_bias)
      if (double* gb = grad_of(self, 2)) Eigen::Map<Eigen::RowVectorXd>(gb, cout) += g.colwise().sum();
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  const int c = xv.dim(-1);
  require(gamma.value().size() == static_cast<std::size_t>(c), "layer_norm: gamma size mismatch");
  const std::size_t rows = xv.size() / c;
  Tensor xhat(xv.shape()), y(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = xv.data() + r * c;
    double m = 0.0, v = 0.0;
    for (int k = 0; k < c; ++k) m += p[k];
    m /= c;
    for (int k = 0; k < c; ++k) v += (p[k] - m) * (p[k] - m);
    v /= c;
    inv_std[r] = 1.0 / std::sqrt(v + eps);
    for (int k = 0; k < c; ++k) {
      xhat[r * c + k] = (p[k] - m) * inv_std[r];
      y[r * c + k] = xhat[r * c + k] * gamma.value()[k] + beta.value()[k];
    }
  }
  return make_op(std::move(y), {x, gamma, beta},
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const Tensor& gam = self.parents[1]->value;
                   double* gx = grad_of(self, 0);
                   double* gg = grad_of(self, 1);
                   double* gb = grad_of(self, 2);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* g = self.grad.data() + r * c;
                     const double* xh = xhat.data() + r * c;
                     double mg = 0.0, mgx = 0.0;
                     for (int k = 0; k < c; ++k) {
                       if (gg) gg[k] += g[k] * xh[k];
                       if (gb) gb[k] += g[k];
                       const double gh = g[k] * gam[k];
                       mg += gh;
                       mgx += gh * xh[k];
                     }
                     if (!gx) continue;
                     mg /= c;
                     mgx /= c;
                     for (int k = 0; k < c; ++k) gx[r * c + k] += inv_std[r] * (g[k] * gam[k] - mg - xh[k] * mgx);
                   }
                 });
}

Var depthwise_conv3x3(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 4 && weight.value().size() == static_cast<std::size_t>(xv.dim(3)) * 9 &&
              bias.value().size() == static_cast<std::size_t>(xv.dim(3)),
          "depthwise_conv3x3: bad shapes");
  const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  auto idx = [=](int b, int i, int j, int k) {
    return ((static_cast<std::size_t>(b) * h + i) * w + j) * c + k;
  };
  Tensor y(xv.shape());
  const Tensor& wv = weight.value();
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int k = 0; k < c; ++k) {
          double s = bias.value()[k];
          for (int dy = -1; dy <= 1; ++dy) {
            const int ii = i + dy;
            if (ii < 0 || ii >= h) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const int jj = j + dx;
              if (jj < 0 || jj >= w) continue;
              s += wv[k * 9 + (dy + 1) * 3 + dx + 1] * xv[idx(b, ii, jj, k)];
            }
          }
          y[idx(b, i, j, k)] = s;
        }
  return make_op(std::move(y), {x, weight, bias}, [=](Node& self) {
    const Tensor& xin = self.parents[0]->value;
    const Tensor& win = self.parents[1]->value;
    double* gx = grad_of(self, 0);
    double* gw = grad_of(self, 1);
    double* gb = grad_of(self, 2);
    for (int b = 0; b < n; ++b)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          for (int k = 0; k < c; ++k) {
            const double g = self.grad[idx(b, i, j, k)];
            if (gb) gb[k] += g;
            for (int dy = -1; dy <= 1; ++dy) {
              const int ii = i + dy;
              if (ii < 0 || ii >= h) continue;
              for (int dx = -1; dx <= 1; ++dx) {
                const int jj = j + dx;
                if (jj < 0 || jj >= w) continue;
                const int wi = k * 9 + (dy + 1) * 3 + dx + 1;
                if (gw) gw[wi] += g * xin[idx(b, ii, jj, k)];
                if (gx) gx[idx(b, ii, jj, k)] += g * win[wi];
              }
            }
          }
  });
}

Var space_to_channel(const Var& x, int factor) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 4 && xv.dim(1) % factor == 0 && xv.dim(2) % factor == 0,
          "space_to_channel: size " + shape_str(xv.shape()) + " not divisible by " + std::to_string(factor));
  const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  const int ho = h / factor, wo = w / factor, co = factor * factor * c;
  std::vector<std::uint32_t> index(xv.size());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j)
        for (int q = 0; q < factor * factor; ++q)
          for (int k = 0; k < c; ++k)
            index[o++] = static_cast<std::uint32_t>(
                ((static_cast<std::size_t>(b) * h + i * factor + q / factor) * w + j * factor + q % factor) * c + k);
  return gather(x, {n, ho, wo, co}, std::move(index));
}

Var channel_to_space(const Var& x, int factor) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 4 && xv.dim(3) % (factor * factor) == 0, "channel_to_space: channels not divisible");
  const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), ci = xv.dim(3);
  const int c = ci / (factor * factor), ho = h * factor, wo = w * factor;
  std::vector<std::uint32_t> index(xv.size());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j)
        for (int k = 0; k < c; ++k) {
          const int q = (i % factor) * factor + j % factor;
          index[o++] = static_cast<std::uint32_t>(
              ((static_cast<std::size_t>(b) * h + i / factor) * w + j / factor) * ci + q * c + k);
        }
  return gather(x, {n, ho, wo, c}, std::move(index));
}

Var concat_last(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.ndim() == bv.ndim(), "concat_last: rank mismatch");
  for (int i = 0; i + 1 < av.ndim(); ++i) require(av.dim(i) == bv.dim(i), "concat_last: shape mismatch");
  const int ca = av.dim(-1), cb = bv.dim(-1);
  const std::size_t rows = av.size() / ca;
  Shape s = av.shape();
  s.back() = ca + cb;
  Tensor y(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, y.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, y.data() + r * (ca + cb) + ca);
  }
  return make_op(std::move(y), {a, b}, [=](Node& self) {
    double* ga = grad_of(self, 0);
    double* gb = grad_of(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * (ca + cb);
      if (ga)
        for (int k = 0; k < ca; ++k) ga[r * ca + k] += g[k];
      if (gb)
        for (int k = 0; k < cb; ++k) gb[r * cb + k] += g[ca + k];
    }
  });
}

Var nchw_to_nhwc(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 4, "nchw_to_nhwc: expected rank 4");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  std::vector<std::uint32_t> index(xv.size());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int k = 0; k < c; ++k)
          index[o++] = static_cast<std::uint32_t>(((static_cast<std::size_t>(b) * c + k) * h + i) * w + j);
  return gather(x, {n, h, w, c}, std::move(index));
}

Var nhwc_to_nchw(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 4, "nhwc_to_nchw: expected rank 4");
  const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  std::vector<std::uint32_t> index(xv.size());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          index[o++] = static_cast<std::uint32_t>(((static_cast<std::size_t>(b) * h + i) * w + j) * c + k);
  return gather(x, {n, c, h, w}, std::move(index));
}

Var permute_tokens(const Var& x, const std::vector<int>& order) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 3 && order.size() == static_cast<std::size_t>(xv.dim(1)),
          "permute_tokens: order length must equal the token count");
  const int n = xv.dim(0), l = xv.dim(1), c = xv.dim(2);
  std::vector<std::uint32_t> index(xv.size());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int t = 0; t < l; ++t)
      for (int k = 0; k < c; ++k)
        index[o++] = static_cast<std::uint32_t>((static_cast<std::size_t>(b) * l + order[t]) * c + k);
  return gather(x, xv.shape(), std::move(index));
}

// ---------------------------------------------------------------- selective scan

Var selective_scan(const Var& u, const Var& delta, const Var& a, const Var& b, const Var& c,
                   const Var& d) {
  const Tensor& uv = u.value();
  require(uv.ndim() == 3, "selective_scan: u must be (N, L, E)");
  const int n = uv.dim(0), l = uv.dim(1), e = uv.dim(2);
  require(a.value().ndim() == 2 && a.value().dim(0) == e, "selective_scan: a must be (E, S)");
  const int s = a.value().dim(1);
  expect_same_shape(uv, delta.value(), "selective_scan delta");
  require(b.value().shape() == Shape({n, l, s}) && c.value().shape() == Shape({n, l, s}),
          "selective_scan: b and c must be (N, L, S)");
  require(d.value().size() == static_cast<std::size_t>(e), "selective_scan: d must be (E)");

  const Tensor& dv = delta.value();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Tensor& cv = c.value();
  Tensor y(uv.shape());
  // States after each step, laid out (N, E, L, S).
  std::vector<double> states(static_cast<std::size_t>(n) * e * l * s);
  for (int bi = 0; bi < n; ++bi)
    for (int ei = 0; ei < e; ++ei) {
      double* hist = states.data() + (static_cast<std::size_t>(bi) * e + ei) * l * s;
      for (int t = 0; t < l; ++t) {
        const std::size_t ut = (static_cast<std::size_t>(bi) * l + t) * e + ei;
        const std::size_t bt = (static_cast<std::size_t>(bi) * l + t) * s;
        const double x = uv[ut], dt = dv[ut];
        double out = d.value()[ei] * x;
        for (int si = 0; si < s; ++si) {
          const double ai = av[ei * s + si];
          const double prev = t > 0 ? hist[(t - 1) * s + si] : 0.0;
          const double h = std::exp(dt * ai) * prev + zoh_gain(dt, ai) * bv[bt + si] * x;
          hist[t * s + si] = h;
          out += cv[bt + si] * h;
        }
        y[ut] = out;
      }
    }

  return make_op(std::move(y), {u, delta, a, b, c, d},
                 [=, states = std::move(states)](Node& self) {
                   const Tensor& u_ = self.parents[0]->value;
                   const Tensor& d_ = self.parents[1]->value;
                   const Tensor& a_ = self.parents[2]->value;
                   const Tensor& b_ = self.parents[3]->value;
                   const Tensor& c_ = self.parents[4]->value;
                   const Tensor& dd_ = self.parents[5]->value;
                   double* gu = grad_of(self, 0);
                   double* gdelta = grad_of(self, 1);
                   double* ga = grad_of(self, 2);
                   double* gb = grad_of(self, 3);
                   double* gc = grad_of(self, 4);
                   double* gd = grad_of(self, 5);
                   std::vector<double> gh(s);
                   for (int bi = 0; bi < n; ++bi)
                     for (int ei = 0; ei < e; ++ei) {
                       const double* hist = states.data() + (static_cast<std::size_t>(bi) * e + ei) * l * s;
                       std::fill(gh.begin(), gh.end(), 0.0);
                       for (int t = l - 1; t >= 0; --t) {
                         const std::size_t ut = (static_cast<std::size_t>(bi) * l + t) * e + ei;
                         const std::size_t bt = (static_cast<std::size_t>(bi) * l + t) * s;
                         const double gy = self.grad[ut], x = u_[ut], dt = d_[ut];
                         if (gd) gd[ei] += gy * x;
                         double gx = gy * dd_[ei];
                         double gdt = 0.0;
                         for (int si = 0; si < s; ++si) {
                           const double ai = a_[ei * s + si];
                           const double h = hist[t * s + si];
                           const double prev = t > 0 ? hist[(t - 1) * s + si] : 0.0;
                           if (gc) gc[bt + si] += gy * h;
                           const double g = gh[si] + gy * c_[bt + si];
                           const double decay = std::exp(dt * ai);
                           const double gain = zoh_gain(dt, ai);
                           const double bx = b_[bt + si] * x;
                           if (gb) gb[bt + si] += g * gain * x;
                           gx += g * gain * b_[bt + si];
                           // d decay/d dt = a decay; d gain/d dt = decay.
                           gdt += g * (prev * ai * decay + bx * decay);
                           if (ga) ga[ei * s + si] += g * (prev * dt * decay + bx * zoh_gain_da(dt, ai));
                           gh[si] = g * decay;
                         }
                         if (gu) gu[ut] += gx;
                         if (gdelta) gdelta[ut] += gdt;
                       }
                     }
                 });
}

}  // namespace eviscrib::ops
