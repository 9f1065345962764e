#include "camforge/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace camforge {

using detail::TensorImpl;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.dim() != rank) {
    throw std::invalid_argument(std::string(op) + ": " + what + " must be " +
                                std::to_string(rank) + "-D, got " + shape_str(t.shape()));
  }
}

void accumulate(TensorImpl& target, const std::vector<double>& delta) {
  auto& g = target.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return detail::make_result(a.shape(), std::move(out), "add", {a, b},
                             [ai, bi](const TensorImpl& o) {
                               if (ai->requires_grad) accumulate(*ai, o.grad);
                               if (bi->requires_grad) accumulate(*bi, o.grad);
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return detail::make_result(a.shape(), std::move(out), "mul", {a, b},
                             [ai, bi](const TensorImpl& o) {
                               // ai and bi may alias (x * x); read data before writing grads.
                               const std::size_t n = o.grad.size();
                               std::vector<double> da(n), db(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                 da[i] = o.grad[i] * bi->data[i];
                                 db[i] = o.grad[i] * ai->data[i];
                               }
                               if (ai->requires_grad) accumulate(*ai, da);
                               if (bi->requires_grad) accumulate(*bi, db);
                             });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  auto ai = a.impl_ptr();
  return detail::make_result(a.shape(), std::move(out), "scale", {a},
                             [ai, factor](const TensorImpl& o) {
                               auto& g = ai->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * o.grad[i];
                             });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto ai = a.impl_ptr();
  return detail::make_result(Shape{}, {s}, "sum", {a}, [ai](const TensorImpl& o) {
    auto& g = ai->ensure_grad();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  return scale(sum(a), 1.0 / n);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  auto ai = a.impl_ptr();
  return detail::make_result(std::move(shape), std::move(out), "reshape", {a},
                             [ai](const TensorImpl& o) { accumulate(*ai, o.grad); });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  auto xi = x.impl_ptr();
  return detail::make_result(x.shape(), std::move(out), "relu", {x}, [xi](const TensorImpl& o) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xi->data[i] > 0.0) g[i] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w;      // input
  std::size_t o, kh, kw;       // kernel
  std::size_t oh, ow;          // output
  std::size_t stride, padding;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                           const Conv2dParams& p) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  if (is[1] != ks[1]) {
    throw std::invalid_argument("conv2d: input " + shape_str(is) + " has " +
                                std::to_string(is[1]) + " channels but kernel " + shape_str(ks) +
                                " expects " + std::to_string(ks[1]));
  }
  if (p.stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != ks[0])) {
    throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) +
                                " does not match kernel " + shape_str(ks));
  }
  if (is[2] + 2 * p.padding < ks[2] || is[3] + 2 * p.padding < ks[3]) {
    throw std::invalid_argument("conv2d: kernel " + shape_str(ks) +
                                " larger than padded input " + shape_str(is));
  }
  ConvGeometry g{is[0], is[1], is[2], is[3], ks[0], ks[2], ks[3], 0, 0, p.stride, p.padding};
  g.oh = (g.h + 2 * g.padding - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.padding - g.kw) / g.stride + 1;
  return g;
}

// Output columns [lo, hi) whose tap kx lands inside the input row.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kx) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto k = static_cast<std::ptrdiff_t>(kx);
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  // ox * s + k - pad >= 0  and  < w
  std::ptrdiff_t lo = pad - k > 0 ? (pad - k + s - 1) / s : 0;
  std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(g.w) + pad - k > 0
                          ? (static_cast<std::ptrdiff_t>(g.w) + pad - k + s - 1) / s
                          : 0;
  lo = std::min<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(g.ow));
  hi = std::clamp<std::ptrdiff_t>(hi, lo, static_cast<std::ptrdiff_t>(g.ow));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// col is (C*kh*kw) x (oh*ow), row-major.
void im2col(const ConvGeometry& g, const double* img, double* col) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * g.positions();
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + lo, 0.0);
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - pad;
          if (g.stride == 1) {
            std::copy(src + static_cast<std::ptrdiff_t>(lo) + shift, src + static_cast<std::ptrdiff_t>(hi) + shift,
                      dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) {
              dst[ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + shift];
            }
          }
          std::fill(dst + hi, dst + g.ow, 0.0);
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* img) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * g.positions();
        const auto [lo, hi] = valid_columns(g, kx);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox * g.stride) + shift] += src[ox];
        }
      }
    }
  }
}

// Scratch column buffer reused across calls on the same thread.
double* scratch(std::size_t size) {
  thread_local std::vector<double> buffer;
  if (buffer.size() < size) buffer.resize(size);
  return buffer.data();
}

std::vector<double> conv_forward_im2col(const ConvGeometry& g, const double* in, const double* k,
                                        const double* b) {
  std::vector<double> out(g.n * g.o * g.positions());
  const auto samples = static_cast<std::ptrdiff_t>(g.n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t n = 0; n < samples; ++n) {
    double* col = scratch(g.patch() * g.positions());
    im2col(g, in + static_cast<std::size_t>(n) * g.c * g.h * g.w, col);
    MatrixMap y(out.data() + static_cast<std::size_t>(n) * g.o * g.positions(),
                static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.positions()));
    ConstMatrixMap wk(k, static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.patch()));
    ConstMatrixMap cm(col, static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.positions()));
    y.noalias() = wk * cm;
    if (b) {
      for (std::size_t o = 0; o < g.o; ++o) y.row(static_cast<Eigen::Index>(o)).array() += b[o];
    }
  }
  return out;
}

void conv_backward_im2col(const ConvGeometry& g, const double* in, const double* k,
                          const double* dout, double* din, double* dk, double* db) {
  const std::size_t kernel_size = g.o * g.patch();
  // Per-sample kernel-gradient partials, reduced in sample order so the
  // result does not depend on the number of threads.
  std::vector<double> partial(dk ? g.n * kernel_size : 0);
  const auto samples = static_cast<std::ptrdiff_t>(g.n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t sn = 0; sn < samples; ++sn) {
    const auto n = static_cast<std::size_t>(sn);
    ConstMatrixMap dy(dout + n * g.o * g.positions(), static_cast<Eigen::Index>(g.o),
                      static_cast<Eigen::Index>(g.positions()));
    double* col = scratch(g.patch() * g.positions());
    if (dk) {
      im2col(g, in + n * g.c * g.h * g.w, col);
      ConstMatrixMap cm(col, static_cast<Eigen::Index>(g.patch()),
                        static_cast<Eigen::Index>(g.positions()));
      MatrixMap pk(partial.data() + n * kernel_size, static_cast<Eigen::Index>(g.o),
                   static_cast<Eigen::Index>(g.patch()));
      pk.noalias() = dy * cm.transpose();
    }
    if (din) {
      ConstMatrixMap wk(k, static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.patch()));
      MatrixMap dcol(col, static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.positions()));
      dcol.noalias() = wk.transpose() * dy;
      col2im(g, col, din + n * g.c * g.h * g.w);
    }
  }
  if (dk) {
    for (std::size_t n = 0; n < g.n; ++n) {
      const double* p = partial.data() + n * kernel_size;
      for (std::size_t i = 0; i < kernel_size; ++i) dk[i] += p[i];
    }
  }
  if (db) {
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t o = 0; o < g.o; ++o) {
        const double* row = dout + (n * g.o + o) * g.positions();
        double s = 0.0;
        for (std::size_t i = 0; i < g.positions(); ++i) s += row[i];
        db[o] += s;
      }
    }
  }
}

template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o)
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox)
          for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                const std::size_t out_idx = ((n * g.o + o) * g.oh + oy) * g.ow + ox;
                const std::size_t in_idx =
                    ((n * g.c + c) * g.h + static_cast<std::size_t>(iy)) * g.w +
                    static_cast<std::size_t>(ix);
                const std::size_t k_idx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                fn(out_idx, in_idx, k_idx);
              }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              Conv2dParams params) {
  const ConvGeometry g = conv_geometry(input, kernel, bias, params);
  const double* bias_ptr = bias.defined() ? bias.data().data() : nullptr;
  std::vector<double> out;
  if (params.algorithm == ConvAlgorithm::im2col) {
    out = conv_forward_im2col(g, input.data().data(), kernel.data().data(), bias_ptr);
  } else {
    out.assign(g.n * g.o * g.positions(), 0.0);
    const double* in = input.data().data();
    const double* k = kernel.data().data();
    for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t ki) { out[oi] += in[ii] * k[ki]; });
    if (bias_ptr) {
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t o = 0; o < g.o; ++o)
          for (std::size_t p = 0; p < g.positions(); ++p) out[(n * g.o + o) * g.positions() + p] += bias_ptr[o];
    }
  }

  auto xi = input.impl_ptr(), ki = kernel.impl_ptr();
  auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
  const ConvAlgorithm algo = params.algorithm;
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      Shape{g.n, g.o, g.oh, g.ow}, std::move(out), "conv2d", std::move(inputs),
      [g, xi, ki, bi, algo](const TensorImpl& o) {
        double* din = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
        double* dk = ki->requires_grad ? ki->ensure_grad().data() : nullptr;
        double* db = (bi && bi->requires_grad) ? bi->ensure_grad().data() : nullptr;
        if (algo == ConvAlgorithm::im2col) {
          conv_backward_im2col(g, xi->data.data(), ki->data.data(), o.grad.data(), din, dk, db);
          return;
        }
        for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t kk) {
          if (din) din[ii] += o.grad[oi] * ki->data[kk];
          if (dk) dk[kk] += o.grad[oi] * xi->data[ii];
        });
        if (db) {
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t c = 0; c < g.o; ++c)
              for (std::size_t p = 0; p < g.positions(); ++p) db[c] += o.grad[(n * g.o + c) * g.positions() + p];
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization

BatchNormState BatchNormState::create(std::size_t channels) {
  return BatchNormState{Tensor(Shape{channels}, 0.0), Tensor(Shape{channels}, 1.0)};
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode) {
  require_rank(x, 4, "batchnorm2d", "input");
  const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    if (t->dim() != 1 || t->size(0) != c) {
      throw std::invalid_argument("batchnorm2d: per-channel tensor " + shape_str(t->shape()) +
                                  " does not match input " + shape_str(x.shape()));
    }
  }
  const std::size_t count = n * hw;
  if (mode == Mode::train && count < 2) {
    throw std::invalid_argument("batchnorm2d: train mode needs more than one value per channel, got " +
                                shape_str(x.shape()));
  }

  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(c);
  auto rm = state.running_mean.mutable_data();
  auto rv = state.running_var.mutable_data();

  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xd[(b * c + ch) * hw + i];
      mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = xd[(b * c + ch) * hw + i] - mu;
          ss += d * d;
        }
      var = ss / static_cast<double>(count);
      rm[ch] = (1.0 - state.momentum) * rm[ch] + state.momentum * mu;
      rv[ch] = (1.0 - state.momentum) * rv[ch] +
               state.momentum * var * static_cast<double>(count) / static_cast<double>(count - 1);
    } else {
      mu = rm[ch];
      var = rv[ch];
    }
    inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        xhat[idx] = (xd[idx] - mu) * inv_std[ch];
        out[idx] = gd[ch] * xhat[idx] + bd[ch];
      }
  }

  auto xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr();
  return detail::make_result(
      x.shape(), std::move(out), "batchnorm2d", {x, gamma, beta},
      [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, count,
       mode](const TensorImpl& o) {
        const auto& dy = o.grad;
        double* dx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
        double* dg = gi->requires_grad ? gi->ensure_grad().data() : nullptr;
        double* dbeta = bi->requires_grad ? bi->ensure_grad().data() : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * c + ch) * hw + i;
              sum_dy += dy[idx];
              sum_dy_xhat += dy[idx] * xhat[idx];
            }
          if (dg) dg[ch] += sum_dy_xhat;
          if (dbeta) dbeta[ch] += sum_dy;
          if (!dx) continue;
          const double g = gi->data[ch];
          if (mode == Mode::eval) {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * c + ch) * hw + i;
                dx[idx] += dy[idx] * g * inv_std[ch];
              }
            continue;
          }
          const double m = static_cast<double>(count);
          const double k = g * inv_std[ch] / m;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * c + ch) * hw + i;
              dx[idx] += k * (m * dy[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
            }
        }
      });
}

// ---------------------------------------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  if (hw == 0) throw std::invalid_argument("global_avg_pool: empty spatial extent");
  std::vector<double> out(n * c);
  auto xd = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += xd[i * hw + p];
    out[i] = s / static_cast<double>(hw);
  }
  auto xi = x.impl_ptr();
  return detail::make_result(Shape{n, c}, std::move(out), "global_avg_pool", {x},
                             [xi, n, c, hw](const TensorImpl& o) {
                               auto& g = xi->ensure_grad();
                               const double inv = 1.0 / static_cast<double>(hw);
                               for (std::size_t i = 0; i < n * c; ++i)
                                 for (std::size_t p = 0; p < hw; ++p) g[i * hw + p] += o.grad[i] * inv;
                             });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t n = x.size(0), f = x.size(1), outs = weight.size(0);
  if (weight.size(1) != f) {
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " vs weight " +
                                shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != outs)) {
    throw std::invalid_argument("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                                shape_str(weight.shape()));
  }
  std::vector<double> out(n * outs);
  auto xd = x.data(), wd = weight.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < outs; ++o) {
      double s = bias.defined() ? bias.data()[o] : 0.0;
      for (std::size_t k = 0; k < f; ++k) s += xd[i * f + k] * wd[o * f + k];
      out[i * outs + o] = s;
    }
  auto xi = x.impl_ptr(), wi = weight.impl_ptr();
  auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      Shape{n, outs}, std::move(out), "linear", std::move(inputs),
      [xi, wi, bi, n, f, outs](const TensorImpl& o) {
        double* dx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
        double* dw = wi->requires_grad ? wi->ensure_grad().data() : nullptr;
        double* db = (bi && bi->requires_grad) ? bi->ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < outs; ++k) {
            const double g = o.grad[i * outs + k];
            if (db) db[k] += g;
            for (std::size_t j = 0; j < f; ++j) {
              if (dx) dx[i * f + j] += g * wi->data[k * f + j];
              if (dw) dw[k * f + j] += g * xi->data[i * f + j];
            }
          }
      });
}

Tensor dropout(const Tensor& x, double rate, bool active, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (!active || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = u(rng) < rate ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  auto xi = x.impl_ptr();
  return detail::make_result(x.shape(), std::move(out), "dropout", {x},
                             [xi, mask = std::move(mask)](const TensorImpl& o) {
                               auto& g = xi->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
                             });
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
}  // namespace

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, double pos_weight) {
  require_same_shape(logits, targets, "bce_with_logits");
  if (!(pos_weight > 0.0)) throw std::invalid_argument("bce_with_logits: pos_weight must be > 0");
  if (logits.numel() == 0) throw std::invalid_argument("bce_with_logits: empty batch");
  auto z = logits.data(), y = targets.data();
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) {
      throw std::invalid_argument("bce_with_logits: target " + std::to_string(y[i]) +
                                  " at index " + std::to_string(i) + " is not binary");
    }
    total += pos_weight * y[i] * softplus(-z[i]) + (1.0 - y[i]) * softplus(z[i]);
  }
  const double n = static_cast<double>(z.size());
  auto li = logits.impl_ptr(), ti = targets.impl_ptr();
  return detail::make_result(Shape{}, {total / n}, "bce_with_logits", {logits},
                             [li, ti, pos_weight, n](const TensorImpl& o) {
                               auto& g = li->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double s = sigmoid(li->data[i]);
                                 const double yi = ti->data[i];
                                 g[i] += o.grad[0] * (pos_weight * yi * (s - 1.0) + (1.0 - yi) * s) / n;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Bilinear upsampling

namespace {

struct AxisTap {
  std::size_t lo, hi;
  double t;
};

std::vector<AxisTap> axis_taps(std::size_t in, std::size_t out) {
  std::vector<AxisTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, hi == lo ? 0.0 : src - static_cast<double>(lo)};
  }
  return taps;
}

// a + t (b - a), kept inside [min(a,b), max(a,b)] despite rounding.
double lerp_bounded(double a, double b, double t) {
  const double v = a + t * (b - a);
  return std::clamp(v, std::min(a, b), std::max(a, b));
}

}  // namespace

Tensor upsample_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
  if (map.dim() < 2) {
    throw std::invalid_argument("upsample_bilinear: need at least 2 axes, got " + shape_str(map.shape()));
  }
  const std::size_t h = map.size(map.dim() - 2), w = map.size(map.dim() - 1);
  if (h == 0 || w == 0 || out_h == 0 || out_w == 0) {
    throw std::invalid_argument("upsample_bilinear: empty spatial extent");
  }
  const std::size_t batch = map.numel() / (h * w);
  const auto ty = axis_taps(h, out_h);
  const auto tx = axis_taps(w, out_w);
  std::vector<double> out(batch * out_h * out_w);
  auto md = map.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = md.data() + b * h * w;
    double* dst = out.data() + b * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const AxisTap& ry = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const AxisTap& rx = tx[x];
        const double top = lerp_bounded(src[ry.lo * w + rx.lo], src[ry.lo * w + rx.hi], rx.t);
        const double bottom = lerp_bounded(src[ry.hi * w + rx.lo], src[ry.hi * w + rx.hi], rx.t);
        dst[y * out_w + x] = lerp_bounded(top, bottom, ry.t);
      }
    }
  }
  Shape shape = map.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  auto mi = map.impl_ptr();
  return detail::make_result(std::move(shape), std::move(out), "upsample_bilinear", {map},
                             [mi, ty, tx, batch, h, w, out_h, out_w](const TensorImpl& o) {
                               auto& g = mi->ensure_grad();
                               for (std::size_t b = 0; b < batch; ++b) {
                                 double* dst = g.data() + b * h * w;
                                 const double* up = o.grad.data() + b * out_h * out_w;
                                 for (std::size_t y = 0; y < out_h; ++y) {
                                   const AxisTap& ry = ty[y];
                                   for (std::size_t x = 0; x < out_w; ++x) {
                                     const AxisTap& rx = tx[x];
                                     const double gv = up[y * out_w + x];
                                     dst[ry.lo * w + rx.lo] += gv * (1 - rx.t) * (1 - ry.t);
                                     dst[ry.lo * w + rx.hi] += gv * rx.t * (1 - ry.t);
                                     dst[ry.hi * w + rx.lo] += gv * (1 - rx.t) * ry.t;
                                     dst[ry.hi * w + rx.hi] += gv * rx.t * ry.t;
                                   }
                                 }
                               }
                             });
}

}  // namespace camforge
