// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "eigen_map.hpp"
#include "nilmformer/error.hpp"

namespace nilm::ops {
namespace {

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

void expect_same_shape(const Var& a, const Var& b, const char* op) {
  NILM_EXPECT(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                          " vs " + to_string(b.shape()));
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

}  // namespace

Var add(Var a, Var b) {
  expect_same_shape(a, b, "add");
  Tensor out = a.value();
  add_into(out, b.value());
  Tape& t = a.tape();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [&t, a, b](const Tensor& g) {
    if (a.requires_grad()) add_into(t.grad(a.id()), g);
    if (b.requires_grad()) add_into(t.grad(b.id()), g);
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  expect_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tape& t = a.tape();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [&t, a, b](const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (a.requires_grad()) {
      Tensor& ga = t.grad(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = t.grad(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= factor;
  Tape& t = a.tape();
  return t.record(std::move(out), a.requires_grad(), [&t, a, factor](const Tensor& g) {
    Tensor& ga = t.grad(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  Tape& t = a.tape();
  return t.record(Tensor::scalar(s), a.requires_grad(), [&t, a](const Tensor& g) {
    for (auto& v : t.grad(a.id()).values()) v += g[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var expand(Var a, std::size_t axis, std::size_t count) {
  const Shape& in = a.shape();
  NILM_EXPECT(axis < in.size() && in[axis] == 1, "expand: axis must have extent 1");
  Shape shape = in;
  shape[axis] = count;
  const std::size_t outer = prod(in, 0, axis);
  const std::size_t inner = prod(in, axis + 1, in.size());
  Tensor out(shape);
  const double* src = a.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < count; ++c)
      std::copy_n(src + o * inner, inner, out.data() + (o * count + c) * inner);
  Tape& t = a.tape();
  return t.record(std::move(out), a.requires_grad(), [&t, a, outer, inner, count](const Tensor& g) {
    Tensor& ga = t.grad(a.id());
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t c = 0; c < count; ++c)
        for (std::size_t i = 0; i < inner; ++i) ga[o * inner + i] += g[(o * count + c) * inner + i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  Tape& t = a.tape();
  return t.record(std::move(out), a.requires_grad(), [&t, a](const Tensor& g) {
    Tensor& ga = t.grad(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var transpose12(Var a) {
  NILM_EXPECT(a.value().rank() == 3, "transpose12 expects a rank-3 tensor");
  const std::size_t B = a.dim(0), A = a.dim(1), C = a.dim(2);
  Tensor out({B, C, A});
  const double* src = a.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t j = 0; j < C; ++j) out[(b * C + j) * A + i] = src[(b * A + i) * C + j];
  Tape& t = a.tape();
  return t.record(std::move(out), a.requires_grad(), [&t, a, B, A, C](const Tensor& g) {
    Tensor& ga = t.grad(a.id());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < A; ++i)
        for (std::size_t j = 0; j < C; ++j) ga[(b * A + i) * C + j] += g[(b * C + j) * A + i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  NILM_EXPECT(!parts.empty(), "concat: no inputs");
  const Shape& first = parts[0].shape();
  NILM_EXPECT(axis < first.size(), "concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  bool rg = false;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    NILM_EXPECT(s.size() == first.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      NILM_EXPECT(i == axis || s[i] == first[i], "concat: extents differ off the concat axis");
    shape[axis] += s[axis];
    rg = rg || p.requires_grad();
  }
  const std::size_t outer = prod(first, 0, axis);
  const std::size_t inner = prod(first, axis + 1, first.size());
  const std::size_t row = shape[axis] * inner;
  Tensor out(shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data() + o * chunk, chunk, out.data() + o * row + offset);
    offset += chunk;
  }
  Tape& t = parts[0].tape();
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), rg, [&t, inputs, outer, inner, row, axis](const Tensor& g) {
    std::size_t offset = 0;
    for (const auto& p : inputs) {
      const std::size_t chunk = p.dim(axis) * inner;
      if (p.requires_grad()) {
        Tensor& gp = t.grad(p.id());
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[o * row + offset + i];
      }
      offset += chunk;
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& in = a.shape();
  NILM_EXPECT(axis < in.size() && length > 0 && start + length <= in[axis], "slice: range out of bounds");
  Shape shape = in;
  shape[axis] = length;
  const std::size_t outer = prod(in, 0, axis);
  const std::size_t inner = prod(in, axis + 1, in.size());
  const std::size_t in_row = in[axis] * inner;
  const std::size_t chunk = length * inner;
  const std::size_t skip = start * inner;
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.value().data() + o * in_row + skip, chunk, out.data() + o * chunk);
  Tape& t = a.tape();
  return t.record(std::move(out), a.requires_grad(), [&t, a, outer, in_row, chunk, skip](const Tensor& g) {
    Tensor& ga = t.grad(a.id());
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < chunk; ++i) ga[o * in_row + skip + i] += g[o * chunk + i];
  });
}

Var linear(Var x, Var weight, Var bias) {
  const Shape& xs = x.shape();
  NILM_EXPECT(weight.value().rank() == 2, "linear: weight must be [out x in]");
  const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
  NILM_EXPECT(xs.back() == in_f, "linear: input features " + std::to_string(xs.back()) +
                                     " do not match weight " + to_string(weight.shape()));
  NILM_EXPECT(bias.value().size() == out_f, "linear: bias size mismatch");
  const std::size_t rows = x.value().size() / in_f;
  Shape shape = xs;
  shape.back() = out_f;
  Tensor out(shape);
  auto X = detail::cmat(x.value(), rows, in_f);
  auto W = detail::cmat(weight.value(), out_f, in_f);
  auto b = detail::cvec(bias.value());
  auto Y = detail::mat(out, rows, out_f);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += b.transpose();
  Tape& t = x.tape();
  const bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  return t.record(std::move(out), rg, [&t, x, weight, bias, rows, in_f, out_f](const Tensor& g) {
    auto G = detail::cmat(g, rows, out_f);
    if (x.requires_grad())
      detail::mat(t.grad(x.id()), rows, in_f).noalias() += G * detail::cmat(weight.value(), out_f, in_f);
    if (weight.requires_grad())
      detail::mat(t.grad(weight.id()), out_f, in_f).noalias() += G.transpose() * detail::cmat(x.value(), rows, in_f);
    if (bias.requires_grad()) detail::vec(t.grad(bias.id())) += G.colwise().sum().transpose();
  });
}

Var bmm(Var a, Var b, bool transpose_a, bool transpose_b) {
  NILM_EXPECT(a.value().rank() == 3 && b.value().rank() == 3, "bmm expects rank-3 operands");
  NILM_EXPECT(a.dim(0) == b.dim(0), "bmm: batch mismatch");
  const std::size_t N = a.dim(0);
  const std::size_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const std::size_t M = transpose_a ? ac : ar;
  const std::size_t K = transpose_a ? ar : ac;
  const std::size_t Kb = transpose_b ? bc : br;
  const std::size_t P = transpose_b ? br : bc;
  NILM_EXPECT(K == Kb, "bmm: inner dimensions differ");
  Tensor out({N, M, P});
  for (std::size_t n = 0; n < N; ++n) {
    auto A = detail::cmat(a.value().data() + n * ar * ac, ar, ac);
    auto Bm = detail::cmat(b.value().data() + n * br * bc, br, bc);
    auto C = detail::mat(out.data() + n * M * P, M, P);
    if (!transpose_a && !transpose_b) C.noalias() = A * Bm;
    else if (!transpose_a) C.noalias() = A * Bm.transpose();
    else if (!transpose_b) C.noalias() = A.transpose() * Bm;
    else C.noalias() = A.transpose() * Bm.transpose();
  }
  Tape& t = a.tape();
  const bool rg = a.requires_grad() || b.requires_grad();
  return t.record(std::move(out), rg, [&t, a, b, transpose_a, transpose_b, N, ar, ac, br, bc, M, P](const Tensor& g) {
    for (std::size_t n = 0; n < N; ++n) {
      auto A = detail::cmat(a.value().data() + n * ar * ac, ar, ac);
      auto Bm = detail::cmat(b.value().data() + n * br * bc, br, bc);
      auto G = detail::cmat(g.data() + n * M * P, M, P);
      if (a.requires_grad()) {
        auto dA = detail::mat(t.grad(a.id()).data() + n * ar * ac, ar, ac);
        // d op(A) = G op(B)^T
        if (!transpose_a) {
          if (!transpose_b) dA.noalias() += G * Bm.transpose();
          else dA.noalias() += G * Bm;
        } else {
          if (!transpose_b) dA.noalias() += Bm * G.transpose();
          else dA.noalias() += Bm.transpose() * G.transpose();
        }
      }
      if (b.requires_grad()) {
        auto dB = detail::mat(t.grad(b.id()).data() + n * br * bc, br, bc);
        // d op(B) = op(A)^T G
        if (!transpose_b) {
          if (!transpose_a) dB.noalias() += A.transpose() * G;
          else dB.noalias() += A * G;
        } else {
          if (!transpose_a) dB.noalias() += G.transpose() * A;
          else dB.noalias() += G.transpose() * A.transpose();
        }
      }
    }
  });
}

Var conv1d(Var x, Var kernel, Var bias, std::size_t dilation) {
  NILM_EXPECT(x.value().rank() == 3, "conv1d: input must be [B x Cin x n]");
  NILM_EXPECT(kernel.value().rank() == 3, "conv1d: kernel must be [Cout x Cin x k]");
  const std::size_t B = x.dim(0), cin = x.dim(1), n = x.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != cin)
    throw ConfigError("conv1d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, got " +
                      std::to_string(cin));
  if (bias.value().size() != cout) throw ConfigError("conv1d: bias size does not match output channels");
  NILM_EXPECT(k % 2 == 1, "conv1d: kernel size must be odd");
  NILM_EXPECT(dilation >= 1, "conv1d: dilation must be positive");
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) * dilation / 2);
  const std::size_t K = cin * k;
  const std::size_t cols = B * n;

  // im2col: col[(c*k + j), b*n + t] = x[b, c, t + j*dilation - pad]
  auto col = std::make_shared<Tensor>(Shape{K, cols});
  const double* xv = x.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t j = 0; j < k; ++j) {
        double* dst = col->data() + (c * k + j) * cols + b * n;
        const double* src = xv + (b * cin + c) * n;
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j * dilation) - pad;
        for (std::size_t tt = 0; tt < n; ++tt) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(tt) + shift;
          dst[tt] = (s >= 0 && s < static_cast<std::ptrdiff_t>(n)) ? src[s] : 0.0;
        }
      }

  Tensor ybig({cout, cols});
  auto W = detail::cmat(kernel.value(), cout, K);
  detail::mat(ybig, cout, cols).noalias() = W * detail::cmat(*col, K, cols);
  Tensor out({B, cout, n});
  const double* bv = bias.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < cout; ++o) {
      const double* src = ybig.data() + o * cols + b * n;
      double* dst = out.data() + (b * cout + o) * n;
      for (std::size_t tt = 0; tt < n; ++tt) dst[tt] = src[tt] + bv[o];
    }

  Tape& t = x.tape();
  const bool rg = x.requires_grad() || kernel.requires_grad() || bias.requires_grad();
  return t.record(std::move(out), rg, [&t, x, kernel, bias, col, B, cin, n, cout, k, K, cols, dilation, pad](
                                          const Tensor& g) {
    Tensor gbig({cout, cols});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < cout; ++o)
        std::copy_n(g.data() + (b * cout + o) * n, n, gbig.data() + o * cols + b * n);
    auto G = detail::cmat(gbig, cout, cols);
    if (kernel.requires_grad())
      detail::mat(t.grad(kernel.id()), cout, K).noalias() += G * detail::cmat(*col, K, cols).transpose();
    if (bias.requires_grad()) detail::vec(t.grad(bias.id())) += G.rowwise().sum();
    if (x.requires_grad()) {
      Tensor dcol({K, cols});
      detail::mat(dcol, K, cols).noalias() = detail::cmat(kernel.value(), cout, K).transpose() * G;
      Tensor& gx = t.grad(x.id());
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < k; ++j) {
            const double* src = dcol.data() + (c * k + j) * cols + b * n;
            double* dst = gx.data() + (b * cin + c) * n;
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j * dilation) - pad;
            for (std::size_t tt = 0; tt < n; ++tt) {
              const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(tt) + shift;
              if (s >= 0 && s < static_cast<std::ptrdiff_t>(n)) dst[s] += src[tt];
            }
          }
    }
  });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  constexpr double inv_sqrt2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  const Tensor& xv = x.value();
  const std::size_t n = xv.size();
  Tensor out(x.shape());
  // derivative Phi(x) + x phi(x), kept for the backward pass
  auto deriv = x.requires_grad() ? std::make_shared<Tensor>(x.shape()) : nullptr;
  for (std::size_t i = 0; i < n; ++i) {
    const double cdf = 0.5 * (1.0 + std::erf(xv[i] * inv_sqrt2));
    out[i] = xv[i] * cdf;
    if (deriv) (*deriv)[i] = cdf;
  }
  if (deriv) {
    auto X = detail::cvec(xv).array();
    auto Dv = detail::vec(*deriv).array();
    Dv += X * inv_sqrt2pi * (-0.5 * X * X).exp();
  }
  Tape& t = x.tape();
  return t.record(std::move(out), x.requires_grad(), [&t, x, deriv](const Tensor& g) {
    detail::vec(t.grad(x.id())).array() += detail::cvec(g).array() * detail::cvec(*deriv).array();
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const std::size_t d = x.shape().back();
  NILM_EXPECT(gamma.value().size() == d && beta.value().size() == d, "layer_norm: affine size mismatch");
  const std::size_t rows = x.value().size() / d;
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(x.shape());
  const double* xv = x.value().data();
  const double* gv = gamma.value().data();
  const double* bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += row[i];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - m) * (row[i] - m);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (row[i] - m) * is;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  Tape& t = x.tape();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return t.record(std::move(out), rg, [&t, x, gamma, beta, xhat, inv_std, rows, d](const Tensor& g) {
    const double* gv = gamma.value().data();
    if (gamma.requires_grad() || beta.requires_grad()) {
      Tensor& gg = t.grad(gamma.id());
      Tensor& gb = t.grad(beta.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < d; ++i) {
          if (gamma.requires_grad()) gg[i] += g[r * d + i] * (*xhat)[r * d + i];
          if (beta.requires_grad()) gb[i] += g[r * d + i];
        }
    }
    if (!x.requires_grad()) return;
    Tensor& gx = t.grad(x.id());
    std::vector<double> dh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        dh[i] = g[r * d + i] * gv[i];
        mean_dh += dh[i];
        mean_dh_h += dh[i] * (*xhat)[r * d + i];
      }
      mean_dh /= static_cast<double>(d);
      mean_dh_h /= static_cast<double>(d);
      const double is = (*inv_std)[r];
      for (std::size_t i = 0; i < d; ++i)
        gx[r * d + i] += is * (dh[i] - mean_dh - (*xhat)[r * d + i] * mean_dh_h);
    }
  });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats stats, bool train) {
  NILM_EXPECT(x.value().rank() == 3, "batch_norm: input must be [B x C x n]");
  const std::size_t B = x.dim(0), C = x.dim(1), n = x.dim(2);
  NILM_EXPECT(gamma.value().size() == C && beta.value().size() == C, "batch_norm: affine size mismatch");
  NILM_EXPECT(stats.running_mean.size() == C && stats.running_var.size() == C, "batch_norm: stats size mismatch");
  const double count = static_cast<double>(B * n);
  std::vector<double> mu(C), inv_std(C);
  const double* xv = x.value().data();
  if (train) {
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < n; ++i) m += xv[(b * C + c) * n + i];
      m /= count;
      double var = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < n; ++i) {
          const double dv = xv[(b * C + c) * n + i] - m;
          var += dv * dv;
        }
      var /= count;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + stats.eps);
      const double unbiased = count > 1 ? var * count / (count - 1.0) : var;
      stats.running_mean[c] = (1.0 - stats.momentum) * stats.running_mean[c] + stats.momentum * m;
      stats.running_var[c] = (1.0 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }
  auto xhat = std::make_shared<Tensor>(x.shape());
  Tensor out(x.shape());
  const double* gv = gamma.value().data();
  const double* bv = beta.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = (b * C + c) * n + i;
        const double h = (xv[idx] - mu[c]) * inv_std[c];
        (*xhat)[idx] = h;
        out[idx] = h * gv[c] + bv[c];
      }
  Tape& t = x.tape();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return t.record(std::move(out), rg, [&t, x, gamma, beta, xhat, inv_std, train, B, C, n, count](const Tensor& g) {
    const double* gv = gamma.value().data();
    std::vector<double> sum_g(C, 0.0), sum_gh(C, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = (b * C + c) * n + i;
          sum_g[c] += g[idx];
          sum_gh[c] += g[idx] * (*xhat)[idx];
        }
    if (gamma.requires_grad()) {
      Tensor& gg = t.grad(gamma.id());
      for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gh[c];
    }
    if (beta.requires_grad()) {
      Tensor& gb = t.grad(beta.id());
      for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
    }
    if (!x.requires_grad()) return;
    Tensor& gx = t.grad(x.id());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const double scale_c = gv[c] * inv_std[c];
        const double m_g = sum_g[c] / count;
        const double m_gh = sum_gh[c] / count;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = (b * C + c) * n + i;
          if (train) gx[idx] += scale_c * (g[idx] - m_g - (*xhat)[idx] * m_gh);
          else gx[idx] += scale_c * g[idx];
        }
      }
  });
}

Var softmax(Var x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / d;
  Tensor out(x.shape());
  const double* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double* dst = out.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    NILM_EXPECT(std::isfinite(mx), "softmax: row has no finite entry");
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dst[i] = std::exp(row[i] - mx);
      s += dst[i];
    }
    for (std::size_t i = 0; i < d; ++i) dst[i] /= s;
  }
  Tape& t = x.tape();
  const std::size_t id = t.size();
  return t.record(std::move(out), x.requires_grad(), [&t, x, id, rows, d](const Tensor& g) {
    const Tensor& y = t.value(id);
    Tensor& gx = t.grad(x.id());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += y[r * d + i] * (g[r * d + i] - dot);
    }
  });
}

Var diag_mask(Var scores) {
  const Shape& s = scores.shape();
  NILM_EXPECT(s.size() >= 2 && s[s.size() - 1] == s[s.size() - 2], "diag_mask: trailing matrices must be square");
  const std::size_t L = s.back();
  const std::size_t mats = scores.value().size() / (L * L);
  Tensor out = scores.value();
  for (std::size_t m = 0; m < mats; ++m)
    for (std::size_t i = 0; i < L; ++i) out[m * L * L + i * L + i] = -std::numeric_limits<double>::infinity();
  Tape& t = scores.tape();
  return t.record(std::move(out), scores.requires_grad(), [&t, scores, mats, L](const Tensor& g) {
    Tensor& gs = t.grad(scores.id());
    for (std::size_t m = 0; m < mats; ++m)
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j)
          if (i != j) gs[m * L * L + i * L + j] += g[m * L * L + i * L + j];
  });
}

Var split_heads(Var x, std::size_t heads) {
  NILM_EXPECT(x.value().rank() == 3, "split_heads expects [B x L x D]");
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  NILM_EXPECT(heads > 0 && D % heads == 0, "split_heads: features not divisible by heads");
  const std::size_t dh = D / heads;
  Tensor out({B * heads, L, dh});
  const double* xv = x.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv + (b * L + l) * D + h * dh, dh, out.data() + ((b * heads + h) * L + l) * dh);
  Tape& t = x.tape();
  return t.record(std::move(out), x.requires_grad(), [&t, x, B, L, D, heads, dh](const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t e = 0; e < dh; ++e) gx[(b * L + l) * D + h * dh + e] += g[((b * heads + h) * L + l) * dh + e];
  });
}

Var merge_heads(Var x, std::size_t heads) {
  NILM_EXPECT(x.value().rank() == 3 && heads > 0 && x.dim(0) % heads == 0, "merge_heads expects [B*H x L x dh]");
  const std::size_t B = x.dim(0) / heads, L = x.dim(1), dh = x.dim(2);
  const std::size_t D = heads * dh;
  Tensor out({B, L, D});
  const double* xv = x.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < L; ++l)
        std::copy_n(xv + ((b * heads + h) * L + l) * dh, dh, out.data() + (b * L + l) * D + h * dh);
  Tape& t = x.tape();
  return t.record(std::move(out), x.requires_grad(), [&t, x, B, L, D, heads, dh](const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t e = 0; e < dh; ++e) gx[((b * heads + h) * L + l) * dh + e] += g[(b * L + l) * D + h * dh + e];
  });
}

Var multi_head_attention(Var q, Var k, Var v, std::size_t heads, double scale, bool mask_diagonal,
                         Tensor* weights) {
  NILM_EXPECT(q.value().rank() == 3, "multi_head_attention expects [B x L x D]");
  NILM_EXPECT(q.shape() == k.shape() && q.shape() == v.shape(), "multi_head_attention: q, k, v shapes differ");
  const std::size_t B = q.dim(0), L = q.dim(1), D = q.dim(2);
  NILM_EXPECT(heads > 0 && D % heads == 0, "multi_head_attention: features not divisible by heads");
  NILM_EXPECT(!mask_diagonal || L >= 2, "multi_head_attention: masked attention needs at least 2 positions");
  const std::size_t dh = D / heads;
  const double inf = std::numeric_limits<double>::infinity();

  auto probs = std::make_shared<Tensor>(Shape{B * heads, L, L});
  Tensor out({B, L, D});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * L * D + h * dh;
      auto Q = detail::csmat(q.value().data() + off, L, dh, D);
      auto K = detail::csmat(k.value().data() + off, L, dh, D);
      auto V = detail::csmat(v.value().data() + off, L, dh, D);
      auto A = detail::mat(probs->data() + (b * heads + h) * L * L, L, L);
      A.noalias() = (scale * Q) * K.transpose();
      if (mask_diagonal) A.diagonal().setConstant(-inf);
      const detail::ColVec mx = A.rowwise().maxCoeff();
      NILM_EXPECT(mx.allFinite(), "multi_head_attention: row has no finite score");
      A.array().colwise() -= mx.array();
      A = A.array().exp();
      if (mask_diagonal) A.diagonal().setZero();  // vectorized exp(-inf) is a denormal, not 0
      A.array().colwise() /= A.rowwise().sum().array();
      detail::smat(out.data() + off, L, dh, D).noalias() = A * V;
    }
  }
  if (weights) *weights = *probs;

  Tape& t = q.tape();
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return t.record(std::move(out), rg, [&t, q, k, v, probs, B, L, D, dh, heads, scale](const Tensor& g) {
    detail::RowMat dA(L, L);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * L * D + h * dh;
        auto A = detail::cmat(probs->data() + (b * heads + h) * L * L, L, L);
        auto G = detail::csmat(g.data() + off, L, dh, D);
        auto V = detail::csmat(v.value().data() + off, L, dh, D);
        if (v.requires_grad()) detail::smat(t.grad(v.id()).data() + off, L, dh, D).noalias() += A.transpose() * G;
        if (!q.requires_grad() && !k.requires_grad()) continue;
        dA.noalias() = G * V.transpose();
        // softmax backward, then the score scale; masked entries have A = 0
        const detail::ColVec dots = (dA.array() * A.array()).rowwise().sum();
        dA = A.array() * (dA.array().colwise() - dots.array()) * scale;
        if (q.requires_grad())
          detail::smat(t.grad(q.id()).data() + off, L, dh, D).noalias() +=
              dA * detail::csmat(k.value().data() + off, L, dh, D);
        if (k.requires_grad())
          detail::smat(t.grad(k.id()).data() + off, L, dh, D).noalias() +=
              dA.transpose() * detail::csmat(q.value().data() + off, L, dh, D);
      }
    }
  });
}

Var dropout(Var x, double p, bool train, std::mt19937_64& rng) {
  NILM_EXPECT(p >= 0.0 && p < 1.0, "dropout probability must lie in [0, 1)");
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u < p ? 0.0 : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  Tape& t = x.tape();
  return t.record(std::move(out), x.requires_grad(), [&t, x, mask](const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

Var denormalize(Var x, Var stats) {
  const std::size_t B = x.dim(0);
  NILM_EXPECT(stats.value().size() == 2 * B, "denormalize: stats must be [B x 2]");
  const std::size_t per = x.value().size() / B;
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  const Tensor& sv = stats.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = xv[b * per + i] * sv[2 * b + 1] + sv[2 * b];
  Tape& t = x.tape();
  const bool rg = x.requires_grad() || stats.requires_grad();
  return t.record(std::move(out), rg, [&t, x, stats, B, per](const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& sv = stats.value();
    if (x.requires_grad()) {
      Tensor& gx = t.grad(x.id());
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < per; ++i) gx[b * per + i] += g[b * per + i] * sv[2 * b + 1];
    }
    if (stats.requires_grad()) {
      Tensor& gs = t.grad(stats.id());
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < per; ++i) {
          gs[2 * b] += g[b * per + i];
          gs[2 * b + 1] += g[b * per + i] * xv[b * per + i];
        }
    }
  });
}

Var mse_loss(Var pred, Var target) {
  expect_same_shape(pred, target, "mse_loss");
  const Tensor& p = pred.value();
  const Tensor& y = target.value();
  const double N = static_cast<double>(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
  Tape& t = pred.tape();
  const bool rg = pred.requires_grad() || target.requires_grad();
  return t.record(Tensor::scalar(s / N), rg, [&t, pred, target, N](const Tensor& g) {
    const Tensor& p = pred.value();
    const Tensor& y = target.value();
    const double c = 2.0 * g[0] / N;
    if (pred.requires_grad()) {
      Tensor& gp = t.grad(pred.id());
      for (std::size_t i = 0; i < p.size(); ++i) gp[i] += c * (p[i] - y[i]);
    }
    if (target.requires_grad()) {
      Tensor& gy = t.grad(target.id());
      for (std::size_t i = 0; i < p.size(); ++i) gy[i] -= c * (p[i] - y[i]);
    }
  });
}

}  // namespace nilm::ops
