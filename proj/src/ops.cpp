// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gemm.hpp"

namespace bilingunet {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

struct ConvGeometry {
  int channels, height, width;  // the "image" side of the convolution
  int kh, kw, stride, pad;
  int out_h, out_w;             // the "column" side
  int patch() const { return channels * kh * kw; }
  int positions() const { return out_h * out_w; }
};

// Unrolls image `img` ([C,H,W]) into cols[patch, col_stride] starting at
// column `col_offset`.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols, int col_stride, int col_offset) {
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * col_stride + col_offset;
        const T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds cols back onto `img`.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img, int col_stride, int col_offset) {
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const T* row =
            cols + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * col_stride + col_offset;
        T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// [N, C, P] <-> [C, N*P]
template <typename T>
void batch_to_channel_major(const T* src, T* dst, int n, int c, int p) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + (static_cast<std::size_t>(b) * c + ch) * p, p,
                  dst + (static_cast<std::size_t>(ch) * n + b) * p);
}

template <typename T>
void channel_major_to_batch(const T* src, T* dst, int n, int c, int p, bool accumulate) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const T* s = src + (static_cast<std::size_t>(ch) * n + b) * p;
      T* d = dst + (static_cast<std::size_t>(b) * c + ch) * p;
      if (accumulate)
        for (int i = 0; i < p; ++i) d[i] += s[i];
      else
        std::copy_n(s, p, d);
    }
}

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_to_string(shape));
  }
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_to_string(a) + " vs " +
                         shape_to_string(b));
  }
}

template <typename T>
void accumulate(const Tensor<T>& target, std::span<const T> delta) {
  if (!target.requires_grad()) return;
  auto g = target.grad_buffer();
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(k.shape(), 4, "conv2d kernel");
  if (x.dim(1) != k.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " do not match kernel " + shape_to_string(k.shape()));
  }
  if (stride < 1 || pad < 0) throw ParameterError("conv2d: stride must be >= 1 and pad >= 0");
  const int n = static_cast<int>(x.dim(0));
  const int cin = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2));
  const int w = static_cast<int>(x.dim(3));
  const int cout = static_cast<int>(k.dim(0));
  const int kh = static_cast<int>(k.dim(2));
  const int kw = static_cast<int>(k.dim(3));
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_to_string(k.shape()) +
                         " larger than padded input " + shape_to_string(x.shape()));
  }
  const ConvGeometry g{cin, h, w, kh, kw, stride, pad, (h + 2 * pad - kh) / stride + 1,
                       (w + 2 * pad - kw) / stride + 1};
  const int p = g.positions();
  const int cols_n = n * p;

  std::vector<T> cols(static_cast<std::size_t>(g.patch()) * cols_n);
  for (int b = 0; b < n; ++b)
    im2col(x.ptr() + static_cast<std::size_t>(b) * cin * h * w, g, cols.data(), cols_n, b * p);
  std::vector<T> out_cm(static_cast<std::size_t>(cout) * cols_n);
  detail::gemm(false, false, cout, cols_n, g.patch(), T{1}, k.ptr(), cols.data(), T{0},
               out_cm.data());
  Tensor<T> out(Shape{x.dim(0), k.dim(0), static_cast<std::size_t>(g.out_h),
                      static_cast<std::size_t>(g.out_w)});
  channel_major_to_batch(out_cm.data(), out.ptr(), n, cout, p, false);

  if (auto* tape = detail::recording({&x, &k})) {
    out.set_requires_grad(true);
    tape->push([x, k, out, g, n, cout]() mutable {
      if (!out.has_grad()) return;
      const int p = g.positions();
      const int cols_n = n * p;
      std::vector<T> gout_cm(static_cast<std::size_t>(cout) * cols_n);
      batch_to_channel_major(out.grad().data(), gout_cm.data(), n, cout, p);
      std::vector<T> cols(static_cast<std::size_t>(g.patch()) * cols_n);
      const std::size_t img = static_cast<std::size_t>(g.channels) * g.height * g.width;
      for (int b = 0; b < n; ++b) im2col(x.ptr() + b * img, g, cols.data(), cols_n, b * p);
      if (k.requires_grad()) {
        detail::gemm(false, true, cout, g.patch(), cols_n, T{1}, gout_cm.data(), cols.data(), T{1},
                     k.grad_buffer().data());
      }
      if (x.requires_grad()) {
        detail::gemm(true, false, g.patch(), cols_n, cout, T{1}, k.ptr(), gout_cm.data(), T{0},
                     cols.data());
        T* gx = x.grad_buffer().data();
        for (int b = 0; b < n; ++b) col2im(cols.data(), g, gx + b * img, cols_n, b * p);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_per_sample(const Tensor<T>& x, const Tensor<T>& k, int pad) {
  require_rank(x.shape(), 4, "conv2d_per_sample input");
  require_rank(k.shape(), 5, "conv2d_per_sample kernel");
  if (k.dim(0) != x.dim(0) || k.dim(2) != x.dim(1)) {
    throw DimensionError("conv2d_per_sample: kernel " + shape_to_string(k.shape()) +
                         " does not fit input " + shape_to_string(x.shape()));
  }
  const int n = static_cast<int>(x.dim(0));
  const int cin = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2));
  const int w = static_cast<int>(x.dim(3));
  const int cout = static_cast<int>(k.dim(1));
  const int kh = static_cast<int>(k.dim(3));
  const int kw = static_cast<int>(k.dim(4));
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw DimensionError("conv2d_per_sample: kernel larger than padded input");
  }
  const ConvGeometry g{cin, h, w, kh, kw, 1, pad, h + 2 * pad - kh + 1, w + 2 * pad - kw + 1};
  const int p = g.positions();
  const std::size_t img = static_cast<std::size_t>(cin) * h * w;
  const std::size_t ksize = static_cast<std::size_t>(cout) * g.patch();
  Tensor<T> out(Shape{x.dim(0), k.dim(1), static_cast<std::size_t>(g.out_h),
                      static_cast<std::size_t>(g.out_w)});
  std::vector<T> cols(static_cast<std::size_t>(g.patch()) * p);
  for (int b = 0; b < n; ++b) {
    im2col(x.ptr() + b * img, g, cols.data(), p, 0);
    detail::gemm(false, false, cout, p, g.patch(), T{1}, k.ptr() + b * ksize, cols.data(), T{0},
                 out.ptr() + static_cast<std::size_t>(b) * cout * p);
  }

  if (auto* tape = detail::recording({&x, &k})) {
    out.set_requires_grad(true);
    tape->push([x, k, out, g, n, cout]() mutable {
      if (!out.has_grad()) return;
      const int p = g.positions();
      const std::size_t img = static_cast<std::size_t>(g.channels) * g.height * g.width;
      const std::size_t ksize = static_cast<std::size_t>(cout) * g.patch();
      std::vector<T> cols(static_cast<std::size_t>(g.patch()) * p);
      const T* gout = out.grad().data();
      T* gk = k.requires_grad() ? k.grad_buffer().data() : nullptr;
      T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      for (int b = 0; b < n; ++b) {
        const T* gout_b = gout + static_cast<std::size_t>(b) * cout * p;
        if (gk != nullptr) {
          im2col(x.ptr() + b * img, g, cols.data(), p, 0);
          detail::gemm(false, true, cout, g.patch(), p, T{1}, gout_b, cols.data(), T{1},
                       gk + b * ksize);
        }
        if (gx != nullptr) {
          detail::gemm(true, false, g.patch(), p, cout, T{1}, k.ptr() + b * ksize, gout_b, T{0},
                       cols.data());
          col2im(cols.data(), g, gx + b * img, p, 0);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad,
                           int out_pad) {
  require_rank(x.shape(), 4, "conv_transpose2d input");
  require_rank(k.shape(), 4, "conv_transpose2d kernel");
  if (stride < 1 || pad < 0) throw ParameterError("conv_transpose2d: stride must be >= 1 and pad >= 0");
  if (out_pad < 0 || out_pad >= stride) {
    throw ParameterError("conv_transpose2d: out_pad must satisfy 0 <= out_pad < stride");
  }
  if (x.dim(1) != k.dim(0)) {
    throw DimensionError("conv_transpose2d: input channels " + std::to_string(x.dim(1)) +
                         " do not match kernel " + shape_to_string(k.shape()));
  }
  const int n = static_cast<int>(x.dim(0));
  const int cin = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2));
  const int w = static_cast<int>(x.dim(3));
  const int cout = static_cast<int>(k.dim(1));
  const int kh = static_cast<int>(k.dim(2));
  const int kw = static_cast<int>(k.dim(3));
  const int out_h = (h - 1) * stride - 2 * pad + kh + out_pad;
  const int out_w = (w - 1) * stride - 2 * pad + kw + out_pad;
  if (out_h < 1 || out_w < 1) throw DimensionError("conv_transpose2d: empty output");
  // Geometry of the conv2d whose adjoint this is: image = output, columns = input.
  const ConvGeometry g{cout, out_h, out_w, kh, kw, stride, pad, h, w};
  const int p = h * w;
  const int cols_n = n * p;

  std::vector<T> x_cm(static_cast<std::size_t>(cin) * cols_n);
  batch_to_channel_major(x.ptr(), x_cm.data(), n, cin, p);
  std::vector<T> cols(static_cast<std::size_t>(g.patch()) * cols_n);
  detail::gemm(true, false, g.patch(), cols_n, cin, T{1}, k.ptr(), x_cm.data(), T{0}, cols.data());
  Tensor<T> out(Shape{x.dim(0), k.dim(1), static_cast<std::size_t>(out_h),
                      static_cast<std::size_t>(out_w)});
  const std::size_t img = static_cast<std::size_t>(cout) * out_h * out_w;
  for (int b = 0; b < n; ++b) col2im(cols.data(), g, out.ptr() + b * img, cols_n, b * p);

  if (auto* tape = detail::recording({&x, &k})) {
    out.set_requires_grad(true);
    tape->push([x, k, out, g, n, cin]() mutable {
      if (!out.has_grad()) return;
      const int p = g.positions();
      const int cols_n = n * p;
      const std::size_t img = static_cast<std::size_t>(g.channels) * g.height * g.width;
      std::vector<T> cols(static_cast<std::size_t>(g.patch()) * cols_n);
      for (int b = 0; b < n; ++b) im2col(out.grad().data() + b * img, g, cols.data(), cols_n, b * p);
      if (k.requires_grad()) {
        std::vector<T> x_cm(static_cast<std::size_t>(cin) * cols_n);
        batch_to_channel_major(x.ptr(), x_cm.data(), n, cin, p);
        detail::gemm(false, true, cin, g.patch(), cols_n, T{1}, x_cm.data(), cols.data(), T{1},
                     k.grad_buffer().data());
      }
      if (x.requires_grad()) {
        std::vector<T> gx_cm(static_cast<std::size_t>(cin) * cols_n);
        detail::gemm(false, false, cin, cols_n, g.patch(), T{1}, k.ptr(), cols.data(), T{0},
                     gx_cm.data());
        channel_major_to_batch(gx_cm.data(), x.grad_buffer().data(), n, cin, p, true);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw DimensionError("add_channel_bias: bias " + shape_to_string(b.shape()) +
                         " does not match input " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  Tensor<T> out = x.clone();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* d = out.ptr() + (i * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) d[j] += b[ch];
    }
  if (auto* tape = detail::recording({&x, &b})) {
    out.set_requires_grad(true);
    tape->push([x, b, out, n, c, inner]() mutable {
      if (!out.has_grad()) return;
      accumulate(x, out.grad());
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        const T* go = out.grad().data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            T s{0};
            const T* d = go + (i * c + ch) * inner;
            for (std::size_t j = 0; j < inner; ++j) s += d[j];
            gb[ch] += s;
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, bool training) {
  require_rank(x.shape(), 4, "batchnorm2d input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || state.channels() != c) {
    throw DimensionError("batchnorm2d: parameters do not match " + std::to_string(c) + " channels");
  }
  const std::size_t count = n * hw;
  if (training && count < 2) {
    throw ContractError("batchnorm2d: training needs more than one value per channel");
  }
  std::vector<T> mean_c(c), invstd(c);
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* d = x.ptr() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) s += d[j];
      }
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* d = x.ptr() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) v += (d[j] - mu) * (d[j] - mu);
      }
      const double var = v / static_cast<double>(count);
      mean_c[ch] = static_cast<T>(mu);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      const double unbiased = v / static_cast<double>(count - 1);
      state.running_mean[ch] =
          (T{1} - state.momentum) * state.running_mean[ch] + state.momentum * static_cast<T>(mu);
      state.running_var[ch] = (T{1} - state.momentum) * state.running_var[ch] +
                              state.momentum * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean_c[ch] = state.running_mean[ch];
      invstd[ch] = T{1} / std::sqrt(state.running_var[ch] + state.eps);
    }
  }

  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const T v = (x[off + j] - mean_c[ch]) * invstd[ch];
        xhat[off + j] = v;
        out[off + j] = gamma[ch] * v + beta[ch];
      }
    }

  if (auto* tape = detail::recording({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape->push([x, gamma, beta, out, xhat, invstd, n, c, hw, training]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      const T m = static_cast<T>(n * hw);
      for (std::size_t ch = 0; ch < c; ++ch) {
        T sum_g{0}, sum_gx{0};
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t off = (i * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) {
            sum_g += go[off + j];
            sum_gx += go[off + j] * xhat[off + j];
          }
        }
        if (gamma.requires_grad()) gamma.grad_buffer()[ch] += sum_gx;
        if (beta.requires_grad()) beta.grad_buffer()[ch] += sum_g;
        if (!x.requires_grad()) continue;
        T* gx = x.grad_buffer().data();
        const T scale_c = gamma[ch] * invstd[ch];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t off = (i * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) {
            if (training) {
              gx[off + j] += scale_c * (go[off + j] - sum_g / m - xhat[off + j] * sum_gx / m);
            } else {
              gx[off + j] += scale_c * go[off + j];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(w.shape(), 2, "affine weight");
  const std::size_t din = w.dim(1), dout = w.dim(0);
  if (x.shape().back() != din) {
    throw DimensionError("affine: input " + shape_to_string(x.shape()) + " does not match weight " +
                         shape_to_string(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != dout)) {
    throw DimensionError("affine: bias " + shape_to_string(b.shape()) + " does not match weight " +
                         shape_to_string(w.shape()));
  }
  const int rows = static_cast<int>(x.numel() / din);
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  if (b.defined()) {
    for (int r = 0; r < rows; ++r) std::copy_n(b.ptr(), dout, out.ptr() + r * dout);
  }
  detail::gemm(false, true, rows, static_cast<int>(dout), static_cast<int>(din), T{1}, x.ptr(),
               w.ptr(), b.defined() ? T{1} : T{0}, out.ptr());

  if (auto* tape = detail::recording({&x, &w, &b})) {
    out.set_requires_grad(true);
    tape->push([x, w, b, out, rows, din, dout]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      if (x.requires_grad()) {
        detail::gemm(false, false, rows, static_cast<int>(din), static_cast<int>(dout), T{1}, go,
                     w.ptr(), T{1}, x.grad_buffer().data());
      }
      if (w.requires_grad()) {
        detail::gemm(true, false, static_cast<int>(dout), static_cast<int>(din), rows, T{1}, go,
                     x.ptr(), T{1}, w.grad_buffer().data());
      }
      if (b.defined() && b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (int r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < dout; ++j) gb[j] += go[r * dout + j];
      }
    });
  }
  return out;
}

namespace {

// Elementwise map whose derivative is expressed through the output value.
template <typename T, typename Fwd, typename DerivFromOut>
Tensor<T> unary_map(const Tensor<T>& x, Fwd fwd, DerivFromOut deriv) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i]);
  if (auto* tape = detail::recording({&x})) {
    out.set_requires_grad(true);
    tape->push([x, out, deriv]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      auto go = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * deriv(x[i], out[i]);
    });
  }
  return out;
}

}  // namespace

namespace detail {

KinkProbe*& kink_probe() {
  thread_local KinkProbe* probe = nullptr;
  return probe;
}

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  if (auto* probe = detail::kink_probe()) {
    for (T v : x.data()) {
      const bool positive = v > T{0};
      if (probe->recording) {
        probe->reference.push_back(positive);
      } else if (probe->cursor >= probe->reference.size() || probe->reference[probe->cursor++] != positive) {
        probe->crossed = true;
      }
    }
  }
  return unary_map(
      x, [](T v) { return v <= T{0} ? T{0} : v; },  // NaN passes through
      [](T in, T) { return in > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_map(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary_map(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return relu(x);
    case Activation::sigmoid:
      return sigmoid(x);
    case Activation::tanh:
      return tanh(x);
  }
  throw ParameterError("unknown activation");
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: empty list");
  const Shape& first = parts.front().shape();
  if (first.size() < 2) throw DimensionError("concat_channels: rank must be >= 2");
  const std::size_t n = first[0];
  const std::size_t inner = parts.front().numel() / (n * first[1]);
  std::size_t total_c = 0;
  for (const auto& part : parts) {
    const Shape& s = part.shape();
    if (s.size() != first.size() || s[0] != n ||
        !std::equal(s.begin() + 2, s.end(), first.begin() + 2)) {
      throw DimensionError("concat_channels: " + shape_to_string(s) + " incompatible with " +
                           shape_to_string(first));
    }
    total_c += s[1];
  }
  Shape out_shape = first;
  out_shape[1] = total_c;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c_off = 0;
    for (const auto& part : parts) {
      const std::size_t block = part.dim(1) * inner;
      std::copy_n(part.ptr() + i * block, block, out.ptr() + (i * total_c + c_off) * inner);
      c_off += part.dim(1);
    }
  }
  if (auto* tape = detail::recording(parts)) {
    out.set_requires_grad(true);
    tape->push([parts, out, n, inner, total_c]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      std::size_t c_off = 0;
      for (auto& part : parts) {
        const std::size_t block = part.dim(1) * inner;
        if (part.requires_grad()) {
          T* gp = part.grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) {
            const T* src = go + (i * total_c + c_off) * inner;
            for (std::size_t j = 0; j < block; ++j) gp[i * block + j] += src[j];
          }
        }
        c_off += part.dim(1);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = unit(rng) < p ? T{0} : keep_scale;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * mask[i];
  if (auto* tape = detail::recording({&x})) {
    out.set_requires_grad(true);
    tape->push([x, out, mask = std::move(mask)]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      auto go = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * mask[i];
    });
  }
  return out;
}

namespace {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_map(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Bwd bwd) {
  require_same_shape(a.shape(), b.shape(), name);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = fwd(a[i], b[i]);
  if (auto* tape = detail::recording({&a, &b})) {
    out.set_requires_grad(true);
    tape->push([a, b, out, bwd]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      T* ga = a.requires_grad() ? a.grad_buffer().data() : nullptr;
      T* gb = b.requires_grad() ? b.grad_buffer().data() : nullptr;
      for (std::size_t i = 0; i < go.size(); ++i) {
        auto [da, db] = bwd(a[i], b[i]);
        if (ga) ga[i] += go[i] * da;
        if (gb) gb[i] += go[i] * db;
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_map(
      a, b, "add", [](T u, T v) { return u + v; },
      [](T, T) { return std::pair<T, T>{T{1}, T{1}}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_map(
      a, b, "sub", [](T u, T v) { return u - v; },
      [](T, T) { return std::pair<T, T>{T{1}, T{-1}}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_map(
      a, b, "mul", [](T u, T v) { return u * v; }, [](T u, T v) { return std::pair<T, T>{v, u}; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_map(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank(x.shape(), 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin >= end || end > cols) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") of " + std::to_string(cols));
  }
  const std::size_t width = end - begin;
  Tensor<T> out(Shape{rows, width});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.ptr() + r * cols + begin, width, out.ptr() + r * width);
  if (auto* tape = detail::recording({&x})) {
    out.set_requires_grad(true);
    tape->push([x, out, rows, cols, begin, width]() mutable {
      if (!out.has_grad()) return;
      T* gx = x.grad_buffer().data();
      const T* go = out.grad().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) gx[r * cols + begin + j] += go[r * width + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_to_string(x.shape()) + " -> " + shape_to_string(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::recording({&x})) {
    out.set_requires_grad(true);
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      accumulate(x, out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& ids) {
  require_rank(table.shape(), 2, "embedding table");
  if (ids.empty()) throw ContractError("embedding: empty id list");
  const std::size_t vocab = table.dim(0), dim = table.dim(1);
  for (std::int64_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
  }
  Tensor<T> out(Shape{ids.size(), dim});
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table.ptr() + ids[r] * dim, dim, out.ptr() + r * dim);
  if (auto* tape = detail::recording({&table})) {
    out.set_requires_grad(true);
    tape->push([table, out, ids, dim]() mutable {
      if (!out.has_grad()) return;
      T* gt = table.grad_buffer().data();
      const T* go = out.grad().data();
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < dim; ++j) gt[ids[r] * dim + j] += go[r * dim + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  require_rank(x.shape(), 2, "l2_normalize_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> norms(rows);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.ptr() + r * cols;
    T s{0};
    for (std::size_t j = 0; j < cols; ++j) s += src[j] * src[j];
    norms[r] = std::sqrt(s);
    const T denom = norms[r] + eps;
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = src[j] / denom;
  }
  if (auto* tape = detail::recording({&x})) {
    out.set_requires_grad(true);
    tape->push([x, out, norms, rows, cols, eps]() mutable {
      if (!out.has_grad()) return;
      T* gx = x.grad_buffer().data();
      const T* go = out.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * cols;
        const T* gr = go + r * cols;
        const T denom = norms[r] + eps;
        T dot{0};
        for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * xr[j];
        // d/dx of x/(|x|+eps): g/d - x (g.x) / (d^2 |x|)
        const T coeff = norms[r] > T{0} ? dot / (denom * denom * norms[r]) : T{0};
        for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += gr[j] / denom - xr[j] * coeff;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s{0};
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (auto* tape = detail::recording({&x})) {
    out.set_requires_grad(true);
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (T& v : x.grad_buffer()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

#define BILINGUNET_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);                     \
  template Tensor<T> conv2d_per_sample(const Tensor<T>&, const Tensor<T>&, int);               \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, int, int, int);      \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                 BatchNormState<T>&, bool);                                    \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> tanh(const Tensor<T>&);                                                   \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                 \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                           \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, Rng&);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> embedding(const Tensor<T>&, const std::vector<std::int64_t>&);            \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&, T);                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);

BILINGUNET_INSTANTIATE_OPS(float)
BILINGUNET_INSTANTIATE_OPS(double)

}  // namespace bilingunet
